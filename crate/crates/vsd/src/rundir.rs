//! Output directory of a single command. Files written through a [`RunDir`]
//! are listed in `artifacts.json` when the run finishes; if it is dropped
//! unfinished, everything it created is removed again.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};

pub const ARTIFACTS_FILE: &str = "artifacts.json";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Artifact {
    pub path: String,
    pub bytes: u64,
}

#[derive(Debug, Serialize)]
struct ArtifactList<'a> {
    command: &'a str,
    files: &'a [Artifact],
}

#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
    command: String,
    created_root: bool,
    created_dirs: Vec<PathBuf>,
    files: Vec<Artifact>,
    finished: bool,
}

impl RunDir {
    /// Opens `root` for writing, creating it if needed. An existing
    /// directory must not already hold a finished run.
    pub fn create(root: &Path, command: &str) -> Result<Self> {
        let created_root = !root.exists();
        if created_root {
            std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        } else if !root.is_dir() {
            return Err(Error::Config(format!("{} exists and is not a directory", root.display())));
        } else if root.join(ARTIFACTS_FILE).exists() {
            return Err(Error::Config(format!("{} already holds a finished run", root.display())));
        }
        Ok(Self {
            root: root.to_path_buf(),
            command: command.to_string(),
            created_root,
            created_dirs: Vec::new(),
            files: Vec::new(),
            finished: false,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn command(&self) -> &str {
        &self.command
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn prepare(&mut self, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if self.files.iter().any(|a| a.path == rel) {
            return Err(Error::Config(format!("artifact `{rel}` written twice")));
        }
        if let Some(parent) = p.parent() {
            let mut missing = Vec::new();
            let mut d = parent;
            while !d.exists() {
                missing.push(d.to_path_buf());
                match d.parent() {
                    Some(up) => d = up,
                    None => break,
                }
            }
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            self.created_dirs.extend(missing.into_iter().rev());
        }
        Ok(p)
    }

    fn record(&mut self, rel: &str, p: &Path) -> Result<()> {
        let bytes = std::fs::metadata(p).map_err(|e| Error::io(p, e))?.len();
        self.files.push(Artifact {
            path: rel.to_string(),
            bytes,
        });
        Ok(())
    }

    pub fn write(&mut self, rel: &str, contents: &[u8]) -> Result<PathBuf> {
        let p = self.prepare(rel)?;
        std::fs::write(&p, contents).map_err(|e| Error::io(&p, e))?;
        self.record(rel, &p)?;
        Ok(p)
    }

    pub fn write_json(&mut self, rel: &str, value: &impl Serialize) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
        text.push('\n');
        self.write(rel, text.as_bytes())
    }

    /// Lets `f` produce the file itself, e.g. through a streaming encoder.
    pub fn write_with(&mut self, rel: &str, f: impl FnOnce(&Path) -> Result<()>) -> Result<PathBuf> {
        let p = self.prepare(rel)?;
        if let Err(e) = f(&p) {
            let _ = std::fs::remove_file(&p);
            return Err(e);
        }
        self.record(rel, &p)?;
        Ok(p)
    }

    pub fn artifacts(&self) -> &[Artifact] {
        &self.files
    }

    /// Writes the artifact list and keeps the outputs.
    pub fn finish(mut self) -> Result<Vec<Artifact>> {
        let list = ArtifactList {
            command: &self.command,
            files: &self.files,
        };
        let mut text = serde_json::to_string_pretty(&list).map_err(|e| Error::Config(e.to_string()))?;
        text.push('\n');
        let p = self.root.join(ARTIFACTS_FILE);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        self.finished = true;
        Ok(std::mem::take(&mut self.files))
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        if self.finished {
            return;
        }
        for a in &self.files {
            let _ = std::fs::remove_file(self.root.join(&a.path));
        }
        for d in self.created_dirs.iter().rev() {
            let _ = std::fs::remove_dir(d);
        }
        if self.created_root {
            let _ = std::fs::remove_dir(&self.root);
        }
    }
}
