//! JSON Lines manifests: one `ManifestRecord` per line.

use std::path::{Path, PathBuf};

use vsd_core::curation::{ManifestRecord, Split};
use vsd_core::text::format_caption;

use crate::error::{Error, Result};

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: ManifestRecord =
            serde_json::from_str(line).map_err(|e| Error::Manifest(format!("line {}: {e}", i + 1)))?;
        r.validate().map_err(|e| Error::Manifest(format!("line {}: {e}", i + 1)))?;
        out.push(r);
    }
    Ok(out)
}

pub fn to_jsonl(records: &[ManifestRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("records serialize"));
        s.push('\n');
    }
    s
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text).map_err(|e| match e {
        Error::Manifest(m) => Error::Manifest(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Media location of a record; relative paths resolve against the manifest's directory.
pub fn media_path(manifest: &Path, record: &ManifestRecord) -> PathBuf {
    let p = Path::new(&record.path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new(".")).join(p)
    }
}

/// Caption in the training layout: domain, tab, description.
pub fn training_caption(record: &ManifestRecord) -> String {
    format_caption(record.domain.as_str(), &record.caption)
}

pub fn is_train(record: &ManifestRecord) -> bool {
    matches!(record.split, Split::Train | Split::Unassigned)
}

pub fn is_test(record: &ManifestRecord) -> bool {
    matches!(record.split, Split::TestR | Split::TestC)
}

#[cfg(test)]
mod tests {
    use super::*;
    use vsd_core::curation::Domain;

    fn record(id: &str) -> ManifestRecord {
        ManifestRecord {
            id: id.into(),
            path: format!("clips/{id}.gif"),
            frame_count: 8,
            width: 32,
            height: 32,
            domain: Domain::Cartoon,
            caption: "a red circle moving right".into(),
            trigger_words: vec!["circle".into()],
            ocr_text: Some(String::new()),
            split: Split::TestC,
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let recs = vec![record("a"), record("b")];
        let text = to_jsonl(&recs);
        assert_eq!(text.lines().count(), 2);
        assert_eq!(parse_manifest(&text).unwrap(), recs);
    }

    #[test]
    fn field_names_are_stable() {
        let line = to_jsonl(&[record("a")]);
        let v: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
        let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        keys.sort();
        assert_eq!(
            keys,
            ["caption", "domain", "frame_count", "height", "id", "ocr_text", "path", "split", "trigger_words", "width"]
        );
        assert_eq!(v["split"], "test-c");
        assert_eq!(v["domain"], "cartoon");
    }

    #[test]
    fn optional_fields_default() {
        let recs = parse_manifest(
            r#"{"id":"x","path":"x.gif","frame_count":3,"width":10,"height":10,"domain":"real","caption":"hi"}"#,
        )
        .unwrap();
        assert_eq!(recs[0].ocr_text, None);
        assert_eq!(recs[0].split, Split::Unassigned);
        assert!(recs[0].trigger_words.is_empty());
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = parse_manifest("\n{}\n").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        let bad = r#"{"id":"x","path":"x","frame_count":0,"width":1,"height":1,"domain":"real","caption":""}"#;
        assert!(parse_manifest(bad).is_err());
    }

    #[test]
    fn media_resolves_next_to_manifest() {
        let p = media_path(Path::new("/data/run/manifest.jsonl"), &record("a"));
        assert_eq!(p, Path::new("/data/run/clips/a.gif"));
        assert_eq!(training_caption(&record("a")), "cartoon\ta red circle moving right");
    }
}
