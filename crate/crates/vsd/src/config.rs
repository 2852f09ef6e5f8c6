//! Run configuration: a flat JSON object with dotted keys such as
//! `"denoiser.base_channels": 8`. Sections resolve into the typed option
//! structs of the core crate, with unspecified fields left at defaults.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{Error, Result};

#[derive(Debug, Default)]
pub struct Settings {
    values: BTreeMap<String, Value>,
    used: RefCell<BTreeSet<String>>,
    resolved: RefCell<BTreeMap<String, Value>>,
}

/// Parses a `--set` value: JSON when it parses, otherwise a plain string.
pub fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

impl Settings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let Value::Object(map) = v else {
            return Err(Error::Config("config file must hold a JSON object".into()));
        };
        let mut s = Self::new();
        for (k, v) in map {
            if v.is_object() {
                return Err(Error::Config(format!("`{k}`: nested objects are not allowed, use dotted keys")));
            }
            s.values.insert(k, v);
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn set(&mut self, key: impl Into<String>, value: Value) {
        self.values.insert(key.into(), value);
    }

    /// Applies a `key=value` override.
    pub fn set_assignment(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got `{assignment}`")))?;
        if k.is_empty() {
            return Err(Error::Config(format!("empty key in `{assignment}`")));
        }
        self.set(k.trim(), parse_value(v.trim()));
        Ok(())
    }

    /// Single value `key`, or `default` when unset.
    pub fn value<T: Serialize + DeserializeOwned>(&self, key: &str, default: T) -> Result<T> {
        self.used.borrow_mut().insert(key.to_string());
        let out = match self.values.get(key) {
            Some(v) => serde_json::from_value(v.clone()).map_err(|e| Error::Config(format!("`{key}`: {e}")))?,
            None => default,
        };
        let echo = serde_json::to_value(&out).map_err(|e| Error::Config(e.to_string()))?;
        self.resolved.borrow_mut().insert(key.to_string(), echo);
        Ok(out)
    }

    /// Resolves every `<prefix>.<field>` key onto `default`.
    pub fn section<T: Serialize + DeserializeOwned>(&self, prefix: &str, default: T) -> Result<T> {
        let Value::Object(mut base) = serde_json::to_value(&default).map_err(|e| Error::Config(e.to_string()))? else {
            return Err(Error::Config(format!("section `{prefix}` is not a struct")));
        };
        let dotted = format!("{prefix}.");
        for (k, v) in &self.values {
            if let Some(field) = k.strip_prefix(&dotted) {
                if !base.contains_key(field) {
                    let known: Vec<&str> = base.keys().map(String::as_str).collect();
                    return Err(Error::Config(format!("unknown key `{k}` (fields: {})", known.join(", "))));
                }
                self.used.borrow_mut().insert(k.clone());
                base.insert(field.to_string(), v.clone());
            }
        }
        let out: T = serde_json::from_value(Value::Object(base)).map_err(|e| Error::Config(format!("`{prefix}`: {e}")))?;
        let Value::Object(echo) = serde_json::to_value(&out).map_err(|e| Error::Config(e.to_string()))? else {
            unreachable!("struct serialized above")
        };
        let mut resolved = self.resolved.borrow_mut();
        for (field, v) in echo {
            resolved.insert(format!("{dotted}{field}"), v);
        }
        Ok(out)
    }

    /// Keys that were supplied but never read by the command.
    pub fn unused(&self) -> Vec<String> {
        let used = self.used.borrow();
        self.values.keys().filter(|k| !used.contains(*k)).cloned().collect()
    }

    /// Everything resolved so far as a flat dotted-key object.
    pub fn resolved(&self) -> Map<String, Value> {
        self.resolved.borrow().iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }
}
