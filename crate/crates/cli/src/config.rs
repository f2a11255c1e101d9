//! TOML run configuration layered over built-in defaults.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

/// Parsed config file; empty when no file was given.
#[derive(Clone, Debug, Default)]
pub struct FileConfig {
    root: serde_json::Map<String, Value>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let table: toml::Table =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        match serde_json::to_value(table)? {
            Value::Object(root) => Ok(Self { root }),
            _ => bail!("config root must be a table"),
        }
    }

    pub fn seed(&self) -> Result<Option<u64>> {
        match self.root.get("seed") {
            None => Ok(None),
            Some(v) => v
                .as_u64()
                .map(Some)
                .context("config key `seed` must be a non-negative integer"),
        }
    }

    pub fn section(&self, name: &str) -> Option<&Value> {
        self.root.get(name)
    }
}

/// `base` with the keys of `overlay` written over it. Keys unknown to
/// `base` are rejected so that typos do not pass silently.
pub fn layered<T: Serialize + DeserializeOwned>(base: &T, overlay: Option<&Value>, section: &str) -> Result<T> {
    let mut v = serde_json::to_value(base)?;
    if let Some(o) = overlay {
        merge(&mut v, o, section)?;
    }
    serde_json::from_value(v).with_context(|| format!("invalid values in config section [{section}]"))
}

fn merge(base: &mut Value, overlay: &Value, path: &str) -> Result<()> {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let key = format!("{path}.{k}");
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v, &key)?,
                    None => bail!("unknown config key `{key}`"),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v.clone();
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Default, PartialEq, Serialize, Deserialize)]
    struct Inner {
        a: f64,
        b: Option<u32>,
    }

    #[derive(Debug, Default, PartialEq, Serialize, Deserialize)]
    struct Outer {
        inner: Inner,
        name: String,
    }

    #[test]
    fn overlay_and_unknown_keys() {
        let o: Value = serde_json::json!({"inner": {"a": 2, "b": 7}});
        let got: Outer = layered(&Outer::default(), Some(&o), "x").unwrap();
        assert_eq!(got.inner, Inner { a: 2.0, b: Some(7) });
        let bad: Value = serde_json::json!({"inner": {"c": 1}});
        assert!(layered(&Outer::default(), Some(&bad), "x").is_err());
    }
}
