use serde_json::{Map, Value};

use crate::error::{Error, Result};

use super::RunConfig;

/// Apply `key value` overrides to a JSON config document.
///
/// Keys are dotted paths into the document (`policy.kind`); hyphens map to
/// underscores. Values are parsed as JSON when possible and taken as plain
/// strings otherwise, so `--policy.k 16` sets a number and
/// `--policy.kind h2o` a string.
pub fn apply_overrides(doc: &mut Value, overrides: &[(String, String)]) -> Result<()> {
    for (key, raw) in overrides {
        let path: Vec<String> = key.split('.').map(|s| s.replace('-', "_")).collect();
        if path.iter().any(String::is_empty) {
            return Err(Error::config(format!("malformed override key {key:?}")));
        }
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
        let mut node = &mut *doc;
        for (i, part) in path.iter().enumerate() {
            if node.is_null() {
                *node = Value::Object(Map::new());
            }
            let obj = node.as_object_mut().ok_or_else(|| {
                Error::config(format!("override {key:?}: {} is not an object", path[..i].join(".")))
            })?;
            if i + 1 == path.len() {
                obj.insert(part.clone(), value.clone());
                break;
            }
            node = obj.entry(part.clone()).or_insert(Value::Null);
        }
    }
    Ok(())
}

/// Build a [`RunConfig`] from an optional JSON document plus overrides.
pub fn parse_run_config(json: Option<&str>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut doc = match json {
        Some(text) => serde_json::from_str(text)?,
        None => serde_json::to_value(RunConfig::default())?,
    };
    if !doc.is_object() {
        return Err(Error::format("run config must be a JSON object"));
    }
    apply_overrides(&mut doc, overrides)?;
    let config: RunConfig = serde_json::from_value(doc)?;
    Ok(config)
}
