//! Config loading, `--set` overrides and validation for the `fragility` binary.

use std::path::Path;

use fragility::driver::RunConfig;
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {reason}")]
    Read { path: String, reason: String },
    #[error("config is not valid JSON: {0}")]
    Parse(String),
    #[error("bad override '{0}': expected KEY=VALUE")]
    Override(String),
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
}

/// Parses, defaults and validates a JSON config.
pub fn validate_config(text: &str) -> Result<RunConfig, ConfigError> {
    validate_with_overrides(text, &[])
}

/// As [`validate_config`], with `KEY=VALUE` overrides applied first. Values
/// are parsed as JSON and fall back to plain strings.
pub fn validate_with_overrides(text: &str, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let mut value: Value = serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    if !value.is_object() {
        return Err(ConfigError::Parse("top level must be an object".into()));
    }
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    let schema = serde_json::to_value(RunConfig::default()).expect("default config serializes");
    let mut errors = Vec::new();
    strip_unknown(&mut value, &schema, "", &mut errors);
    match from_value(value) {
        Ok(config) => {
            errors.extend(config.violations());
            if errors.is_empty() {
                return Ok(config);
            }
        }
        Err(e) => errors.extend(e),
    }
    Err(ConfigError::Invalid(errors))
}

/// Reads and validates `path`.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::Read { path: path.display().to_string(), reason: e.to_string() })?;
    validate_with_overrides(&text, overrides)
}

pub fn apply_override(root: &mut Value, assignment: &str) -> Result<(), ConfigError> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| ConfigError::Override(assignment.to_string()))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(ConfigError::Override(assignment.to_string()));
    }
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let mut parts = key.split('.').peekable();
    while let Some(part) = parts.next() {
        let obj = match node {
            Value::Object(m) => m,
            other => {
                *other = Value::Object(Map::new());
                other.as_object_mut().expect("just created")
            }
        };
        if parts.peek().is_none() {
            obj.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    Ok(())
}

/// Removes keys of `value` absent from `schema`, recording their dotted paths.
fn strip_unknown(value: &mut Value, schema: &Value, prefix: &str, out: &mut Vec<String>) {
    let (Value::Object(v), Value::Object(s)) = (value, schema) else { return };
    v.retain(|k, child| {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match s.get(k) {
            Some(sc) => {
                strip_unknown(child, sc, &path, out);
                true
            }
            None => {
                out.push(format!("{path}: unknown key"));
                false
            }
        }
    });
}

/// Deserializes, attributing type errors to their top-level section.
fn from_value(value: Value) -> Result<RunConfig, Vec<String>> {
    serde_json::from_value::<RunConfig>(value.clone()).map_err(|_| {
        let mut errors = Vec::new();
        for (k, v) in value.as_object().expect("object checked") {
            let single = Value::Object(Map::from_iter([(k.clone(), v.clone())]));
            if let Err(e) = serde_json::from_value::<RunConfig>(single) {
                errors.push(format!("{k}: {e}"));
            }
        }
        errors
    })
}
