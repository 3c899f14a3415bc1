//! Run configuration loading: TOML file plus dotted `key=value` overrides,
//! type-checked against the full config schema.

use std::fs;
use std::path::Path;

use toml::Value;

use crate::pipeline::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("override {0:?} is not of the form key=value")]
    Malformed(String),
    #[error("unknown config key {0}")]
    UnknownKey(String),
    #[error("{key} expects {expected}, got {found}")]
    Type {
        key: String,
        expected: &'static str,
        found: &'static str,
    },
}

/// Default config with every optional field filled, so that each valid key
/// has a type to check against.
fn schema() -> Value {
    let mut c = RunConfig::default();
    c.alpha = Some(0.0);
    c.output_dir = Some(String::new());
    c.dataset.seed = Some(0);
    c.dataset.texture_dir = Some(String::new());
    c.dataset.mnist_dir = Some(String::new());
    c.dataset.usps_dir = Some(String::new());
    c.synthesis.pool_size = Some(1);
    Value::try_from(c).expect("config serializes")
}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "string",
        Value::Integer(_) => "integer",
        Value::Float(_) => "float",
        Value::Boolean(_) => "boolean",
        Value::Datetime(_) => "datetime",
        Value::Array(_) => "array",
        Value::Table(_) => "table",
    }
}

fn parse_value(raw: &str) -> Value {
    let raw = raw.trim();
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Coerces `v` to the schema's type where lossless, else reports a mismatch.
fn conform(key: &str, v: Value, expected: &Value) -> Result<Value, ConfigError> {
    let mismatch = |v: &Value| ConfigError::Type {
        key: key.to_string(),
        expected: kind(expected),
        found: kind(v),
    };
    match (expected, v) {
        (Value::Float(_), Value::Integer(i)) => Ok(Value::Float(i as f64)),
        (Value::String(_), Value::Integer(i)) => Ok(Value::String(i.to_string())),
        (Value::Array(e), Value::Array(items)) => {
            let Some(proto) = e.first() else {
                return Ok(Value::Array(items));
            };
            items
                .into_iter()
                .map(|x| conform(key, x, proto))
                .collect::<Result<_, _>>()
                .map(Value::Array)
        }
        (e, v) if kind(e) == kind(&v) => Ok(v),
        (_, v) => Err(mismatch(&v)),
    }
}

/// Applies one `a.b.c=value` override to a config tree.
pub fn apply_override(tree: &mut Value, assignment: &str) -> Result<(), ConfigError> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| ConfigError::Malformed(assignment.into()))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(ConfigError::Malformed(assignment.into()));
    }
    let schema = schema();
    let mut expected = &schema;
    for part in key.split('.') {
        expected = expected
            .get(part)
            .filter(|_| expected.is_table())
            .ok_or_else(|| ConfigError::UnknownKey(key.into()))?;
    }
    if expected.is_table() {
        return Err(ConfigError::UnknownKey(format!("{key} (a section, not a value)")));
    }
    let value = conform(key, parse_value(raw), expected)?;
    let parts: Vec<&str> = key.split('.').collect();
    let mut node = tree;
    for part in &parts[..parts.len() - 1] {
        let table = node.as_table_mut().ok_or_else(|| ConfigError::UnknownKey(key.into()))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Default::default()));
    }
    node.as_table_mut()
        .ok_or_else(|| ConfigError::UnknownKey(key.into()))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

pub fn parse_config(text: &str, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let mut tree: Value = Value::Table(toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?);
    for o in overrides {
        apply_override(&mut tree, o)?;
    }
    tree.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))
}

/// Applies `overrides` to an existing config.
pub fn with_overrides(cfg: &RunConfig, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let mut tree = Value::try_from(cfg).map_err(|e| ConfigError::Parse(e.to_string()))?;
    for o in overrides {
        apply_override(&mut tree, o)?;
    }
    tree.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))
}

/// Reads `path` (defaults when absent) and applies `overrides` in order.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let text = match path {
        Some(p) => fs::read_to_string(p).map_err(|e| ConfigError::Io {
            path: p.display().to_string(),
            message: e.to_string(),
        })?,
        None => String::new(),
    };
    parse_config(&text, overrides)
}
