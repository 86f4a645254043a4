//! Option resolution: values from a JSON/TOML config file, overridden by
//! flags given on the command line.

use std::path::Path;

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::UsageError;

/// Reads a JSON or TOML document (chosen by extension) into a JSON value.
pub fn read_document(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let is_toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
    let value = if is_toml {
        let t: toml::Value = toml::from_str(&text).map_err(|e| sparsekrige::Error::Config {
            field: path.display().to_string(),
            message: e.to_string(),
        })?;
        serde_json::to_value(t)?
    } else {
        serde_json::from_str(&text).map_err(|e| sparsekrige::Error::Config {
            field: path.display().to_string(),
            message: e.to_string(),
        })?
    };
    Ok(value)
}

/// Overlays set flags (non-null, non-false) onto the base document.
fn overlay(base: &mut Map<String, Value>, flags: Map<String, Value>) {
    for (k, v) in flags {
        match v {
            Value::Null | Value::Bool(false) => {}
            Value::Object(inner) => {
                let slot = base.entry(k).or_insert_with(|| Value::Object(Map::new()));
                if let Value::Object(m) = slot {
                    overlay(m, inner);
                } else {
                    *slot = Value::Object(inner);
                }
            }
            other => {
                base.insert(k, other);
            }
        }
    }
}

/// Merges `flags` over the config file at `config`, rejecting keys the
/// options struct does not know.
pub fn resolve<T: Serialize + DeserializeOwned>(flags: T, config: Option<&Path>) -> Result<T> {
    let Some(path) = config else {
        return Ok(flags);
    };
    let Value::Object(mut base) = read_document(path)? else {
        return Err(sparsekrige::Error::Config {
            field: path.display().to_string(),
            message: "expected a table of options".into(),
        }
        .into());
    };
    let known = match serde_json::to_value(&flags)? {
        Value::Object(m) => m,
        _ => unreachable!("options serialize to a map"),
    };
    if let Some(bad) = base.keys().find(|k| !known.contains_key(*k)) {
        return Err(sparsekrige::Error::Config {
            field: bad.clone(),
            message: format!("unknown option in {}", path.display()),
        }
        .into());
    }
    overlay(&mut base, known);
    serde_json::from_value(Value::Object(base)).map_err(|e| {
        sparsekrige::Error::Config {
            field: path.display().to_string(),
            message: e.to_string(),
        }
        .into()
    })
}

/// Unwraps an option that must be set by a flag or the config file.
pub fn required<T: Clone>(value: &Option<T>, flag: &str) -> Result<T> {
    value
        .clone()
        .ok_or_else(|| UsageError(format!("missing required option --{flag}")).into())
}
