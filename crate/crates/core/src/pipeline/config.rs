//! Declarative configs from JSON or TOML files layered over a base value.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::io::read_to_string;

/// Parses a `.toml` file as TOML and anything else as JSON.
pub fn read_config_value(path: &Path) -> Result<Value> {
    let text = read_to_string(path)?;
    let is_toml = path.extension().is_some_and(|e| e == "toml");
    if is_toml {
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    } else {
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Recursively overlays `top` onto `base`; objects merge key by key, other values replace.
pub fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `base` with the file's settings applied on top.
pub fn layered<T: Serialize + DeserializeOwned>(base: &T, file: Option<&Path>) -> Result<T> {
    let Some(path) = file else {
        return Ok(serde_json::from_value(serde_json::to_value(base).expect("serializable")).expect("round trip"));
    };
    let mut value = serde_json::to_value(base).expect("serializable");
    merge(&mut value, read_config_value(path)?);
    serde_json::from_value(value).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}
