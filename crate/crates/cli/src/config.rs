//! Layered settings: built-in defaults, then a JSON file, then flags.
//!
//! The file is a JSON object holding settings for the running subcommand,
//! either at top level or nested under the subcommand's name. Keys that the
//! subcommand does not know are rejected.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::CliError;

pub fn load_file(path: &Path, command: &str) -> Result<Map<String, Value>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::usage(format!("config {} is not valid JSON: {e}", path.display())))?;
    let Value::Object(mut obj) = value else {
        return Err(CliError::usage(format!("config {} must be a JSON object", path.display())));
    };
    match obj.remove(command) {
        Some(Value::Object(nested)) => Ok(nested),
        Some(_) => Err(CliError::usage(format!("config key '{command}' must be an object"))),
        None => Ok(obj),
    }
}

/// Flag values that were actually given.
#[derive(Default)]
pub struct Flags(Map<String, Value>);

impl Flags {
    pub fn set<T: Serialize>(&mut self, key: &str, value: Option<T>) {
        if let Some(v) = value {
            self.0.insert(key.to_string(), serde_json::to_value(v).expect("flag values serialize"));
        }
    }
}

pub fn resolve<C>(file: Option<Map<String, Value>>, flags: Flags) -> Result<C, CliError>
where
    C: Serialize + DeserializeOwned + Default,
{
    let Value::Object(mut merged) = serde_json::to_value(C::default()).expect("defaults serialize") else {
        unreachable!("settings are JSON objects");
    };
    for layer in file.into_iter().chain(std::iter::once(flags.0)) {
        for (k, v) in layer {
            if !merged.contains_key(&k) {
                return Err(CliError::usage(format!("unknown setting '{k}'")));
            }
            merged.insert(k, v);
        }
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::usage(format!("invalid setting: {e}")))
}
