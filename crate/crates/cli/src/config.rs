//! Settings resolution (flags > config file > defaults) and run snapshots.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::CliError;

pub const FORMAT_VERSION: u32 = 1;
pub const SNAPSHOT_FILE: &str = "config-snapshot.json";

/// Overlays the non-null fields of `args` on the JSON object in `config`
/// and deserializes the result; missing keys take the settings' defaults.
pub fn resolve<A: Serialize, R: DeserializeOwned>(args: &A, config: Option<&Path>) -> Result<R, CliError> {
    let mut merged = match config {
        Some(path) => {
            let value: Value = cdcm::io::read_json(path)?;
            match value {
                // A run snapshot carries its settings under `settings`.
                Value::Object(mut map) if map.contains_key("command") && map.contains_key("settings") => {
                    match map.remove("settings") {
                        Some(Value::Object(settings)) => settings,
                        _ => return Err(CliError::User(format!("{}: malformed snapshot", path.display()))),
                    }
                }
                Value::Object(map) => map,
                _ => return Err(CliError::User(format!("{}: config must be a JSON object", path.display()))),
            }
        }
        None => Map::new(),
    };
    let Value::Object(flags) = serde_json::to_value(args).map_err(|e| CliError::User(e.to_string()))? else {
        unreachable!("argument structs serialize to objects");
    };
    for (k, v) in flags {
        if !v.is_null() {
            merged.insert(k, v);
        }
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::User(format!("invalid settings: {e}")))
}

#[derive(Serialize)]
struct Snapshot<'a, R> {
    command: &'a str,
    version: &'a str,
    format_version: u32,
    settings: &'a R,
}

pub fn write_snapshot<R: Serialize>(out: &Path, command: &str, settings: &R) -> Result<(), CliError> {
    let snap = Snapshot {
        command,
        version: env!("CARGO_PKG_VERSION"),
        format_version: FORMAT_VERSION,
        settings,
    };
    cdcm::io::write_json(&out.join(SNAPSHOT_FILE), &snap)?;
    Ok(())
}

/// Seed from the settings; strict mode refuses to default it.
pub fn seed(seed: Option<u64>, strict: bool) -> Result<u64, CliError> {
    match (seed, strict) {
        (Some(s), _) => Ok(s),
        (None, true) => Err(CliError::User("--seed is required in strict mode".into())),
        (None, false) => Ok(0),
    }
}

pub fn required<T: Clone>(value: &Option<T>, flag: &str) -> Result<T, CliError> {
    value.clone().ok_or_else(|| CliError::User(format!("missing required setting --{flag}")))
}
