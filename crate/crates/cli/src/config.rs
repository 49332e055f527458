//! Config files and flag overrides.
//!
//! A config is a flat key/value document in TOML (or JSON for `.json`
//! files). Command-line flags are laid over the file's keys before the
//! typed config is deserialized, so the precedence is flags, then file,
//! then built-in defaults. Unknown keys are rejected.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{CliError, CliResult};

/// Reads a config document into a JSON object.
pub fn read_document(path: &Path) -> CliResult<Map<String, Value>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
    let value: Value = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?
    } else {
        toml::from_str(&text).map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?
    };
    match value {
        Value::Object(map) => Ok(map),
        _ => Err(CliError::usage(format!("config {} is not a key/value document", path.display()))),
    }
}

/// File keys (if any) overlaid with flag values, deserialized into `T`.
pub fn resolve<T: DeserializeOwned>(file: Option<&Path>, flags: Map<String, Value>) -> CliResult<T> {
    let mut doc = match file {
        Some(p) => read_document(p)?,
        None => Map::new(),
    };
    doc.extend(flags);
    serde_json::from_value(Value::Object(doc)).map_err(|e| CliError::usage(format!("invalid config: {e}")))
}

/// Encodes a config as TOML.
pub fn to_toml<T: Serialize>(cfg: &T) -> CliResult<String> {
    toml::to_string(cfg).map_err(|e| CliError::usage(format!("config is not representable as TOML: {e}")))
}

/// Collects `Some` flag values under their config keys.
#[derive(Default)]
pub struct Flags(Map<String, Value>);

impl Flags {
    pub fn set<V: Serialize>(&mut self, key: &str, value: Option<V>) -> &mut Self {
        if let Some(v) = value {
            self.0.insert(key.to_string(), serde_json::to_value(v).expect("flag values serialize"));
        }
        self
    }

    pub fn into_map(self) -> Map<String, Value> {
        self.0
    }
}

/// Parses a non-negative count, accepting float notation such as `1e9`.
/// Values beyond the integer range saturate.
pub fn parse_count(s: &str) -> Result<u64, String> {
    if let Ok(v) = s.parse::<u64>() {
        return Ok(v);
    }
    let x: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if !(x >= 0.0) || x.fract() != 0.0 && x < 2f64.powi(53) {
        return Err(format!("`{s}` is not a non-negative integer"));
    }
    Ok(if x >= u64::MAX as f64 { u64::MAX } else { x as u64 })
}

pub fn parse_count_usize(s: &str) -> Result<usize, String> {
    parse_count(s).map(|v| usize::try_from(v).unwrap_or(usize::MAX))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, PartialEq, Serialize, serde::Deserialize)]
    #[serde(default, deny_unknown_fields)]
    struct Demo {
        a: u64,
        b: Vec<f64>,
        name: String,
    }

    impl Default for Demo {
        fn default() -> Self {
            Self { a: 1, b: vec![0.5], name: "x".into() }
        }
    }

    #[test]
    fn precedence_is_flags_file_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "a = 7\nname = \"file\"\n").unwrap();
        let mut flags = Flags::default();
        flags.set("name", Some("flag")).set::<u64>("a", None);
        let d: Demo = resolve(Some(&path), flags.into_map()).unwrap();
        assert_eq!(d, Demo { a: 7, b: vec![0.5], name: "flag".into() });
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "bogus = 1\n").unwrap();
        let err = resolve::<Demo>(Some(&path), Map::new()).unwrap_err();
        assert_eq!(err.code, crate::error::EXIT_USAGE);
        assert!(err.message.contains("bogus"));
    }

    #[test]
    fn toml_and_json_round_trip() {
        let d = Demo { a: 3, b: vec![0.1, 0.25], name: "rt".into() };
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("c.toml");
        std::fs::write(&t, to_toml(&d).unwrap()).unwrap();
        assert_eq!(resolve::<Demo>(Some(&t), Map::new()).unwrap(), d);
        let j = dir.path().join("c.json");
        std::fs::write(&j, serde_json::to_string(&d).unwrap()).unwrap();
        assert_eq!(resolve::<Demo>(Some(&j), Map::new()).unwrap(), d);
    }

    #[test]
    fn counts_accept_float_notation() {
        assert_eq!(parse_count("12").unwrap(), 12);
        assert_eq!(parse_count("1e9").unwrap(), 1_000_000_000);
        assert_eq!(parse_count("1e30").unwrap(), u64::MAX);
        assert!(parse_count("1.5").is_err());
        assert!(parse_count("-1").is_err());
        assert!(parse_count("abc").is_err());
    }
}
