//! Layered configuration: preset defaults, then an optional JSON file, then
//! `--key value` flags. Every layer may only name keys the preset already has.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

/// `--key value` pairs not claimed by a subcommand's own flags.
pub type Overrides = Vec<(String, String)>;

/// Merges the file (if any) and the override flags onto `base`.
pub fn resolve<T: Serialize + DeserializeOwned>(base: &T, file: Option<&Path>, overrides: &Overrides) -> Result<T> {
    let mut value = serde_json::to_value(base).context("serializing defaults")?;
    let obj = value.as_object_mut().expect("configs serialize to objects");
    if let Some(path) = file {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let layer: Value =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let Value::Object(layer) = layer else {
            bail!("config {} must hold a JSON object", path.display());
        };
        for (k, v) in layer {
            set(obj, &k, v).with_context(|| format!("in {}", path.display()))?;
        }
    }
    for (k, raw) in overrides {
        set(obj, k, parse_scalar(raw))?;
    }
    serde_json::from_value(value).context("config has invalid value types")
}

fn set(obj: &mut Map<String, Value>, key: &str, v: Value) -> Result<()> {
    match obj.get_mut(key) {
        Some(slot) => {
            *slot = v;
            Ok(())
        }
        None => {
            let mut known: Vec<&str> = obj.keys().map(String::as_str).collect();
            known.sort_unstable();
            bail!("unknown config key '{key}' (known keys: {})", known.join(", "))
        }
    }
}

/// JSON literal when it parses as one (numbers, booleans, null), else a string.
fn parse_scalar(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Sets the config's `seed` key.
pub fn with_seed<T: Serialize + DeserializeOwned>(config: T, seed: Option<u64>) -> Result<T> {
    match seed {
        None => Ok(config),
        Some(s) => resolve(&config, None, &vec![("seed".into(), s.to_string())]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Serialize, Deserialize, PartialEq)]
    struct C {
        a: usize,
        b: Option<String>,
        seed: u64,
    }

    #[test]
    fn file_then_flags() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.json");
        fs::write(&f, r#"{"a": 3, "b": "x"}"#).unwrap();
        let c = resolve(&C { a: 1, b: None, seed: 0 }, Some(&f), &vec![("b".into(), "crack".into())]).unwrap();
        assert_eq!(c, C { a: 3, b: Some("crack".into()), seed: 0 });
    }

    #[test]
    fn unknown_key_is_named() {
        let e = resolve(&C { a: 1, b: None, seed: 0 }, None, &vec![("zzz".into(), "1".into())]).unwrap_err();
        assert!(e.to_string().contains("'zzz'"));
    }

    #[test]
    fn seed_flag() {
        let c = with_seed(C { a: 1, b: None, seed: 0 }, Some(9)).unwrap();
        assert_eq!(c.seed, 9);
    }
}
