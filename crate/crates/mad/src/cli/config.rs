//! Layered configuration: defaults < JSON file < `MAD_<SECTION>_<KEY>`
//! environment variables < `--set section.key=value` flags.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::error::{MadError, Result};

/// Deep-merge `overlay` into `base`: objects merge key-wise, everything else
/// is replaced.
pub fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
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

fn parse_scalar(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Resolve the configuration tree for one command.
///
/// `env` is an iterator of (name, value) pairs; names of the form
/// `MAD_<SECTION>_<KEY>` override `section.key` (section has no underscores,
/// the remainder is the lowercased key). `sets` holds `section.key=value`
/// strings from repeated `--set` flags; values parse as JSON, falling back to
/// strings.
pub fn load_layered(
    file: Option<&Path>,
    env: impl Iterator<Item = (String, String)>,
    sets: &[String],
) -> Result<Value> {
    let mut cfg = Value::Object(Default::default());
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)?;
        let parsed: Value = serde_json::from_str(&text)
            .map_err(|e| MadError::Config(format!("{}: line {} column {}: {e}", path.display(), e.line(), e.column())))?;
        if !parsed.is_object() {
            return Err(MadError::Config(format!("{}: config root must be a JSON object", path.display())));
        }
        merge(&mut cfg, parsed);
    }
    let mut env_sorted: BTreeMap<String, String> = env.collect();
    for (name, value) in std::mem::take(&mut env_sorted) {
        let Some(rest) = name.strip_prefix("MAD_") else { continue };
        let Some((section, key)) = rest.split_once('_') else { continue };
        if section.is_empty() || key.is_empty() {
            continue;
        }
        let overlay = serde_json::json!({ section.to_lowercase(): { key.to_lowercase(): parse_scalar(&value) } });
        merge(&mut cfg, overlay);
    }
    for set in sets {
        let (path, raw) = set
            .split_once('=')
            .ok_or_else(|| MadError::Config(format!("--set expects section.key=value, got \"{set}\"")))?;
        let (section, key) = path
            .split_once('.')
            .ok_or_else(|| MadError::Config(format!("--set expects section.key=value, got \"{set}\"")))?;
        let overlay = serde_json::json!({ section: { key: parse_scalar(raw) } });
        merge(&mut cfg, overlay);
    }
    Ok(cfg)
}

/// Deserialize one section over the type's defaults. Unknown or ill-typed
/// fields surface as configuration errors naming the section.
pub fn section<T>(cfg: &Value, name: &str) -> Result<T>
where
    T: Serialize + DeserializeOwned + Default,
{
    let mut base = serde_json::to_value(T::default())?;
    if let Some(overlay) = cfg.get(name) {
        if !overlay.is_object() {
            return Err(MadError::Config(format!("config section \"{name}\" must be an object")));
        }
        merge(&mut base, overlay.clone());
    }
    serde_json::from_value(base).map_err(|e| MadError::Config(format!("config section \"{name}\": {e}")))
}

/// Process environment filtered to `MAD_*` variables.
pub fn mad_env() -> impl Iterator<Item = (String, String)> {
    std::env::vars().filter(|(k, _)| k.starts_with("MAD_"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    #[serde(default)]
    struct Demo {
        epochs: usize,
        learning_rate: f64,
        label: String,
    }

    impl Default for Demo {
        fn default() -> Self {
            Self { epochs: 10, learning_rate: 0.05, label: "base".into() }
        }
    }

    #[test]
    fn precedence_is_flags_over_env_over_file_over_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"train": {"epochs": 3, "learning_rate": 0.2, "label": "file"}}"#).unwrap();
        let env = vec![
            ("MAD_TRAIN_LEARNING_RATE".to_string(), "0.7".to_string()),
            ("MAD_TRAIN_LABEL".to_string(), "env".to_string()),
            ("OTHER_TRAIN_EPOCHS".to_string(), "99".to_string()),
        ];
        let sets = vec!["train.label=flag".to_string()];
        let cfg = load_layered(Some(&path), env.into_iter(), &sets).unwrap();
        let demo: Demo = section(&cfg, "train").unwrap();
        assert_eq!(demo, Demo { epochs: 3, learning_rate: 0.7, label: "flag".into() });
    }

    #[test]
    fn defaults_fill_missing_sections_and_keys() {
        let cfg = load_layered(None, std::iter::empty(), &[]).unwrap();
        let demo: Demo = section(&cfg, "train").unwrap();
        assert_eq!(demo, Demo::default());
        let cfg = load_layered(None, std::iter::empty(), &["train.epochs=5".to_string()]).unwrap();
        let demo: Demo = section(&cfg, "train").unwrap();
        assert_eq!(demo.epochs, 5);
        assert_eq!(demo.label, "base");
    }

    #[test]
    fn malformed_inputs_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, "{ not json").unwrap();
        match load_layered(Some(&path), std::iter::empty(), &[]) {
            Err(MadError::Config(msg)) => assert!(msg.contains("line"), "diagnostic should name the line: {msg}"),
            other => panic!("expected Config error, got {other:?}"),
        }
        assert!(matches!(
            load_layered(None, std::iter::empty(), &["no_equals_sign".to_string()]),
            Err(MadError::Config(_))
        ));
        // Ill-typed value inside a section.
        let cfg = load_layered(None, std::iter::empty(), &["train.epochs=\"many\"".to_string()]).unwrap();
        assert!(matches!(section::<Demo>(&cfg, "train"), Err(MadError::Config(_))));
    }
}
