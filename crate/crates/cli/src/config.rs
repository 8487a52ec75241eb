use std::path::Path;

use serde_json::Value;
use squant::trainer::RunConfig;

use crate::Failure;

/// Parses `key=value`; the value is read as JSON, falling back to a string.
pub fn parse_override(s: &str) -> Result<(String, Value), String> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| format!("expected KEY=VALUE, got `{s}`"))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(format!("bad override key `{key}`"));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

/// Sets a dotted path inside a JSON object, creating intermediate objects.
pub fn apply_override(doc: &mut Value, key: &str, value: Value) -> Result<(), String> {
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| format!("`{}` is not an object", parts[..i].join(".")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split yields at least one part")
}

/// Reads a run config, applying `--set` overrides and the seed flag.
pub fn load_run_config(
    path: &Path,
    overrides: &[(String, Value)],
    seed: Option<u64>,
) -> Result<(RunConfig, Value), Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::config(format!("cannot read {}: {e}", path.display())))?;
    let mut doc: Value = serde_json::from_str(&text)
        .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    for (k, v) in overrides {
        apply_override(&mut doc, k, v.clone()).map_err(Failure::config)?;
    }
    if let Some(s) = seed {
        apply_override(&mut doc, "seed", Value::from(s)).map_err(Failure::config)?;
    }
    let cfg: RunConfig = serde_json::from_value(doc.clone())
        .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    cfg.squant
        .validate()
        .map_err(|e| Failure::config(e.to_string()))?;
    Ok((cfg, doc))
}
