//! `key=value` overrides applied to any serializable configuration.
//!
//! Keys are dotted paths into the configuration's JSON form
//! (`alignment.estimator`, `kernel.ladder_size`). Values are read as JSON when
//! they parse (`0.5`, `[32,16]`, `true`, `{"mode":"fixed","bandwidths":[1]}`)
//! and as plain strings otherwise (`round_robin`).

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};

/// Splits `key=value`.
pub fn parse_pair(s: &str) -> Result<(String, String)> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(Error::Validation(vec![format!(
            "override {s:?} is not of the form key=value"
        )])),
    }
}

/// Every dotted path of `v`, objects included, sorted.
pub fn valid_keys<C: Serialize>(cfg: &C) -> Result<Vec<String>> {
    let mut out = Vec::new();
    collect_keys(&serde_json::to_value(cfg)?, "", &mut out);
    out.sort();
    Ok(out)
}

fn collect_keys(v: &Value, prefix: &str, out: &mut Vec<String>) {
    if let Value::Object(map) = v {
        for (k, child) in map {
            let key = if prefix.is_empty() {
                k.clone()
            } else {
                format!("{prefix}.{k}")
            };
            out.push(key.clone());
            collect_keys(child, &key, out);
        }
    }
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Returns `cfg` with every override applied in order. Unknown keys are
/// rejected with the list of valid keys.
pub fn apply<C: Serialize + DeserializeOwned>(cfg: &C, pairs: &[(String, String)]) -> Result<C> {
    let keys = valid_keys(cfg)?;
    let mut value = serde_json::to_value(cfg)?;
    let mut errs = Vec::new();
    for (key, raw) in pairs {
        if !keys.contains(key) {
            errs.push(format!("unknown key {key:?}; valid keys: {}", keys.join(", ")));
            continue;
        }
        let mut slot = &mut value;
        for part in key.split('.') {
            slot = slot
                .get_mut(part)
                .expect("key listed by valid_keys exists");
        }
        *slot = parse_value(raw);
    }
    if !errs.is_empty() {
        return Err(Error::Validation(errs));
    }
    serde_json::from_value(value).map_err(|e| {
        let names: Vec<&str> = pairs.iter().map(|(k, _)| k.as_str()).collect();
        Error::Validation(vec![format!("override of {} rejected: {e}", names.join(", "))])
    })
}
