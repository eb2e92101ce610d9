//! Run configuration files.
//!
//! A file holds either one experiment object or
//! `{"schema_version": 1, "experiments": [...]}`. A list entry is a full
//! experiment or `{"extends": "<registry name>", "override": {...}}`, where
//! `override` is merged into the registry entry key by key (objects merge
//! recursively, everything else replaces).

use std::path::Path;

use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use sdefit::experiments::{registry, ExperimentSpec, ScanSpec, TrainSpec};

use crate::CliError;

pub const SCHEMA_VERSION: u64 = 1;

pub fn load_config(path: &Path) -> Result<Vec<ExperimentSpec>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
    parse_config(value)
}

pub fn parse_config(value: Value) -> Result<Vec<ExperimentSpec>, CliError> {
    let Value::Object(mut top) = value else {
        return Err(CliError::Invalid("config must be a JSON object".into()));
    };
    if !top.contains_key("experiments") {
        return Ok(vec![experiment(Value::Object(top), "")?]);
    }
    match top.remove("schema_version") {
        Some(Value::Number(n)) if n.as_u64() == Some(SCHEMA_VERSION) => {}
        Some(v) => {
            return Err(CliError::Invalid(format!(
                "schema_version: expected {SCHEMA_VERSION}, got {v}"
            )))
        }
        None => return Err(CliError::Invalid("schema_version: missing".into())),
    }
    let Some(Value::Array(items)) = top.remove("experiments") else {
        return Err(CliError::Invalid("experiments: expected an array".into()));
    };
    if let Some(k) = top.keys().next() {
        return Err(CliError::Invalid(format!("unknown top-level key `{k}`")));
    }
    items
        .into_iter()
        .enumerate()
        .map(|(i, item)| {
            let prefix = format!("experiments[{i}]");
            experiment(resolve_extends(item, &prefix)?, &prefix)
        })
        .collect()
}

fn join(prefix: &str, path: &str) -> String {
    match (prefix.is_empty(), path.is_empty() || path == ".") {
        (true, _) => path.to_string(),
        (false, true) => prefix.to_string(),
        (false, false) => format!("{prefix}.{path}"),
    }
}

fn experiment(value: Value, prefix: &str) -> Result<ExperimentSpec, CliError> {
    let spec: ExperimentSpec = serde_path_to_error::deserialize(value.clone()).map_err(|e| {
        let (path, msg) = task_error(&value)
            .unwrap_or_else(|| (e.path().to_string(), e.into_inner().to_string()));
        CliError::Invalid(format!("invalid config `{}`: {msg}", join(prefix, &path)))
    })?;
    spec.validate().map_err(|e| match e {
        sdefit::Error::InvalidConfig { path, message } => CliError::Invalid(format!(
            "invalid config `{}`: {message}",
            join(prefix, &path)
        )),
        other => CliError::Invalid(format!("{prefix}: {other}")),
    })?;
    Ok(spec)
}

/// Tagged enums hide the inner path; retry the task body as its variant type.
fn task_error(value: &Value) -> Option<(String, String)> {
    let mut task = value.get("task")?.as_object()?.clone();
    let kind = task.remove("kind")?;
    let body = Value::Object(task);
    let err = match kind.as_str()? {
        "train" => serde_path_to_error::deserialize::<_, TrainSpec>(body).err()?,
        "hellinger_scan" => serde_path_to_error::deserialize::<_, ScanSpec>(body).err()?,
        _ => return None,
    };
    Some((format!("task.{}", err.path()), err.into_inner().to_string()))
}

fn resolve_extends(item: Value, prefix: &str) -> Result<Value, CliError> {
    let Value::Object(mut obj) = item else {
        return Err(CliError::Invalid(format!("{prefix}: expected an object")));
    };
    let Some(base) = obj.remove("extends") else {
        return Ok(Value::Object(obj));
    };
    let Value::String(name) = base else {
        return Err(CliError::Invalid(format!(
            "{prefix}.extends: expected a registry name"
        )));
    };
    let patch = obj.remove("override").unwrap_or(Value::Object(Map::new()));
    if let Some(k) = obj.keys().next() {
        return Err(CliError::Invalid(format!(
            "{prefix}: unknown key `{k}` next to `extends`"
        )));
    }
    let spec = registry(&name).map_err(|e| CliError::Invalid(format!("{prefix}.extends: {e}")))?;
    let mut value = serde_json::to_value(spec).map_err(|e| CliError::Invalid(e.to_string()))?;
    merge(&mut value, patch);
    Ok(value)
}

/// Recursive object merge; non-objects in `patch` replace.
pub fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
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

/// JSON with object keys sorted at every level.
pub fn canonical_json(v: &Value) -> String {
    match v {
        Value::Object(m) => {
            let mut keys: Vec<&String> = m.keys().collect();
            keys.sort();
            let parts: Vec<String> = keys
                .into_iter()
                .map(|k| format!("{}:{}", Value::String(k.clone()), canonical_json(&m[k])))
                .collect();
            format!("{{{}}}", parts.join(","))
        }
        Value::Array(a) => format!(
            "[{}]",
            a.iter().map(canonical_json).collect::<Vec<_>>().join(",")
        ),
        other => other.to_string(),
    }
}

/// SHA-256 of the canonical form of `specs`.
pub fn config_hash(specs: &[ExperimentSpec]) -> String {
    let v = serde_json::to_value(specs).expect("specs serialize");
    hex::encode(Sha256::digest(canonical_json(&v).as_bytes()))
}
