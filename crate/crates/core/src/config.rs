//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Values are typed by
//! shape (bool, integer, float, otherwise string) and then deserialized into
//! any struct with `#[serde(default)]`, so one file can feed several structs.

use std::collections::BTreeSet;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{Error, Result};

pub type KeyValues = Map<String, Value>;

pub fn parse_key_values(text: &str) -> Result<KeyValues> {
    let mut map = Map::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("line {}: expected key = value", i + 1)))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::Parse(format!("line {}: empty key", i + 1)));
        }
        if map.insert(key.to_string(), typed(value.trim())).is_some() {
            return Err(Error::Parse(format!("line {}: duplicate key {key:?}", i + 1)));
        }
    }
    Ok(map)
}

fn typed(v: &str) -> Value {
    if let Ok(b) = v.parse::<bool>() {
        return Value::Bool(b);
    }
    if let Ok(u) = v.parse::<u64>() {
        return Value::from(u);
    }
    if let Ok(i) = v.parse::<i64>() {
        return Value::from(i);
    }
    if let Ok(f) = v.parse::<f64>() {
        if let Some(n) = serde_json::Number::from_f64(f) {
            return Value::Number(n);
        }
    }
    Value::String(v.to_string())
}

/// Top-level field names of `T`, read off its default value.
pub fn field_names<T: Serialize + Default>() -> BTreeSet<String> {
    match serde_json::to_value(T::default()) {
        Ok(Value::Object(m)) => m.keys().cloned().collect(),
        _ => BTreeSet::new(),
    }
}

/// Builds `T` from the keys it knows; other keys are left for other structs.
pub fn extract<T>(kv: &KeyValues) -> Result<T>
where
    T: Serialize + DeserializeOwned + Default,
{
    let known = field_names::<T>();
    let subset: Map<String, Value> = kv
        .iter()
        .filter(|(k, _)| known.contains(*k))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    serde_json::from_value(Value::Object(subset)).map_err(|e| Error::Config(e.to_string()))
}

/// Errors on keys that none of `known` recognises.
pub fn reject_unknown(kv: &KeyValues, known: &[BTreeSet<String>]) -> Result<()> {
    for key in kv.keys() {
        if !known.iter().any(|set| set.contains(key)) {
            return Err(Error::Config(format!("unknown key {key:?}")));
        }
    }
    Ok(())
}

/// Renders `value`'s top-level fields as a key-value file.
pub fn to_key_values<T: Serialize>(value: &T) -> Result<String> {
    let Value::Object(m) = serde_json::to_value(value)? else {
        return Err(Error::Config("only structs render as key-value files".into()));
    };
    let mut out = String::new();
    for (k, v) in m {
        let rendered = match v {
            Value::String(s) => s,
            other => other.to_string(),
        };
        out.push_str(&format!("{k} = {rendered}\n"));
    }
    Ok(out)
}
