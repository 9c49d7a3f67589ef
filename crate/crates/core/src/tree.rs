//! Key-value configuration trees.
//!
//! Trees are plain `serde_json::Value`s built with `preserve_order`, so key
//! order survives parsing, merging and serialization. Paths are dotted
//! (`model.hidden`); array elements are treated as opaque leaves.

use std::collections::BTreeMap;
use std::fmt;

use serde::de::{self, DeserializeSeed, MapAccess, SeqAccess, Visitor};
use serde_json::{Map, Value};
use thiserror::Error;

/// Malformed configuration text.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("parse error at line {line}, column {column}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PathError {
    #[error("empty path")]
    Empty,
    #[error("path `{0}` does not exist (prefix with `+` to create it)")]
    Missing(String),
    #[error("path `{path}` crosses non-object value at `{at}`")]
    NotAnObject { path: String, at: String },
}

/// Parses a configuration document.
///
/// Sibling keys must be unique; a duplicate is reported with its position.
pub fn parse_config(text: &str) -> Result<Value, ParseError> {
    let mut de = serde_json::Deserializer::from_str(text);
    let value = StrictValue.deserialize(&mut de).map_err(to_parse_error)?;
    de.end().map_err(to_parse_error)?;
    Ok(value)
}

fn to_parse_error(e: serde_json::Error) -> ParseError {
    let message = e.to_string();
    // serde_json appends " at line L column C"; keep only the description.
    let message = match message.rfind(" at line ") {
        Some(idx) => message[..idx].to_string(),
        None => message,
    };
    ParseError {
        line: e.line(),
        column: e.column(),
        message,
    }
}

struct StrictValue;

impl<'de> DeserializeSeed<'de> for StrictValue {
    type Value = Value;

    fn deserialize<D: de::Deserializer<'de>>(self, deserializer: D) -> Result<Value, D::Error> {
        deserializer.deserialize_any(StrictVisitor)
    }
}

struct StrictVisitor;

impl<'de> Visitor<'de> for StrictVisitor {
    type Value = Value;

    fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str("a configuration value")
    }

    fn visit_bool<E>(self, v: bool) -> Result<Value, E> {
        Ok(Value::Bool(v))
    }

    fn visit_i64<E>(self, v: i64) -> Result<Value, E> {
        Ok(Value::from(v))
    }

    fn visit_u64<E>(self, v: u64) -> Result<Value, E> {
        Ok(Value::from(v))
    }

    fn visit_f64<E: de::Error>(self, v: f64) -> Result<Value, E> {
        serde_json::Number::from_f64(v)
            .map(Value::Number)
            .ok_or_else(|| E::custom("non-finite number"))
    }

    fn visit_str<E>(self, v: &str) -> Result<Value, E> {
        Ok(Value::String(v.to_string()))
    }

    fn visit_string<E>(self, v: String) -> Result<Value, E> {
        Ok(Value::String(v))
    }

    fn visit_unit<E>(self) -> Result<Value, E> {
        Ok(Value::Null)
    }

    fn visit_none<E>(self) -> Result<Value, E> {
        Ok(Value::Null)
    }

    fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> Result<Value, A::Error> {
        let mut out = Vec::new();
        while let Some(v) = seq.next_element_seed(StrictValue)? {
            out.push(v);
        }
        Ok(Value::Array(out))
    }

    fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> Result<Value, A::Error> {
        let mut map = Map::new();
        while let Some(key) = access.next_key::<String>()? {
            if map.contains_key(&key) {
                return Err(de::Error::custom(format!("duplicate key `{key}`")));
            }
            let value = access.next_value_seed(StrictValue)?;
            map.insert(key, value);
        }
        Ok(Value::Object(map))
    }
}

fn split_path(path: &str) -> Result<Vec<&str>, PathError> {
    if path.is_empty() {
        return Err(PathError::Empty);
    }
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(PathError::Empty);
    }
    Ok(parts)
}

pub fn get_path<'a>(tree: &'a Value, path: &str) -> Option<&'a Value> {
    let mut cur = tree;
    for part in split_path(path).ok()? {
        cur = cur.as_object()?.get(part)?;
    }
    Some(cur)
}

/// Writes `value` at `path`.
///
/// Without `create`, the full path must already exist. With `create`,
/// missing intermediate objects are added.
pub fn set_path(tree: &mut Value, path: &str, value: Value, create: bool) -> Result<(), PathError> {
    let parts = split_path(path)?;
    let (last, parents) = parts.split_last().expect("split_path never returns empty");
    let mut cur = tree;
    let mut walked = String::new();
    for part in parents {
        if !walked.is_empty() {
            walked.push('.');
        }
        walked.push_str(part);
        let obj = cur.as_object_mut().ok_or_else(|| PathError::NotAnObject {
            path: path.to_string(),
            at: walked.clone(),
        })?;
        if !obj.contains_key(*part) {
            if !create {
                return Err(PathError::Missing(path.to_string()));
            }
            obj.insert(part.to_string(), Value::Object(Map::new()));
        }
        cur = obj.get_mut(*part).expect("inserted above");
    }
    let obj = cur.as_object_mut().ok_or_else(|| PathError::NotAnObject {
        path: path.to_string(),
        at: if walked.is_empty() { "<root>".into() } else { walked },
    })?;
    if !create && !obj.contains_key(*last) {
        return Err(PathError::Missing(path.to_string()));
    }
    obj.insert(last.to_string(), value);
    Ok(())
}

/// Deep merge: objects merge key-wise, everything else is replaced by `top`.
pub fn merge(base: &mut Value, top: &Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(k) {
                    Some(existing) if existing.is_object() && v.is_object() => merge(existing, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, t) => *b = t.clone(),
    }
}

/// Flattens a tree into `path -> leaf`. Empty objects count as leaves so
/// that adding one is visible to [`diff_leaves`].
pub fn leaves(tree: &Value) -> BTreeMap<String, Value> {
    fn walk(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
        match v {
            Value::Object(m) if !m.is_empty() => {
                for (k, child) in m {
                    let p = if prefix.is_empty() {
                        k.clone()
                    } else {
                        format!("{prefix}.{k}")
                    };
                    walk(&p, child, out);
                }
            }
            other => {
                out.insert(prefix.to_string(), other.clone());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk("", tree, &mut out);
    out
}

/// Leaf paths whose values differ (including leaves present on one side only).
pub fn diff_leaves(a: &Value, b: &Value) -> Vec<String> {
    let la = leaves(a);
    let lb = leaves(b);
    let mut out: Vec<String> = la
        .iter()
        .filter(|(k, v)| lb.get(*k) != Some(*v))
        .map(|(k, _)| k.clone())
        .collect();
    out.extend(lb.keys().filter(|k| !la.contains_key(*k)).cloned());
    out.sort();
    out
}

/// Parses the right-hand side of an override directive: JSON when it parses,
/// otherwise a bare string.
pub fn parse_scalar(text: &str) -> Value {
    serde_json::from_str(text).unwrap_or_else(|_| Value::String(text.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn empty_document_is_empty_tree() {
        assert_eq!(parse_config("{}").unwrap(), json!({}));
    }

    #[test]
    fn preserves_key_order_and_leaves() {
        let t = parse_config(r#"{"model": "mlp", "lr": 1.0e-3}"#).unwrap();
        let keys: Vec<_> = t.as_object().unwrap().keys().cloned().collect();
        assert_eq!(keys, vec!["model", "lr"]);
        assert_eq!(t["lr"].as_f64(), Some(1.0e-3));
        assert_eq!(leaves(&t).len(), 2);
    }

    #[test]
    fn duplicate_key_reports_position() {
        let err = parse_config("{\n  \"a\": 1,\n  \"a\": 2\n}").unwrap_err();
        assert_eq!(err.line, 3);
        assert!(err.message.contains("duplicate key"));
    }

    #[test]
    fn nested_duplicate_rejected() {
        assert!(parse_config(r#"{"m": {"x": 1, "x": 1}}"#).is_err());
    }

    #[test]
    fn malformed_input_has_line_column() {
        let err = parse_config("{\"a\": }").unwrap_err();
        assert_eq!(err.line, 1);
        assert!(err.column > 0);
    }

    #[test]
    fn set_path_requires_existing_leaf_without_create() {
        let mut t = json!({"a": {"b": 1}});
        assert!(set_path(&mut t, "a.b", json!(2), false).is_ok());
        assert_eq!(t["a"]["b"], json!(2));
        assert!(matches!(
            set_path(&mut t, "a.c", json!(3), false),
            Err(PathError::Missing(_))
        ));
        set_path(&mut t, "new.key", json!(7), true).unwrap();
        assert_eq!(t["new"]["key"], json!(7));
    }

    #[test]
    fn merge_is_deep_and_last_writer_wins() {
        let mut base = json!({"a": {"x": 1, "y": 2}, "b": 1});
        merge(&mut base, &json!({"a": {"y": 3}, "b": [1]}));
        assert_eq!(base, json!({"a": {"x": 1, "y": 3}, "b": [1]}));
    }

    #[test]
    fn diff_reports_changed_and_one_sided_leaves() {
        let a = json!({"m": {"w": 1, "k": 2}, "t": 0});
        let b = json!({"m": {"w": 5, "k": 2}, "n": 1, "t": 0});
        assert_eq!(diff_leaves(&a, &b), vec!["m.w".to_string(), "n".to_string()]);
    }

    #[test]
    fn scalar_override_values() {
        assert_eq!(parse_scalar("5e-4"), json!(5e-4));
        assert_eq!(parse_scalar("adamw"), json!("adamw"));
        assert_eq!(parse_scalar("[1,2]"), json!([1, 2]));
    }
}
