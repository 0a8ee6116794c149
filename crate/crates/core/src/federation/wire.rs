//! Canonical line-delimited JSON.
//!
//! Keys are written in sorted order with no insignificant whitespace except
//! padding: every float takes 17 significant digits with a three-digit
//! exponent and a sign slot, and every integer is left-padded to 20
//! characters. A message's byte size therefore depends only on its shape.

use std::fmt::Write as _;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use super::{ProtocolError, PROTOCOL_VERSION};
use crate::error::{Error, Result};

const INT_WIDTH: usize = 20;

/// Fixed-width decimal: `±d.dddddddddddddddde±XXX`, 24 bytes, with a space
/// in place of a plus sign.
pub fn format_float(x: f64) -> String {
    let s = format!("{x:.16e}");
    let (mantissa, exp) = s.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    let sign = if mantissa.starts_with('-') { "" } else { " " };
    format!("{sign}{mantissa}e{exp:+04}")
}

fn write_value(out: &mut String, v: &Value) -> Result<()> {
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if let Some(u) = n.as_u64() {
                let _ = write!(out, "{u:>INT_WIDTH$}");
            } else if let Some(i) = n.as_i64() {
                let _ = write!(out, "{i:>INT_WIDTH$}");
            } else {
                let x = n.as_f64().ok_or(Error::NonFinite("message number"))?;
                out.push_str(&format_float(x));
            }
        }
        Value::String(s) => out.push_str(&serde_json::to_string(s).expect("string encodes")),
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_value(out, item)?;
            }
            out.push(']');
        }
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(k).expect("string encodes"));
                out.push(':');
                write_value(out, &map[k])?;
            }
            out.push('}');
        }
    }
    Ok(())
}

/// One canonical line, newline excluded. Non-finite numbers are rejected.
pub fn to_canonical<T: Serialize>(msg: &T) -> Result<String> {
    let v = serde_json::to_value(msg).map_err(|e| ProtocolError::Invalid(e.to_string()))?;
    if has_null_number(&v) {
        return Err(Error::NonFinite("message"));
    }
    let mut out = String::new();
    write_value(&mut out, &v)?;
    Ok(out)
}

// serde_json maps NaN and infinities to null; no message field is nullable.
fn has_null_number(v: &Value) -> bool {
    match v {
        Value::Null => true,
        Value::Array(a) => a.iter().any(has_null_number),
        Value::Object(m) => m.values().any(has_null_number),
        _ => false,
    }
}

/// Byte size of the canonical line including its newline.
pub fn wire_size<T: Serialize>(msg: &T) -> Result<usize> {
    Ok(to_canonical(msg)?.len() + 1)
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let start: usize = text.split_inclusive('\n').take(line - 1).map(str::len).sum();
    (start + column.saturating_sub(1)).min(text.len())
}

fn parse_error(text: &str, e: &serde_json::Error) -> ProtocolError {
    ProtocolError::Parse {
        offset: byte_offset(text, e.line(), e.column()),
        message: e.to_string(),
    }
}

/// Parses one message: syntax, then protocol version, then schema.
pub fn from_canonical<T: DeserializeOwned>(text: &str) -> std::result::Result<T, ProtocolError> {
    let text = text.trim_end_matches(['\n', '\r']);
    let v: Value = serde_json::from_str(text).map_err(|e| parse_error(text, &e))?;
    match v.get("protocol_version") {
        Some(Value::String(s)) if s == PROTOCOL_VERSION => {}
        Some(Value::String(s)) => return Err(ProtocolError::Version { found: s.clone() }),
        _ => return Err(ProtocolError::Invalid("missing protocol_version".into())),
    }
    serde_json::from_str(text).map_err(|e| parse_error(text, &e))
}

pub fn write_ndjson<T: Serialize>(path: &Path, msg: &T) -> Result<usize> {
    let mut line = to_canonical(msg)?;
    line.push('\n');
    std::fs::write(path, &line)?;
    Ok(line.len())
}

pub fn read_ndjson<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let first = lines
        .next()
        .ok_or_else(|| ProtocolError::Invalid(format!("{} holds no message", path.display())))?;
    if lines.next().is_some() {
        return Err(ProtocolError::Invalid(format!("{} holds more than one message", path.display())).into());
    }
    Ok(from_canonical(first)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_are_fixed_width() {
        for x in [0.0, -0.0, 1.0, -1.0, 1e-300, -2.5e300, 123.456, f64::MIN_POSITIVE, 1.0 / 3.0] {
            let s = format_float(x);
            assert_eq!(s.len(), 24, "{s}");
            let back: f64 = s.trim().parse().unwrap();
            assert_eq!(back.to_bits(), x.to_bits(), "{s}");
        }
        assert_eq!(format_float(1.5), " 1.5000000000000000e+000");
        assert_eq!(format_float(-0.03125), "-3.1250000000000000e-002");
    }

    #[test]
    fn offsets_count_bytes() {
        assert_eq!(byte_offset("ab\ncd", 2, 2), 4);
        assert_eq!(byte_offset("abc", 1, 1), 0);
        match from_canonical::<Value>("{\"a\": [1, }") {
            Err(ProtocolError::Parse { offset, .. }) => assert_eq!(offset, 10),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn canonical_sorts_keys_and_pads_ints() {
        let v = serde_json::json!({"b": 1u64, "a": [0.5, "x"]});
        let s = to_canonical(&v).unwrap();
        assert_eq!(s, "{\"a\":[ 5.0000000000000000e-001,\"x\"],\"b\":                   1}");
        let back: Value = serde_json::from_str(&s).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn rejects_non_finite() {
        assert!(to_canonical(&vec![f64::NAN]).is_err());
    }
}
