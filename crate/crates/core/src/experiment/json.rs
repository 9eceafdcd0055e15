//! Byte-stable JSON: sorted keys, two-space indentation, fixed float
//! precision.

use serde::Serialize;
use serde_json::Value;

use crate::error::Result;

/// Significant digits used for floats in emitted artifacts.
pub const FLOAT_DIGITS: usize = 9;

/// Float formatting policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    /// Round to this many significant digits.
    Significant(usize),
    /// Shortest representation that parses back to the same `f64`.
    RoundTrip,
}

pub fn format_float(v: f64, precision: Precision) -> String {
    let v = match precision {
        Precision::Significant(d) => format!("{:.*e}", d.saturating_sub(1), v).parse::<f64>().unwrap_or(v),
        Precision::RoundTrip => v,
    };
    // -0.0 and 0.0 print the same
    let v = if v == 0.0 { 0.0 } else { v };
    let mut s = v.to_string();
    if !s.contains('.') {
        s.push_str(".0");
    }
    s
}

fn write_value(out: &mut String, v: &Value, precision: Precision, indent: Option<usize>) {
    let newline = |out: &mut String, level: usize| {
        if let Some(step) = indent {
            out.push('\n');
            out.extend(std::iter::repeat_n(' ', step * level));
        }
    };
    fn go(out: &mut String, v: &Value, precision: Precision, indent: Option<usize>, level: usize, nl: &dyn Fn(&mut String, usize)) {
        match v {
            Value::Null => out.push_str("null"),
            Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
            Value::Number(n) => match (n.as_u64(), n.as_i64(), n.as_f64()) {
                (Some(u), _, _) if !n.is_f64() => out.push_str(&u.to_string()),
                (_, Some(i), _) if !n.is_f64() => out.push_str(&i.to_string()),
                (_, _, Some(f)) => out.push_str(&format_float(f, precision)),
                _ => out.push_str(&n.to_string()),
            },
            Value::String(s) => out.push_str(&serde_json::to_string(s).expect("string serializes")),
            Value::Array(items) => {
                if items.is_empty() {
                    out.push_str("[]");
                    return;
                }
                out.push('[');
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    nl(out, level + 1);
                    go(out, item, precision, indent, level + 1, nl);
                }
                nl(out, level);
                out.push(']');
            }
            Value::Object(map) => {
                if map.is_empty() {
                    out.push_str("{}");
                    return;
                }
                let mut keys: Vec<&String> = map.keys().collect();
                keys.sort();
                out.push('{');
                for (i, k) in keys.into_iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    nl(out, level + 1);
                    out.push_str(&serde_json::to_string(k).expect("string serializes"));
                    out.push(':');
                    if indent.is_some() {
                        out.push(' ');
                    }
                    go(out, &map[k], precision, indent, level + 1, nl);
                }
                nl(out, level);
                out.push('}');
            }
        }
    }
    go(out, v, precision, indent, 0, &newline);
}

/// Indented document with a trailing newline.
pub fn to_pretty<T: Serialize>(value: &T, precision: Precision) -> Result<String> {
    let v = serde_json::to_value(value)?;
    let mut out = String::new();
    write_value(&mut out, &v, precision, Some(2));
    out.push('\n');
    Ok(out)
}

/// Single line without a trailing newline.
pub fn to_line<T: Serialize>(value: &T, precision: Precision) -> Result<String> {
    let v = serde_json::to_value(value)?;
    let mut out = String::new();
    write_value(&mut out, &v, precision, None);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn keys_are_sorted_and_floats_rounded() {
        let v = json!({"b": 0.123456789123, "a": [1, -2, 1.0], "c": {"z": null, "y": "q\""}});
        let line = to_line(&v, Precision::Significant(9)).unwrap();
        assert_eq!(line, r#"{"a":[1,-2,1.0],"b":0.123456789,"c":{"y":"q\"","z":null}}"#);
    }

    #[test]
    fn pretty_layout() {
        let v = json!({"k": [], "m": {}, "x": [0.5]});
        let s = to_pretty(&v, Precision::RoundTrip).unwrap();
        assert_eq!(s, "{\n  \"k\": [],\n  \"m\": {},\n  \"x\": [\n    0.5\n  ]\n}\n");
    }

    #[test]
    fn round_trip_precision_is_lossless() {
        for v in [0.1 + 0.2, 1e-300, 123456.789e200, -2.5, 1.0 / 3.0] {
            let s = format_float(v, Precision::RoundTrip);
            assert_eq!(s.parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn significant_digits() {
        assert_eq!(format_float(2.0 / 3.0, Precision::Significant(9)), "0.666666667");
        assert_eq!(format_float(-0.0, Precision::Significant(9)), "0.0");
        assert_eq!(format_float(12345678912.0, Precision::Significant(9)), "12345678900.0");
    }
}
