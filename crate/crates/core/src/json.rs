//! JSON output helpers: every document is emitted with sorted object keys.

use serde::{Deserialize, Serialize, Serializer};

use crate::error::Result;

/// Compact JSON with lexicographically sorted keys.
pub fn to_sorted_string<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    Ok(serde_json::to_string(&v)?)
}

/// Indented JSON with sorted keys and a trailing newline.
pub fn to_sorted_pretty<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}

pub fn write_sorted(path: impl AsRef<std::path::Path>, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, to_sorted_pretty(value)?)?;
    Ok(())
}

/// Serializes a float, writing non-finite values as the strings `"inf"`,
/// `"-inf"` or `"nan"` since JSON has no literal for them.
pub fn float_or_sentinel<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if v.is_nan() {
        s.serialize_str("nan")
    } else if *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_str("-inf")
    }
}

pub fn deserialize_float_or_sentinel<'de, D>(d: D) -> std::result::Result<f64, D::Error>
where
    D: serde::Deserializer<'de>,
{
    #[derive(serde::Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }
    match Raw::deserialize(d)? {
        Raw::Num(v) => Ok(v),
        Raw::Text(t) => match t.as_str() {
            "inf" => Ok(f64::INFINITY),
            "-inf" => Ok(f64::NEG_INFINITY),
            "nan" => Ok(f64::NAN),
            other => Err(serde::de::Error::custom(format!("unexpected float sentinel `{other}`"))),
        },
    }
}
