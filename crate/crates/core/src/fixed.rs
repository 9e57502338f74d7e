//! Fixed six-decimal rendering for numeric output, so that artifacts diff
//! cleanly between runs.

use serde::{Serialize, Serializer};
use serde_json::value::RawValue;

pub const DECIMALS: usize = 6;

pub fn format(x: f64) -> String {
    if x.is_finite() {
        let s = format!("{x:.DECIMALS$}");
        // -0.000000 and 0.000000 must not differ between runs
        if s.trim_start_matches('-')
            .chars()
            .all(|c| c == '0' || c == '.')
        {
            return format!("{:.DECIMALS$}", 0.0);
        }
        s
    } else {
        "null".to_string()
    }
}

/// `serialize_with` helper for `f64` fields. JSON only.
pub fn f64<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
    let raw = RawValue::from_string(format(*x)).map_err(serde::ser::Error::custom)?;
    raw.serialize(s)
}

/// `serialize_with` helper for `Option<f64>` fields; `None` becomes `null`.
pub fn opt_f64<S: Serializer>(x: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
    match x {
        Some(v) => f64(v, s),
        None => s.serialize_none(),
    }
}

/// For optional fields that may themselves be `null`; pair with
/// `skip_serializing_if = "Option::is_none"`.
pub fn opt_opt_f64<S: Serializer>(x: &Option<Option<f64>>, s: S) -> Result<S::Ok, S::Error> {
    match x {
        Some(v) => opt_f64(v, s),
        None => s.serialize_none(),
    }
}

/// Compact JSON formatter that renders every float through [`format`].
#[derive(Debug, Default, Clone, Copy)]
pub struct FixedFormatter;

impl serde_json::ser::Formatter for FixedFormatter {
    fn write_f64<W: ?Sized + std::io::Write>(
        &mut self,
        writer: &mut W,
        value: f64,
    ) -> std::io::Result<()> {
        writer.write_all(format(value).as_bytes())
    }

    fn write_f32<W: ?Sized + std::io::Write>(
        &mut self,
        writer: &mut W,
        value: f32,
    ) -> std::io::Result<()> {
        self.write_f64(writer, f64::from(value))
    }
}

/// Serializes `value` as compact JSON with every float at fixed precision.
pub fn to_json<T: Serialize + ?Sized>(value: &T) -> serde_json::Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, FixedFormatter);
    value.serialize(&mut ser)?;
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}
