//! Diff-stable JSON and CSV rendering.

use serde::{Serialize, Serializer};
use serde_json::value::RawValue;

/// Float serialized with exactly six decimals.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fixed6(pub f64);

impl Serialize for Fixed6 {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if !self.0.is_finite() {
            return Err(serde::ser::Error::custom(format!("non-finite value {}", self.0)));
        }
        let raw = RawValue::from_string(format!("{:.6}", self.0)).map_err(serde::ser::Error::custom)?;
        raw.serialize(s)
    }
}

/// Pretty JSON with a trailing newline. Key order is struct field order.
pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("output types always serialize");
    text.push('\n');
    text
}

pub fn fixed6(v: f64) -> String {
    format!("{v:.6}")
}
