//! Serde helpers for impression counts.
//!
//! Counts are carried as `f64` so that restated forecasts and partially delivered demand stay
//! exact, but integral values are written as JSON integers.

use serde::{Deserialize, Deserializer, Serializer};

const MAX_EXACT: f64 = 9_007_199_254_740_992.0; // 2^53

pub fn serialize<S: Serializer>(value: &f64, serializer: S) -> Result<S::Ok, S::Error> {
    if value.fract() == 0.0 && value.abs() < MAX_EXACT {
        serializer.serialize_i64(*value as i64)
    } else {
        serializer.serialize_f64(*value)
    }
}

pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> Result<f64, D::Error> {
    f64::deserialize(deserializer)
}
