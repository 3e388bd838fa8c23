//! Lossless float encoding: every `f64` is written as the 16-digit hex of its
//! IEEE-754 bit pattern.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub fn encode(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

pub fn decode(s: &str) -> Option<f64> {
    if s.len() != 16 {
        return None;
    }
    u64::from_str_radix(s, 16).ok().map(f64::from_bits)
}

pub fn encode_all(values: &[f64]) -> Vec<String> {
    values.iter().copied().map(encode).collect()
}

pub fn decode_all(values: &[String]) -> Result<Vec<f64>, String> {
    values
        .iter()
        .enumerate()
        .map(|(i, s)| decode(s).ok_or_else(|| format!("bad hex64 payload at index {i}: {s:?}")))
        .collect()
}

/// `#[serde(with = "hex64::vec")]` for `Vec<f64>` fields.
pub mod vec {
    use super::*;

    pub fn serialize<S: Serializer>(values: &[f64], s: S) -> Result<S::Ok, S::Error> {
        encode_all(values).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let raw = Vec::<String>::deserialize(d)?;
        decode_all(&raw).map_err(serde::de::Error::custom)
    }
}

/// A float array carried both as readable decimals and as authoritative hex.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DualArray {
    pub decimal: Vec<f64>,
    pub hex: Vec<String>,
}

impl DualArray {
    pub fn new(values: &[f64]) -> Self {
        Self {
            decimal: values.to_vec(),
            hex: encode_all(values),
        }
    }

    pub fn values(&self) -> Result<Vec<f64>, String> {
        decode_all(&self.hex)
    }

    /// True when the decimal rendering agrees bit-for-bit with the hex payload.
    pub fn consistent(&self) -> bool {
        match self.values() {
            Ok(v) => {
                v.len() == self.decimal.len()
                    && v.iter().zip(&self.decimal).all(|(a, b)| a.to_bits() == b.to_bits())
            }
            Err(_) => false,
        }
    }
}
