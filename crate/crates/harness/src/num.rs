//! Lossless float text.
//!
//! Finite values use the shortest round-trip decimal form. `NaN`, `inf` and
//! `-inf` are spelled out; a NaN with a non-canonical bit pattern is written
//! as `nan:0x<bits>`.

use std::fmt;

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{format_err, Result};

pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() && v.to_bits() != f64::NAN.to_bits() {
        format!("nan:0x{:016x}", v.to_bits())
    } else {
        format!("{v:?}")
    }
}

pub fn parse_f64(s: &str) -> Result<f64> {
    if let Some(hex) = s.strip_prefix("nan:0x") {
        return match u64::from_str_radix(hex, 16) {
            Ok(bits) => Ok(f64::from_bits(bits)),
            Err(_) => format_err(format!("bad NaN literal {s:?}")),
        };
    }
    match s {
        "NaN" => Ok(f64::NAN),
        "inf" => Ok(f64::INFINITY),
        "-inf" => Ok(f64::NEG_INFINITY),
        _ => s.parse().or_else(|_| format_err(format!("bad number {s:?}"))),
    }
}

/// A float that serializes as a JSON number when finite and as text otherwise.
#[derive(Clone, Copy, Debug)]
pub struct Num(pub f64);

impl PartialEq for Num {
    fn eq(&self, other: &Self) -> bool {
        self.0.to_bits() == other.0.to_bits()
    }
}

impl Serialize for Num {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.is_finite() {
            s.serialize_f64(self.0)
        } else {
            s.serialize_str(&fmt_f64(self.0))
        }
    }
}

struct NumVisitor;

impl Visitor<'_> for NumVisitor {
    type Value = Num;

    fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("a number or a non-finite float literal")
    }

    fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<Num, E> {
        Ok(Num(v))
    }

    fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<Num, E> {
        Ok(Num(v as f64))
    }

    fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<Num, E> {
        Ok(Num(v as f64))
    }

    fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<Num, E> {
        parse_f64(v).map(Num).map_err(|e| E::custom(e.to_string()))
    }
}

impl<'de> Deserialize<'de> for Num {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Num, D::Error> {
        d.deserialize_any(NumVisitor)
    }
}

pub fn nums(v: &[f64]) -> Vec<Num> {
    v.iter().map(|&x| Num(x)).collect()
}

pub fn floats(v: &[Num]) -> Vec<f64> {
    v.iter().map(|n| n.0).collect()
}
