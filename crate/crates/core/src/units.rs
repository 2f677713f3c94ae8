use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Sub};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// A utilization percentage stored as an exact count of tenths of a percent.
///
/// `Tenths(308)` is 30.8 %. Sums and comparisons are exact, so candidate
/// counts do not depend on float accumulation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Tenths(pub i64);

impl Tenths {
    pub const ZERO: Tenths = Tenths(0);

    pub fn from_percent(v: f64) -> Tenths {
        Tenths(round_half_away(v * 10.0))
    }

    pub fn as_percent(self) -> f64 {
        self.0 as f64 / 10.0
    }

    /// Mean of two values, rounded half away from zero to the nearest tenth.
    pub fn midpoint(a: Tenths, b: Tenths) -> Tenths {
        let s = a.0 + b.0;
        let half = if s >= 0 { (s + 1) / 2 } else { (s - 1) / 2 };
        Tenths(half)
    }
}

fn round_half_away(v: f64) -> i64 {
    v.round() as i64
}

impl fmt::Display for Tenths {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        let a = self.0.unsigned_abs();
        write!(f, "{sign}{}.{}", a / 10, a % 10)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid decimal `{0}`")]
pub struct ParseTenthsError(pub String);

impl FromStr for Tenths {
    type Err = ParseTenthsError;

    /// Parses a plain decimal. More than one fractional digit is rounded half
    /// away from zero to tenths using exact integer arithmetic.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || ParseTenthsError(s.to_string());
        let t = s.trim();
        let (neg, body) = match t.strip_prefix('-') {
            Some(rest) => (true, rest),
            None => (false, t.strip_prefix('+').unwrap_or(t)),
        };
        let (int, frac) = match body.split_once('.') {
            Some((i, f)) => (i, f),
            None => (body, ""),
        };
        if int.is_empty() && frac.is_empty() {
            return Err(err());
        }
        if !int.chars().all(|c| c.is_ascii_digit()) || !frac.chars().all(|c| c.is_ascii_digit()) {
            return Err(err());
        }
        let int_v: i64 = if int.is_empty() { 0 } else { int.parse().map_err(|_| err())? };
        let mut digits = frac.chars().map(|c| c as i64 - '0' as i64);
        let tenth = digits.next().unwrap_or(0);
        let round_up = digits.next().map(|d| d >= 5).unwrap_or(false);
        let mut mag = int_v.checked_mul(10).ok_or_else(err)? + tenth;
        if round_up {
            mag += 1;
        }
        Ok(Tenths(if neg { -mag } else { mag }))
    }
}

impl Serialize for Tenths {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Tenths {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl Add for Tenths {
    type Output = Tenths;
    fn add(self, rhs: Tenths) -> Tenths {
        Tenths(self.0 + rhs.0)
    }
}

impl AddAssign for Tenths {
    fn add_assign(&mut self, rhs: Tenths) {
        self.0 += rhs.0;
    }
}

impl Sub for Tenths {
    type Output = Tenths;
    fn sub(self, rhs: Tenths) -> Tenths {
        Tenths(self.0 - rhs.0)
    }
}

impl Sum for Tenths {
    fn sum<I: Iterator<Item = Tenths>>(iter: I) -> Tenths {
        iter.fold(Tenths::ZERO, Add::add)
    }
}

/// One of the three quantization bitwidths a key component may take.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Bitwidth {
    B4,
    B6,
    B8,
}

impl Bitwidth {
    pub const ALL: [Bitwidth; 3] = [Bitwidth::B4, Bitwidth::B6, Bitwidth::B8];

    pub fn bits(self) -> u8 {
        match self {
            Bitwidth::B4 => 4,
            Bitwidth::B6 => 6,
            Bitwidth::B8 => 8,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_bits(bits: u32) -> Option<Bitwidth> {
        match bits {
            4 => Some(Bitwidth::B4),
            6 => Some(Bitwidth::B6),
            8 => Some(Bitwidth::B8),
            _ => None,
        }
    }
}

impl fmt::Display for Bitwidth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.bits())
    }
}

impl Serialize for Bitwidth {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(self.bits())
    }
}

impl<'de> Deserialize<'de> for Bitwidth {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = u32::deserialize(d)?;
        Bitwidth::from_bits(v).ok_or_else(|| serde::de::Error::custom(format!("bitwidth {v} is not one of 4, 6, 8")))
    }
}
