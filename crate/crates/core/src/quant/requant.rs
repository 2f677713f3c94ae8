use serde::{Deserialize, Serialize};

use super::QuantError;

const MAX_SHIFT: u32 = 126;

/// Fixed-point rescale `multiplier * 2^-shift` with a 31-bit normalized
/// multiplier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Requantizer {
    pub multiplier: i64,
    pub shift: u32,
}

impl Requantizer {
    pub fn ratio(&self) -> f64 {
        self.multiplier as f64 * (-(self.shift as f64)).exp2()
    }

    /// `round(acc * multiplier * 2^-shift)` without offset or saturation.
    pub fn scale(&self, acc: i64) -> i64 {
        let prod = acc as i128 * self.multiplier as i128;
        if self.shift == 0 {
            return prod as i64;
        }
        let half = 1i128 << (self.shift - 1);
        let r = if prod >= 0 { (prod + half) >> self.shift } else { -((-prod + half) >> self.shift) };
        r as i64
    }
}

pub fn make_requantizer(s_in: f64, s_out: f64) -> Result<Requantizer, QuantError> {
    let ratio = s_in / s_out;
    if !(s_in > 0.0 && s_out > 0.0 && ratio.is_finite() && ratio > 0.0) {
        return Err(QuantError::RatioOutOfRange { ratio });
    }
    // ratio = f * 2^e with f in [0.5, 1)
    let mut e = ratio.log2().floor() as i32 + 1;
    let mut f = ratio / (e as f64).exp2();
    while f >= 1.0 {
        f /= 2.0;
        e += 1;
    }
    while f < 0.5 {
        f *= 2.0;
        e -= 1;
    }
    let mut m = (f * (1u64 << 31) as f64).round() as i64;
    let mut shift = 31 - e;
    if m == 1 << 31 {
        m = 1 << 30;
        shift -= 1;
    }
    if shift < 0 || shift > MAX_SHIFT as i32 {
        return Err(QuantError::RatioOutOfRange { ratio });
    }
    Ok(Requantizer { multiplier: m, shift: shift as u32 })
}

/// Rescales an accumulator onto an output grid and saturates to its range.
pub fn requantize(acc: i64, r: &Requantizer, out_zero_point: i64, out_bitwidth: u32, signed: bool) -> i64 {
    let (lo, hi) = if signed {
        (-(1i64 << (out_bitwidth - 1)), (1i64 << (out_bitwidth - 1)) - 1)
    } else {
        (0, (1i64 << out_bitwidth) - 1)
    };
    r.scale(acc).saturating_add(out_zero_point).clamp(lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn unit_ratio() {
        let r = make_requantizer(0.37, 0.37).unwrap();
        assert_eq!((r.multiplier, r.shift), (1 << 30, 30));
        for k in [-200, -1, 0, 1, 77] {
            assert_eq!(r.scale(k), k);
        }
        assert_eq!(requantize(0, &r, 5, 8, false), 5);
        assert_eq!(requantize(1000, &r, 0, 8, true), 127);
    }

    #[test]
    fn half_away_rounding() {
        let r = make_requantizer(1.0, 2.0).unwrap();
        assert_eq!(r.scale(1), 1);
        assert_eq!(r.scale(-1), -1);
        assert_eq!(r.scale(3), 2);
        assert_eq!(r.scale(-3), -2);
    }

    #[test]
    fn range_errors() {
        assert!(make_requantizer(1.0, 1e-12).is_err());
        assert!(make_requantizer(2f64.powi(31), 1.0).is_err());
        assert!(make_requantizer(2f64.powi(31) * 0.99, 1.0).is_ok());
        assert!(make_requantizer(1.0, 0.0).is_err());
        assert!(make_requantizer(1e-40, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn normalized_and_accurate(a in -6.0f64..6.0, b in -6.0f64..6.0) {
            let (s_in, s_out) = (10f64.powf(a), 10f64.powf(b));
            let ratio = s_in / s_out;
            match make_requantizer(s_in, s_out) {
                Ok(r) => {
                    prop_assert!((1i64 << 30..1i64 << 31).contains(&r.multiplier));
                    prop_assert!(((r.ratio() - ratio) / ratio).abs() < 2f64.powi(-29));
                }
                Err(_) => prop_assert!(ratio >= 2f64.powi(31) * (1.0 - 2f64.powi(-31)) || ratio < 2f64.powi(-95)),
            }
        }

        #[test]
        fn matches_float_oracle(a in -3.0f64..3.0, b in -3.0f64..3.0, acc in -(1i64 << 24)..(1i64 << 24), zp in -128i64..128) {
            let (s_in, s_out) = (10f64.powf(a), 10f64.powf(b));
            let r = make_requantizer(s_in, s_out).unwrap();
            let want = ((acc as f64 * s_in / s_out).round() as i64 + zp).clamp(-(1 << 15), (1 << 15) - 1);
            prop_assert!((requantize(acc, &r, zp, 16, true) - want).abs() <= 1);
        }
    }
}
