use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use super::QuantError;

/// `round(2^15 * 2^(k/256))` for `k` in `0..256`.
pub fn exp2_table() -> &'static [i64; 256] {
    static TABLE: OnceLock<[i64; 256]> = OnceLock::new();
    TABLE.get_or_init(|| std::array::from_fn(|k| (32768.0 * (k as f64 / 256.0).exp2()).round() as i64))
}

/// Integer softmax over rows of quantized scores.
///
/// Exponentials are evaluated as `2^(-x)` with `x` in Q16 split into an
/// integer shift and an 8-bit fractional table index. Probabilities are
/// unsigned `out_bits`-bit integers on the grid `1 / (2^out_bits - 1)` and
/// each row sums to exactly `2^out_bits - 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntSoftmax {
    /// `round(score_scale * log2(e) * 2^16)`
    pub k_q16: i64,
    pub out_bits: u32,
}

impl IntSoftmax {
    pub fn new(score_scale: f64, out_bits: u32) -> Result<Self, QuantError> {
        let k = (score_scale * std::f64::consts::LOG2_E * 65536.0).round();
        if !(score_scale > 0.0 && k.is_finite() && k < (1u64 << 40) as f64) || !(2..=16).contains(&out_bits) {
            return Err(QuantError::InvalidParams(format!("softmax with score scale {score_scale} and {out_bits} bits")));
        }
        Ok(IntSoftmax { k_q16: k as i64, out_bits })
    }

    pub fn one(&self) -> i64 {
        (1 << self.out_bits) - 1
    }

    /// Unnormalized `2^15 * exp(score_scale * d)` for `d <= 0`.
    fn exp_neg(&self, d: i64) -> i64 {
        let u = -d * self.k_q16;
        let mut int = u >> 16;
        let mut frac = ((u & 0xFFFF) + 128) >> 8;
        if frac == 256 {
            int += 1;
            frac = 0;
        }
        let (idx, shift) = if frac == 0 { (0, int) } else { (256 - frac, int + 1) };
        let t = exp2_table()[idx as usize];
        match shift {
            0 => t,
            1..=62 => (t + (1 << (shift - 1))) >> shift,
            _ => 0,
        }
    }

    pub fn row(&self, scores: &[i64], out: &mut [i64]) {
        assert_eq!(scores.len(), out.len());
        let Some(&max) = scores.iter().max() else { return };
        let mut total = 0i64;
        for (o, &q) in out.iter_mut().zip(scores) {
            *o = self.exp_neg(q - max);
            total += *o;
        }
        let one = self.one() as i128;
        let s = total as i128;
        let mut cum = 0i128;
        let mut prev = 0i128;
        for o in out.iter_mut() {
            cum += *o as i128;
            let cur = (2 * cum * one + s) / (2 * s);
            *o = (cur - prev) as i64;
            prev = cur;
        }
    }
}
