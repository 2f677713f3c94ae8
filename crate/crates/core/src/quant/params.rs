use serde::{Deserialize, Serialize};

use super::QuantError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scheme {
    #[serde(rename = "asym")]
    Asymmetric,
    #[serde(rename = "sym")]
    Symmetric,
}

/// `real = scale * (q - zero_point)` over a `bitwidth`-bit integer range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f64,
    pub zero_point: i64,
    pub bitwidth: u32,
    pub signed: bool,
    pub scheme: Scheme,
}

pub fn round_half_away(x: f64) -> f64 {
    x.round()
}

impl QuantParams {
    pub fn new(scale: f64, zero_point: i64, bitwidth: u32, signed: bool, scheme: Scheme) -> Result<Self, QuantError> {
        let p = QuantParams { scale, zero_point, bitwidth, signed, scheme };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), QuantError> {
        let bad = |m: String| Err(QuantError::InvalidParams(m));
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return bad(format!("scale {} must be positive and finite", self.scale));
        }
        if !(2..=32).contains(&self.bitwidth) {
            return bad(format!("bitwidth {} outside 2..=32", self.bitwidth));
        }
        match self.scheme {
            Scheme::Symmetric if self.zero_point != 0 => bad(format!("symmetric zero point {} != 0", self.zero_point)),
            Scheme::Asymmetric if !(self.qmin()..=self.qmax()).contains(&self.zero_point) => {
                bad(format!("zero point {} outside [{}, {}]", self.zero_point, self.qmin(), self.qmax()))
            }
            _ => Ok(()),
        }
    }

    pub fn qmin(&self) -> i64 {
        if self.signed {
            -(1i64 << (self.bitwidth - 1))
        } else {
            0
        }
    }

    pub fn qmax(&self) -> i64 {
        if self.signed {
            (1i64 << (self.bitwidth - 1)) - 1
        } else {
            (1i64 << self.bitwidth) - 1
        }
    }

    pub fn clamp(&self, q: i64) -> i64 {
        q.clamp(self.qmin(), self.qmax())
    }

    pub fn quantize_value(&self, v: f64) -> i64 {
        let r = round_half_away(v / self.scale);
        // saturate in float first so huge inputs cannot wrap
        let r = r.clamp((self.qmin() - self.zero_point) as f64, (self.qmax() - self.zero_point) as f64);
        self.clamp(r as i64 + self.zero_point)
    }

    pub fn dequantize_value(&self, q: i64) -> f64 {
        self.scale * (q - self.zero_point) as f64
    }

    /// quantize followed by dequantize
    pub fn fake(&self, v: f64) -> f64 {
        self.dequantize_value(self.quantize_value(v))
    }

    /// Real interval that quantizes without saturation.
    pub fn real_range(&self) -> (f64, f64) {
        (self.dequantize_value(self.qmin()), self.dequantize_value(self.qmax()))
    }

    /// Straight-through mask: true where `v` lies inside the clamp interval.
    pub fn passes(&self, v: f64) -> bool {
        let (lo, hi) = self.real_range();
        v >= lo && v <= hi
    }
}

/// Asymmetric parameters covering `[min, max]` widened to include zero.
pub fn calibrate_range(min: f64, max: f64, bitwidth: u32, signed: bool) -> Result<QuantParams, QuantError> {
    for v in [min, max] {
        if !v.is_finite() {
            return Err(QuantError::NonFinite(v));
        }
    }
    let probe = QuantParams { scale: 1.0, zero_point: 0, bitwidth, signed, scheme: Scheme::Asymmetric };
    let (qmin, qmax) = (probe.qmin(), probe.qmax());
    let lo = min.min(0.0);
    let hi = max.max(0.0);
    if hi == lo {
        return QuantParams::new(1.0, qmin, bitwidth, signed, Scheme::Asymmetric);
    }
    let scale = (hi - lo) / (qmax - qmin) as f64;
    if !(scale > 0.0 && scale.is_finite()) {
        return QuantParams::new(1.0, qmin, bitwidth, signed, Scheme::Asymmetric);
    }
    let zp = (round_half_away(qmin as f64 - lo / scale) as i64).clamp(qmin, qmax);
    QuantParams::new(scale, zp, bitwidth, signed, Scheme::Asymmetric)
}

pub fn calibrate_asymmetric(values: &[f64], bitwidth: u32, signed: bool) -> Result<QuantParams, QuantError> {
    if values.is_empty() {
        return Err(QuantError::Empty);
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in values {
        if !v.is_finite() {
            return Err(QuantError::NonFinite(v));
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    calibrate_range(lo, hi, bitwidth, signed)
}

/// Symmetric bias parameters for a layer with input `x` and weights `w`.
pub fn derive_bias_params(x: &QuantParams, w: &QuantParams) -> QuantParams {
    QuantParams {
        scale: x.scale * w.scale,
        zero_point: 0,
        bitwidth: x.bitwidth + w.bitwidth + 2,
        signed: true,
        scheme: Scheme::Symmetric,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    data: Vec<i64>,
    shape: Vec<usize>,
    params: QuantParams,
}

impl QuantizedTensor {
    pub fn new(data: Vec<i64>, shape: Vec<usize>, params: QuantParams) -> Result<Self, QuantError> {
        params.validate()?;
        if shape.iter().product::<usize>() != data.len() {
            return Err(QuantError::Shape { shape, len: data.len() });
        }
        let (min, max) = (params.qmin(), params.qmax());
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, q)| !(min..=max).contains(*q)) {
            return Err(QuantError::OutOfRange { index, value, min, max });
        }
        Ok(QuantizedTensor { data, shape, params })
    }

    pub fn data(&self) -> &[i64] {
        &self.data
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn params(&self) -> &QuantParams {
        &self.params
    }
}

pub fn quantize(values: &[f64], shape: &[usize], params: &QuantParams) -> Result<QuantizedTensor, QuantError> {
    QuantizedTensor::new(values.iter().map(|&v| params.quantize_value(v)).collect(), shape.to_vec(), *params)
}

pub fn dequantize(t: &QuantizedTensor) -> Vec<f64> {
    t.data.iter().map(|&q| t.params.dequantize_value(q)).collect()
}
