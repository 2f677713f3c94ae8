//! Affine quantization algebra, integer requantization and the per-component
//! bitwidth cascade.
//!
//! Rounding is half away from zero everywhere, in float and in integer code.

mod cascade;
mod params;
mod requant;
mod softmax;

pub use cascade::{plan_cascade, CascadePlan, ComponentPlan};
pub use params::{
    calibrate_asymmetric, calibrate_range, dequantize, derive_bias_params, quantize, round_half_away, QuantParams,
    QuantizedTensor, Scheme,
};
pub use requant::{make_requantizer, requantize, Requantizer};
pub use softmax::{exp2_table, IntSoftmax};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum QuantError {
    #[error("cannot calibrate from an empty tensor")]
    Empty,
    #[error("non-finite value {0} in calibration data")]
    NonFinite(f64),
    #[error("invalid quantization parameters: {0}")]
    InvalidParams(String),
    #[error("scale ratio {ratio:e} is outside the representable requantizer range")]
    RatioOutOfRange { ratio: f64 },
    #[error("value {value} at index {index} is outside [{min}, {max}]")]
    OutOfRange { index: usize, value: i64, min: i64, max: i64 },
    #[error("shape {shape:?} does not hold {len} elements")]
    Shape { shape: Vec<usize>, len: usize },
}
