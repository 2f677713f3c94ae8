//! Single-layer encoder forecasting model with real-valued, fake-quantized
//! and integer-only forward paths.
//!
//! Dataflow: input projection, positional add, single-head self-attention,
//! residual add and batch norm, feed-forward block, residual add and batch
//! norm, global average pooling over time and an output projection.

mod backward;
mod config;
mod fakequant;
mod file;
mod forward;
mod mat;
mod params;
mod quantized;

pub use backward::{backward, mse_loss};
pub use config::ModelConfig;
pub use fakequant::{collect_ranges, forward_fake_quant, layer_params, Calibration, FakeQuant, Ranges, RangeRecorder};
pub use file::{load_model, model_from_json, model_to_json, save_model, ModelFile, StoredModel, MODEL_FORMAT_VERSION};
pub use forward::{float_softmax_rows, forward, forward_float, predict, Cache, Junction, Layer, Mode, NoQuant, QuantHook};
pub use mat::Mat;
pub use params::{positional_encoding, BatchNorm, FloatModel, Gradients, Linear, BN_EPS, BN_MOMENTUM, BUFFERS, TRAINABLE};
pub use quantized::{forward_integer, quantize_model, QuantizedLayer, QuantizedModel};

use crate::quant::QuantError;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("{what}: expected shape {expected:?}, found {found:?}")]
    Shape { what: String, expected: (usize, usize), found: (usize, usize) },
    #[error("no calibration for junction `{0}`")]
    MissingCalibration(Junction),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error("accumulator for {what} may reach {bound}, beyond 32 bits")]
    Overflow { what: String, bound: i128 },
    #[error("model file: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}
