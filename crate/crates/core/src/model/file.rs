use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::fakequant::Calibration;
use super::forward::{Junction, Layer};
use super::params::{BUFFERS, TRAINABLE};
use super::{FloatModel, Mat, ModelConfig, ModelError, QuantizedLayer, QuantizedModel, Ranges};
use crate::data::MinMaxScaler;
use crate::estimate::BitwidthCombination;
use crate::quant::{QuantParams, QuantizedTensor};

pub const MODEL_FORMAT_VERSION: u32 = 1;

// one per process, so the size gap does not matter
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone, PartialEq)]
pub enum StoredModel {
    Float(FloatModel),
    Quantized(QuantizedModel),
}

/// A model together with the scaler that normalizes its inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub model: StoredModel,
    pub scaler: Option<MinMaxScaler>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Kind {
    Float,
    Quantized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Dtype {
    F64,
    I32,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    shape: Vec<usize>,
    dtype: Dtype,
    data: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    quant: Option<QuantParams>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Envelope {
    version: u32,
    config: ModelConfig,
    kind: Kind,
    combo: Option<BitwidthCombination>,
    tensors: BTreeMap<String, TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    activations: Option<BTreeMap<Junction, QuantParams>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    qat_ranges: Option<Ranges>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scaler: Option<MinMaxScaler>,
}

fn f64_entry(m: &Mat) -> TensorEntry {
    let bytes: Vec<u8> = m.data.iter().flat_map(|v| v.to_le_bytes()).collect();
    TensorEntry { shape: vec![m.rows, m.cols], dtype: Dtype::F64, data: B64.encode(bytes), quant: None }
}

fn i32_entry(t: &QuantizedTensor) -> TensorEntry {
    let bytes: Vec<u8> = t.data().iter().flat_map(|&v| (v as i32).to_le_bytes()).collect();
    TensorEntry { shape: t.shape().to_vec(), dtype: Dtype::I32, data: B64.encode(bytes), quant: Some(*t.params()) }
}

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Format(msg.into())
}

fn decode(name: &str, e: &TensorEntry, dtype: Dtype) -> Result<Vec<u8>, ModelError> {
    if e.dtype != dtype {
        return Err(bad(format!("tensor `{name}` has dtype {:?}, expected {dtype:?}", e.dtype)));
    }
    let bytes = B64.decode(&e.data).map_err(|err| bad(format!("tensor `{name}`: {err}")))?;
    let width = if dtype == Dtype::F64 { 8 } else { 4 };
    let count: usize = e.shape.iter().product();
    if bytes.len() != count * width {
        return Err(bad(format!("tensor `{name}` holds {} bytes for shape {:?}", bytes.len(), e.shape)));
    }
    Ok(bytes)
}

fn read_mat(tensors: &BTreeMap<String, TensorEntry>, name: &str) -> Result<Mat, ModelError> {
    let e = tensors.get(name).ok_or_else(|| bad(format!("missing tensor `{name}`")))?;
    let bytes = decode(name, e, Dtype::F64)?;
    if e.shape.len() != 2 {
        return Err(bad(format!("tensor `{name}` must be two-dimensional")));
    }
    let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok(Mat::from_vec(e.shape[0], e.shape[1], data))
}

fn read_quant(tensors: &BTreeMap<String, TensorEntry>, name: &str) -> Result<QuantizedTensor, ModelError> {
    let e = tensors.get(name).ok_or_else(|| bad(format!("missing tensor `{name}`")))?;
    let bytes = decode(name, e, Dtype::I32)?;
    let data = bytes.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes")) as i64).collect();
    let params = e.quant.ok_or_else(|| bad(format!("tensor `{name}` lacks quantization parameters")))?;
    Ok(QuantizedTensor::new(data, e.shape.clone(), params)?)
}

pub fn model_to_json(file: &ModelFile) -> String {
    let env = match &file.model {
        StoredModel::Float(m) => Envelope {
            version: MODEL_FORMAT_VERSION,
            config: m.config,
            kind: Kind::Float,
            combo: None,
            tensors: m.named_tensors().into_iter().map(|(n, t)| (n.to_string(), f64_entry(t))).collect(),
            activations: None,
            qat_ranges: m.qat_ranges.clone(),
            scaler: file.scaler.clone(),
        },
        StoredModel::Quantized(q) => {
            let mut tensors = BTreeMap::new();
            for (layer, ql) in &q.layers {
                tensors.insert(format!("{}.weight", layer.name()), i32_entry(&ql.weight));
                tensors.insert(format!("{}.bias", layer.name()), i32_entry(&ql.bias));
            }
            tensors.insert("pe.table".to_string(), i32_entry(&q.pe));
            Envelope {
                version: MODEL_FORMAT_VERSION,
                config: q.config,
                kind: Kind::Quantized,
                combo: Some(q.calibration.combo),
                tensors,
                activations: Some(q.calibration.params.clone()),
                qat_ranges: None,
                scaler: file.scaler.clone(),
            }
        }
    };
    let mut s = serde_json::to_string_pretty(&env).expect("model serializes");
    s.push('\n');
    s
}

pub fn model_from_json(text: &str) -> Result<ModelFile, ModelError> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| bad(format!("line {}: {e}", e.line())))?;
    match value.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == MODEL_FORMAT_VERSION as u64 => {}
        Some(v) => return Err(bad(format!("unsupported version {v}, expected {MODEL_FORMAT_VERSION}"))),
        None => return Err(bad("missing integer field `version`")),
    }
    let env: Envelope = serde_path_to_error::deserialize(value).map_err(|e| bad(format!("{}: {}", e.path(), e.inner())))?;
    env.config.validate()?;
    let model = match env.kind {
        Kind::Float => {
            let mut m = FloatModel::init(env.config, 0)?;
            for (name, slot) in TRAINABLE.iter().zip(m.trainable_mut()) {
                *slot = read_mat(&env.tensors, name)?;
            }
            for (name, slot) in BUFFERS.iter().zip(m.buffers_mut()) {
                *slot = read_mat(&env.tensors, name)?;
            }
            m.qat_ranges = env.qat_ranges;
            m.validate()?;
            StoredModel::Float(m)
        }
        Kind::Quantized => {
            let combo = env.combo.ok_or_else(|| bad("quantized model without `combo`"))?;
            let acts = env.activations.ok_or_else(|| bad("quantized model without `activations`"))?;
            let calibration = Calibration::from_params(acts, &combo)?;
            let mut layers = BTreeMap::new();
            for layer in Layer::ALL {
                let weight = read_quant(&env.tensors, &format!("{}.weight", layer.name()))?;
                let bias = read_quant(&env.tensors, &format!("{}.bias", layer.name()))?;
                layers.insert(layer, QuantizedLayer { weight, bias });
            }
            let pe = read_quant(&env.tensors, "pe.table")?;
            StoredModel::Quantized(QuantizedModel::from_parts(env.config, calibration, layers, pe)?)
        }
    };
    Ok(ModelFile { model, scaler: env.scaler })
}

pub fn save_model(path: &Path, file: &ModelFile) -> Result<(), ModelError> {
    let io = |source| ModelError::Io { path: path.display().to_string(), source };
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, model_to_json(file)).map_err(io)?;
    std::fs::rename(&tmp, path).map_err(io)
}

pub fn load_model(path: &Path) -> Result<ModelFile, ModelError> {
    let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io { path: path.display().to_string(), source })?;
    model_from_json(&text)
}
