use std::collections::BTreeMap;

use rayon::prelude::*;

use super::fakequant::{collect_ranges, component_bits, layer_params, positional_params, Calibration};
use super::forward::{Junction, Layer};
use super::{FloatModel, Mat, ModelConfig, ModelError};
use crate::estimate::BitwidthCombination;
use crate::kb::ComponentId;
use crate::quant::{make_requantizer, quantize, requantize, IntSoftmax, QuantParams, QuantizedTensor, Requantizer};

/// Integer weight and bias of one weighted stage.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    pub weight: QuantizedTensor,
    pub bias: QuantizedTensor,
}

#[derive(Debug, Clone, PartialEq)]
struct Compiled {
    layer_rq: BTreeMap<Layer, Requantizer>,
    /// Weights with their zero point subtracted.
    centered: BTreeMap<Layer, Vec<i64>>,
    add_rq: [(Requantizer, Requantizer); 3],
    scores_rq: Requantizer,
    softmax: IntSoftmax,
    context_rq: Requantizer,
    gap_rq: Requantizer,
}

/// Integer-only model: integer tensors, activation grids and the
/// requantizers derived from them.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub config: ModelConfig,
    pub calibration: Calibration,
    pub layers: BTreeMap<Layer, QuantizedLayer>,
    pub pe: QuantizedTensor,
    compiled: Compiled,
}

fn float_layer(model: &FloatModel, layer: Layer) -> (Mat, Mat) {
    let lin = |l: &super::Linear| (l.weight.clone(), l.bias.clone());
    match layer {
        Layer::LInput => lin(&model.l_input),
        Layer::Wq => lin(&model.wq),
        Layer::Wk => lin(&model.wk),
        Layer::Wv => lin(&model.wv),
        Layer::Wo => lin(&model.wo),
        Layer::Ffn1 => lin(&model.ffn1),
        Layer::Ffn2 => lin(&model.ffn2),
        Layer::BnMha => model.bn_mha.folded(),
        Layer::BnFfn => model.bn_ffn.folded(),
        Layer::LOutput => lin(&model.l_output),
    }
}

/// Calibrates activation grids (from tracked training ranges when the model
/// carries them, otherwise from `calib_x`) and converts every tensor.
pub fn quantize_model(model: &FloatModel, combo: &BitwidthCombination, calib_x: &Mat, batch: usize) -> Result<QuantizedModel, ModelError> {
    model.validate()?;
    let ranges = match &model.qat_ranges {
        Some(r) => r.clone(),
        None => collect_ranges(model, calib_x, batch)?,
    };
    QuantizedModel::build(model, &Calibration::from_ranges(&ranges, combo)?)
}

impl QuantizedModel {
    pub fn build(model: &FloatModel, calib: &Calibration) -> Result<QuantizedModel, ModelError> {
        let mut layers = BTreeMap::new();
        for layer in Layer::ALL {
            let (w, b) = float_layer(model, layer);
            let xp = calib.get(layer.input())?;
            let (wp, bp) = layer_params(layer, &w, xp, &calib.combo)?;
            layers.insert(
                layer,
                QuantizedLayer { weight: quantize(&w.data, &[w.rows, w.cols], &wp)?, bias: quantize(&b.data, &[b.rows, b.cols], &bp)? },
            );
        }
        let pp = positional_params(&model.pe, &calib.combo)?;
        let pe = quantize(&model.pe.data, &[model.pe.rows, model.pe.cols], &pp)?;
        Self::from_parts(model.config, calib.clone(), layers, pe)
    }

    /// Rebuilds the integer pipeline from stored tensors.
    pub fn from_parts(config: ModelConfig, calibration: Calibration, layers: BTreeMap<Layer, QuantizedLayer>, pe: QuantizedTensor) -> Result<Self, ModelError> {
        config.validate()?;
        let (n, m, d, f, o) = (config.seq_len, config.input_dim, config.d_model, config.ffn_dim, config.output_dim);
        let combo = calibration.combo;
        let a = |j: Junction| calibration.get(j).copied();
        let mut layer_rq = BTreeMap::new();
        let mut centered = BTreeMap::new();
        for layer in Layer::ALL {
            let ql = layers.get(&layer).ok_or_else(|| ModelError::Format(format!("missing layer {}", layer.name())))?;
            let (rows, cols) = match layer {
                Layer::LInput => (m, d),
                Layer::Wq | Layer::Wk | Layer::Wv | Layer::Wo => (d, d),
                Layer::Ffn1 => (d, f),
                Layer::Ffn2 => (f, d),
                Layer::BnMha | Layer::BnFfn => (1, d),
                Layer::LOutput => (d, o),
            };
            if ql.weight.shape() != [rows, cols] || ql.bias.shape() != [1, cols] {
                return Err(ModelError::Format(format!("layer {} has shape {:?}", layer.name(), ql.weight.shape())));
            }
            let (wp, bp, xp) = (ql.weight.params(), ql.bias.params(), a(layer.input())?);
            if wp.bitwidth != component_bits(&combo, layer.component()) {
                return Err(ModelError::Format(format!("layer {} weights are {} bits", layer.name(), wp.bitwidth)));
            }
            if (bp.scale - xp.scale * wp.scale).abs() > 1e-12 * bp.scale || bp.zero_point != 0 {
                return Err(ModelError::Format(format!("layer {} bias grid does not match its input and weights", layer.name())));
            }
            layer_rq.insert(layer, make_requantizer(bp.scale, a(layer.output())?.scale)?);
            centered.insert(layer, ql.weight.data().iter().map(|&q| q - wp.zero_point).collect());
        }
        if pe.shape() != [n, d] {
            return Err(ModelError::Format(format!("positional table has shape {:?}", pe.shape())));
        }
        let rq = |s_in: f64, out: Junction| -> Result<Requantizer, ModelError> { Ok(make_requantizer(s_in, a(out)?.scale)?) };
        let add_rq = [
            (rq(a(Junction::LInputOut)?.scale, Junction::AddPeOut)?, rq(pe.params().scale, Junction::AddPeOut)?),
            (rq(a(Junction::AddPeOut)?.scale, Junction::AddMhaOut)?, rq(a(Junction::MhaOut)?.scale, Junction::AddMhaOut)?),
            (rq(a(Junction::BnMhaOut)?.scale, Junction::AddFfnOut)?, rq(a(Junction::FfnOut)?.scale, Junction::AddFfnOut)?),
        ];
        let scores = a(Junction::MhaScores)?;
        let softmax = IntSoftmax::new(scores.scale, component_bits(&combo, ComponentId::Mha))?;
        let compiled = Compiled {
            layer_rq,
            centered,
            add_rq,
            scores_rq: rq(a(Junction::MhaQ)?.scale * a(Junction::MhaK)?.scale / (d as f64).sqrt(), Junction::MhaScores)?,
            softmax,
            context_rq: rq(a(Junction::MhaV)?.scale / softmax.one() as f64, Junction::MhaContext)?,
            gap_rq: rq(a(Junction::BnFfnOut)?.scale / n as f64, Junction::GapOut)?,
        };
        let qm = QuantizedModel { config, calibration, layers, pe, compiled };
        qm.check_accumulators()?;
        Ok(qm)
    }

    pub fn combo(&self) -> &BitwidthCombination {
        &self.calibration.combo
    }

    pub fn input_params(&self) -> &QuantParams {
        &self.calibration.params[&Junction::Input]
    }

    pub fn output_params(&self) -> &QuantParams {
        &self.calibration.params[&Junction::LOutputOut]
    }

    fn act(&self, j: Junction) -> &QuantParams {
        &self.calibration.params[&j]
    }

    /// Worst-case accumulator magnitudes must fit a signed 32-bit register.
    fn check_accumulators(&self) -> Result<(), ModelError> {
        let span = |p: &QuantParams| (p.qmax() - p.qmin()) as i128;
        let c = self.config;
        let mut bounds: Vec<(String, i128)> = Vec::new();
        for (layer, ql) in &self.layers {
            let fan_in = ql.weight.shape()[0] as i128;
            let b = ql.bias.params();
            let bias_max = 1i128 << (b.bitwidth - 1);
            bounds.push((layer.name().to_string(), fan_in * span(self.act(layer.input())) * span(ql.weight.params()) + bias_max));
        }
        bounds.push(("mha.scores".into(), c.d_model as i128 * span(self.act(Junction::MhaQ)) * span(self.act(Junction::MhaK))));
        bounds.push(("mha.context".into(), c.seq_len as i128 * self.compiled.softmax.one() as i128 * span(self.act(Junction::MhaV))));
        bounds.push(("gap".into(), c.seq_len as i128 * span(self.act(Junction::BnFfnOut))));
        for (what, bound) in bounds {
            if bound > i32::MAX as i128 {
                return Err(ModelError::Overflow { what, bound });
            }
        }
        Ok(())
    }

    pub fn quantize_input(&self, x: &Mat) -> Result<QuantizedTensor, ModelError> {
        Ok(quantize(&x.data, &[x.rows, x.cols], self.input_params())?)
    }

    fn linear(&self, layer: Layer, x: &[i64], rows: usize) -> Vec<i64> {
        let ql = &self.layers[&layer];
        let (k, cols) = (ql.weight.shape()[0], ql.weight.shape()[1]);
        let w = &self.compiled.centered[&layer];
        let zx = self.act(layer.input()).zero_point;
        let out_p = self.act(layer.output());
        let rq = &self.compiled.layer_rq[&layer];
        let mut out = Vec::with_capacity(rows * cols);
        let mut acc = vec![0i64; cols];
        for r in 0..rows {
            acc.copy_from_slice(ql.bias.data());
            for (kk, &xv) in x[r * k..(r + 1) * k].iter().enumerate() {
                let xv = xv - zx;
                if xv == 0 {
                    continue;
                }
                for (a, &wv) in acc.iter_mut().zip(&w[kk * cols..(kk + 1) * cols]) {
                    *a += xv * wv;
                }
            }
            out.extend(acc.iter().map(|&a| requantize(a, rq, out_p.zero_point, out_p.bitwidth, out_p.signed)));
        }
        out
    }

    fn scale_features(&self, layer: Layer, x: &[i64]) -> Vec<i64> {
        let ql = &self.layers[&layer];
        let w = &self.compiled.centered[&layer];
        let d = w.len();
        let zx = self.act(layer.input()).zero_point;
        let out_p = self.act(layer.output());
        let rq = &self.compiled.layer_rq[&layer];
        x.iter()
            .enumerate()
            .map(|(i, &xv)| {
                let acc = (xv - zx) * w[i % d] + ql.bias.data()[i % d];
                requantize(acc, rq, out_p.zero_point, out_p.bitwidth, out_p.signed)
            })
            .collect()
    }

    fn add(&self, idx: usize, a: &[i64], za: i64, b: &[i64], zb: i64, out: Junction) -> Vec<i64> {
        let (ra, rb) = &self.compiled.add_rq[idx];
        let p = self.act(out);
        a.iter().zip(b).map(|(&x, &y)| p.clamp(ra.scale(x - za) + rb.scale(y - zb) + p.zero_point)).collect()
    }

    /// One window through the integer pipeline; returns output codes.
    fn forward_window(&self, x: &[i64]) -> Vec<i64> {
        let c = self.config;
        let (n, d) = (c.seq_len, c.d_model);
        let e = self.linear(Layer::LInput, x, n);
        let pe_zp = self.pe.params().zero_point;
        let p = self.add(0, &e, self.act(Junction::LInputOut).zero_point, self.pe.data(), pe_zp, Junction::AddPeOut);
        let q = self.linear(Layer::Wq, &p, n);
        let k = self.linear(Layer::Wk, &p, n);
        let v = self.linear(Layer::Wv, &p, n);

        let (zq, zk, zv) = (self.act(Junction::MhaQ).zero_point, self.act(Junction::MhaK).zero_point, self.act(Junction::MhaV).zero_point);
        let sp = self.act(Junction::MhaScores);
        let mut scores = vec![0i64; n];
        let mut probs = vec![0i64; n * n];
        for i in 0..n {
            for (j, s) in scores.iter_mut().enumerate() {
                let acc: i64 = (0..d).map(|t| (q[i * d + t] - zq) * (k[j * d + t] - zk)).sum();
                *s = requantize(acc, &self.compiled.scores_rq, sp.zero_point, sp.bitwidth, sp.signed);
            }
            self.compiled.softmax.row(&scores, &mut probs[i * n..(i + 1) * n]);
        }
        let cp = self.act(Junction::MhaContext);
        let mut ctx = Vec::with_capacity(n * d);
        for i in 0..n {
            for t in 0..d {
                let acc: i64 = (0..n).map(|j| probs[i * n + j] * (v[j * d + t] - zv)).sum();
                ctx.push(requantize(acc, &self.compiled.context_rq, cp.zero_point, cp.bitwidth, cp.signed));
            }
        }
        let o = self.linear(Layer::Wo, &ctx, n);
        let a = self.add(1, &p, self.act(Junction::AddPeOut).zero_point, &o, self.act(Junction::MhaOut).zero_point, Junction::AddMhaOut);
        let z1 = self.scale_features(Layer::BnMha, &a);
        let h = self.linear(Layer::Ffn1, &z1, n);
        let f = self.linear(Layer::Ffn2, &h, n);
        let g = self.add(2, &z1, self.act(Junction::BnMhaOut).zero_point, &f, self.act(Junction::FfnOut).zero_point, Junction::AddFfnOut);
        let z2 = self.scale_features(Layer::BnFfn, &g);

        let zz = self.act(Junction::BnFfnOut).zero_point;
        let gp = self.act(Junction::GapOut);
        let gap: Vec<i64> = (0..d)
            .map(|t| {
                let acc: i64 = (0..n).map(|i| z2[i * d + t] - zz).sum();
                requantize(acc, &self.compiled.gap_rq, gp.zero_point, gp.bitwidth, gp.signed)
            })
            .collect();
        self.linear(Layer::LOutput, &gap, 1)
    }

    /// Output codes for `batch` stacked windows of quantized input.
    pub fn forward_codes(&self, xq: &QuantizedTensor, batch: usize) -> Result<Vec<i64>, ModelError> {
        let c = self.config;
        if xq.params() != self.input_params() {
            return Err(ModelError::Config("input quantization parameters do not match the model".into()));
        }
        if xq.shape() != [batch * c.seq_len, c.input_dim] {
            return Err(ModelError::Shape { what: "quantized input".into(), expected: (batch * c.seq_len, c.input_dim), found: (xq.shape()[0], xq.shape().get(1).copied().unwrap_or(0)) });
        }
        let w = c.seq_len * c.input_dim;
        let out: Vec<Vec<i64>> = xq.data().par_chunks(w.max(1)).map(|x| self.forward_window(x)).collect();
        Ok(out.concat())
    }
}

/// Integer-only inference; outputs are dequantized at the end.
pub fn forward_integer(qm: &QuantizedModel, xq: &QuantizedTensor, batch: usize) -> Result<Vec<f64>, ModelError> {
    let p = *qm.output_params();
    Ok(qm.forward_codes(xq, batch)?.into_iter().map(|q| p.dequantize_value(q)).collect())
}
