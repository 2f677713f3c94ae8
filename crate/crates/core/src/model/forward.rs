use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::params::BN_EPS;
use super::{BatchNorm, FloatModel, Mat, ModelError};
use crate::kb::ComponentId;

/// Activation tensors that the quantized pipeline places on an integer grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Junction {
    #[serde(rename = "input")]
    Input,
    #[serde(rename = "l_input.out")]
    LInputOut,
    #[serde(rename = "add_pe.out")]
    AddPeOut,
    #[serde(rename = "mha.q")]
    MhaQ,
    #[serde(rename = "mha.k")]
    MhaK,
    #[serde(rename = "mha.v")]
    MhaV,
    #[serde(rename = "mha.scores")]
    MhaScores,
    #[serde(rename = "mha.context")]
    MhaContext,
    #[serde(rename = "mha.out")]
    MhaOut,
    #[serde(rename = "add_mha.out")]
    AddMhaOut,
    #[serde(rename = "bn_mha.out")]
    BnMhaOut,
    #[serde(rename = "ffn.hidden")]
    FfnHidden,
    #[serde(rename = "ffn.out")]
    FfnOut,
    #[serde(rename = "add_ffn.out")]
    AddFfnOut,
    #[serde(rename = "bn_ffn.out")]
    BnFfnOut,
    #[serde(rename = "gap.out")]
    GapOut,
    #[serde(rename = "l_output.out")]
    LOutputOut,
}

impl Junction {
    pub const ALL: [Junction; 17] = [
        Junction::Input,
        Junction::LInputOut,
        Junction::AddPeOut,
        Junction::MhaQ,
        Junction::MhaK,
        Junction::MhaV,
        Junction::MhaScores,
        Junction::MhaContext,
        Junction::MhaOut,
        Junction::AddMhaOut,
        Junction::BnMhaOut,
        Junction::FfnHidden,
        Junction::FfnOut,
        Junction::AddFfnOut,
        Junction::BnFfnOut,
        Junction::GapOut,
        Junction::LOutputOut,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Junction::Input => "input",
            Junction::LInputOut => "l_input.out",
            Junction::AddPeOut => "add_pe.out",
            Junction::MhaQ => "mha.q",
            Junction::MhaK => "mha.k",
            Junction::MhaV => "mha.v",
            Junction::MhaScores => "mha.scores",
            Junction::MhaContext => "mha.context",
            Junction::MhaOut => "mha.out",
            Junction::AddMhaOut => "add_mha.out",
            Junction::BnMhaOut => "bn_mha.out",
            Junction::FfnHidden => "ffn.hidden",
            Junction::FfnOut => "ffn.out",
            Junction::AddFfnOut => "add_ffn.out",
            Junction::BnFfnOut => "bn_ffn.out",
            Junction::GapOut => "gap.out",
            Junction::LOutputOut => "l_output.out",
        }
    }

    /// Component whose bitwidth the junction carries.
    pub fn component(self) -> ComponentId {
        use Junction::*;
        match self {
            Input | LInputOut => ComponentId::LInput,
            AddPeOut => ComponentId::AddPe,
            MhaQ | MhaK | MhaV | MhaScores | MhaContext | MhaOut => ComponentId::Mha,
            AddMhaOut => ComponentId::AddMha,
            BnMhaOut => ComponentId::BnMha,
            FfnHidden | FfnOut => ComponentId::Ffn,
            AddFfnOut => ComponentId::AddFfn,
            BnFfnOut => ComponentId::BnFfn,
            GapOut => ComponentId::Gap,
            LOutputOut => ComponentId::LOutput,
        }
    }

    /// Post-ReLU activations use an unsigned range.
    pub fn signed(self) -> bool {
        self != Junction::FfnHidden
    }
}

impl std::fmt::Display for Junction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Weighted stages. Batch-norm layers count as per-feature affine stages
/// once folded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Layer {
    LInput,
    Wq,
    Wk,
    Wv,
    Wo,
    Ffn1,
    Ffn2,
    BnMha,
    BnFfn,
    LOutput,
}

impl Layer {
    pub const ALL: [Layer; 10] =
        [Layer::LInput, Layer::Wq, Layer::Wk, Layer::Wv, Layer::Wo, Layer::Ffn1, Layer::Ffn2, Layer::BnMha, Layer::BnFfn, Layer::LOutput];

    pub fn name(self) -> &'static str {
        match self {
            Layer::LInput => "l_input",
            Layer::Wq => "mha.wq",
            Layer::Wk => "mha.wk",
            Layer::Wv => "mha.wv",
            Layer::Wo => "mha.wo",
            Layer::Ffn1 => "ffn.w1",
            Layer::Ffn2 => "ffn.w2",
            Layer::BnMha => "bn_mha",
            Layer::BnFfn => "bn_ffn",
            Layer::LOutput => "l_output",
        }
    }

    pub fn component(self) -> ComponentId {
        self.output().component()
    }

    pub fn input(self) -> Junction {
        match self {
            Layer::LInput => Junction::Input,
            Layer::Wq | Layer::Wk | Layer::Wv => Junction::AddPeOut,
            Layer::Wo => Junction::MhaContext,
            Layer::Ffn1 => Junction::BnMhaOut,
            Layer::Ffn2 => Junction::FfnHidden,
            Layer::BnMha => Junction::AddMhaOut,
            Layer::BnFfn => Junction::AddFfnOut,
            Layer::LOutput => Junction::GapOut,
        }
    }

    pub fn output(self) -> Junction {
        match self {
            Layer::LInput => Junction::LInputOut,
            Layer::Wq => Junction::MhaQ,
            Layer::Wk => Junction::MhaK,
            Layer::Wv => Junction::MhaV,
            Layer::Wo => Junction::MhaOut,
            Layer::Ffn1 => Junction::FfnHidden,
            Layer::Ffn2 => Junction::FfnOut,
            Layer::BnMha => Junction::BnMhaOut,
            Layer::BnFfn => Junction::BnFfnOut,
            Layer::LOutput => Junction::LOutputOut,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Interception points for quantization. Every method defaults to the
/// plain real-valued behaviour.
pub trait QuantHook {
    /// Replace evaluation-mode batch norm with a quantizable per-feature affine.
    fn fold_bn(&self) -> bool {
        false
    }

    /// Effective `(weight, bias)` of a weighted stage.
    fn linear(&mut self, _layer: Layer, _w: &Mat, _b: &Mat) -> Result<Option<(Mat, Mat)>, ModelError> {
        Ok(None)
    }

    fn positional(&mut self, _pe: &Mat) -> Result<Option<Mat>, ModelError> {
        Ok(None)
    }

    /// Rewrites an activation in place; the returned mask marks elements
    /// whose gradient passes through.
    fn act(&mut self, _j: Junction, _x: &mut Mat) -> Result<Option<Vec<bool>>, ModelError> {
        Ok(None)
    }

    /// Residual add producing junction `j`.
    fn add(&mut self, _j: Junction, _a: &Mat, _b: &Mat) -> Result<Option<(Mat, Vec<bool>)>, ModelError> {
        Ok(None)
    }

    /// Attention probabilities for rows of (already hooked) scores.
    fn softmax(&mut self, _scores: &Mat) -> Result<Option<Mat>, ModelError> {
        Ok(None)
    }
}

/// The identity hook.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoQuant;

impl QuantHook for NoQuant {}

#[derive(Debug, Clone)]
pub(crate) struct BnCache {
    pub xhat: Mat,
    pub inv_std: Vec<f64>,
    pub batch_stats: Option<(Vec<f64>, Vec<f64>)>,
}

/// Intermediates kept for backpropagation.
#[derive(Debug, Clone)]
pub struct Cache {
    pub(crate) batch: usize,
    pub(crate) folded: bool,
    pub(crate) x0: Mat,
    pub(crate) p: Mat,
    pub(crate) q: Mat,
    pub(crate) k: Mat,
    pub(crate) v: Mat,
    pub(crate) probs: Mat,
    pub(crate) probs_float: Option<Mat>,
    pub(crate) ctx: Mat,
    pub(crate) bn1: Option<BnCache>,
    pub(crate) z1: Mat,
    pub(crate) h: Mat,
    pub(crate) relu: Vec<bool>,
    pub(crate) bn2: Option<BnCache>,
    pub(crate) gap: Mat,
    pub(crate) weights: EffectiveWeights,
    pub(crate) masks: Vec<Option<Vec<bool>>>,
}

#[derive(Debug, Clone)]
pub(crate) struct EffectiveWeights {
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
    pub ffn1: Mat,
    pub ffn2: Mat,
    pub l_output: Mat,
}

impl Cache {
    /// Batch mean and variance of both batch-norm layers, when computed.
    /// Straight-through masks per junction, indexed like [`Junction::ALL`].
    pub fn masks(&self) -> &[Option<Vec<bool>>] {
        &self.masks
    }

    pub fn batch_stats(&self) -> [Option<&(Vec<f64>, Vec<f64>)>; 2] {
        [self.bn1.as_ref().and_then(|c| c.batch_stats.as_ref()), self.bn2.as_ref().and_then(|c| c.batch_stats.as_ref())]
    }
}

fn affine<H: QuantHook>(hook: &mut H, layer: Layer, w: &Mat, b: &Mat) -> Result<(Mat, Mat), ModelError> {
    Ok(hook.linear(layer, w, b)?.unwrap_or_else(|| (w.clone(), b.clone())))
}

fn apply_linear(x: &Mat, w: &Mat, b: &Mat) -> Mat {
    let mut out = x.matmul(w);
    out.add_row(&b.data);
    out
}

fn add_mats<H: QuantHook>(hook: &mut H, j: Junction, a: &Mat, b: &Mat) -> Result<(Mat, Option<Vec<bool>>), ModelError> {
    Ok(match hook.add(j, a, b)? {
        Some((o, m)) => (o, Some(m)),
        None => {
            let mut o = a.clone();
            o.add_assign(b);
            (o, None)
        }
    })
}

fn batch_norm(x: &Mat, bn: &BatchNorm, mode: Mode) -> (Mat, BnCache) {
    let (rows, d) = x.shape();
    let (mean, var, stats) = match mode {
        Mode::Train => {
            let mean: Vec<f64> = x.col_sums().into_iter().map(|s| s / rows as f64).collect();
            let mut var = vec![0.0; d];
            for r in 0..rows {
                for (c, v) in var.iter_mut().enumerate() {
                    let t = x.at(r, c) - mean[c];
                    *v += t * t;
                }
            }
            var.iter_mut().for_each(|v| *v /= rows as f64);
            (mean.clone(), var.clone(), Some((mean, var)))
        }
        Mode::Eval => (bn.running_mean.data.clone(), bn.running_var.data.clone(), None),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = x.clone();
    let mut y = x.clone();
    for r in 0..rows {
        for c in 0..d {
            let h = (x.at(r, c) - mean[c]) * inv_std[c];
            xhat.set(r, c, h);
            y.set(r, c, bn.gamma.data[c] * h + bn.beta.data[c]);
        }
    }
    (y, BnCache { xhat, inv_std, batch_stats: stats })
}

fn scale_features(x: &Mat, w: &Mat, b: &Mat) -> Mat {
    let mut y = x.clone();
    for row in y.data.chunks_mut(x.cols) {
        for ((v, wv), bv) in row.iter_mut().zip(&w.data).zip(&b.data) {
            *v = *v * wv + bv;
        }
    }
    y
}

pub fn float_softmax_rows(scores: &Mat) -> Mat {
    let mut p = scores.clone();
    for row in p.data.chunks_mut(scores.cols) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    p
}

/// Forward pass over a batch of `batch` windows stacked as
/// `(batch · seq_len) × input_dim` rows. Returns `batch × output_dim`.
pub fn forward<H: QuantHook>(model: &FloatModel, x: &Mat, batch: usize, mode: Mode, hook: &mut H) -> Result<(Mat, Cache), ModelError> {
    let c = model.config;
    let (n, d) = (c.seq_len, c.d_model);
    if x.rows != batch * n || x.cols != c.input_dim {
        return Err(ModelError::Shape { what: "input".into(), expected: (batch * n, c.input_dim), found: x.shape() });
    }
    let folded = hook.fold_bn() && mode == Mode::Eval;
    if hook.fold_bn() && mode == Mode::Train {
        return Err(ModelError::Config("folded batch norm is evaluation-only".into()));
    }
    let mut masks: Vec<Option<Vec<bool>>> = vec![None; Junction::ALL.len()];

    let mut x0 = x.clone();
    masks[Junction::Input.index()] = hook.act(Junction::Input, &mut x0)?;

    let (w, b) = affine(hook, Layer::LInput, &model.l_input.weight, &model.l_input.bias)?;
    let mut e = apply_linear(&x0, &w, &b);
    masks[Junction::LInputOut.index()] = hook.act(Junction::LInputOut, &mut e)?;

    let pe = hook.positional(&model.pe)?.unwrap_or_else(|| model.pe.clone());
    let pe_tiled = Mat::from_vec(batch * n, d, pe.data.repeat(batch));
    let (p, m) = add_mats(hook, Junction::AddPeOut, &e, &pe_tiled)?;
    masks[Junction::AddPeOut.index()] = m;

    let mut proj = |layer: Layer, lin: &super::Linear, masks: &mut Vec<Option<Vec<bool>>>| -> Result<(Mat, Mat), ModelError> {
        let (w, b) = affine(hook, layer, &lin.weight, &lin.bias)?;
        let mut out = apply_linear(&p, &w, &b);
        masks[layer.output().index()] = hook.act(layer.output(), &mut out)?;
        Ok((out, w))
    };
    let (q, wq) = proj(Layer::Wq, &model.wq, &mut masks)?;
    let (k, wk) = proj(Layer::Wk, &model.wk, &mut masks)?;
    let (v, wv) = proj(Layer::Wv, &model.wv, &mut masks)?;

    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let mut scores = Mat::zeros(batch * n, n);
    scores.data.par_chunks_mut(n * n).enumerate().for_each(|(s, block)| {
        for i in 0..n {
            let qi = q.row(s * n + i);
            for j in 0..n {
                let kj = k.row(s * n + j);
                block[i * n + j] = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * inv_sqrt_d;
            }
        }
    });
    masks[Junction::MhaScores.index()] = hook.act(Junction::MhaScores, &mut scores)?;
    let pf = float_softmax_rows(&scores);
    let (probs, probs_float) = match hook.softmax(&scores)? {
        Some(p) => (p, Some(pf)),
        None => (pf, None),
    };

    let mut ctx = Mat::zeros(batch * n, d);
    ctx.data.par_chunks_mut(n * d).enumerate().for_each(|(s, block)| {
        for i in 0..n {
            let out = &mut block[i * d..(i + 1) * d];
            for j in 0..n {
                let pij = probs.at(s * n + i, j);
                for (o, vv) in out.iter_mut().zip(v.row(s * n + j)) {
                    *o += pij * vv;
                }
            }
        }
    });
    masks[Junction::MhaContext.index()] = hook.act(Junction::MhaContext, &mut ctx)?;

    let (w, b) = affine(hook, Layer::Wo, &model.wo.weight, &model.wo.bias)?;
    let wo = w.clone();
    let mut o = apply_linear(&ctx, &w, &b);
    masks[Junction::MhaOut.index()] = hook.act(Junction::MhaOut, &mut o)?;

    let (a, m) = add_mats(hook, Junction::AddMhaOut, &p, &o)?;
    masks[Junction::AddMhaOut.index()] = m;

    let norm = |hook: &mut H, layer: Layer, bn: &BatchNorm, x: &Mat| -> Result<(Mat, Option<BnCache>), ModelError> {
        if folded {
            let (w, b) = bn.folded();
            let (w, b) = affine(hook, layer, &w, &b)?;
            Ok((scale_features(x, &w, &b), None))
        } else {
            let (y, cache) = batch_norm(x, bn, mode);
            Ok((y, Some(cache)))
        }
    };
    let (mut z1, bn1) = norm(hook, Layer::BnMha, &model.bn_mha, &a)?;
    masks[Junction::BnMhaOut.index()] = hook.act(Junction::BnMhaOut, &mut z1)?;

    let (w1, b1) = affine(hook, Layer::Ffn1, &model.ffn1.weight, &model.ffn1.bias)?;
    let mut h = apply_linear(&z1, &w1, &b1);
    let relu: Vec<bool> = h.data.iter().map(|&v| v > 0.0).collect();
    h.data.iter_mut().for_each(|v| *v = v.max(0.0));
    masks[Junction::FfnHidden.index()] = hook.act(Junction::FfnHidden, &mut h)?;

    let (w2, b2) = affine(hook, Layer::Ffn2, &model.ffn2.weight, &model.ffn2.bias)?;
    let mut f = apply_linear(&h, &w2, &b2);
    masks[Junction::FfnOut.index()] = hook.act(Junction::FfnOut, &mut f)?;

    let (g, m) = add_mats(hook, Junction::AddFfnOut, &z1, &f)?;
    masks[Junction::AddFfnOut.index()] = m;

    let (mut z2, bn2) = norm(hook, Layer::BnFfn, &model.bn_ffn, &g)?;
    masks[Junction::BnFfnOut.index()] = hook.act(Junction::BnFfnOut, &mut z2)?;

    let mut gap = Mat::zeros(batch, d);
    for s in 0..batch {
        let out = gap.row_mut(s);
        for i in 0..n {
            for (o, v) in out.iter_mut().zip(z2.row(s * n + i)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= n as f64);
    }
    masks[Junction::GapOut.index()] = hook.act(Junction::GapOut, &mut gap)?;

    let (wout, bout) = affine(hook, Layer::LOutput, &model.l_output.weight, &model.l_output.bias)?;
    let mut y = apply_linear(&gap, &wout, &bout);
    masks[Junction::LOutputOut.index()] = hook.act(Junction::LOutputOut, &mut y)?;

    let cache = Cache {
        batch,
        folded,
        x0,
        p,
        q,
        k,
        v,
        probs,
        probs_float,
        ctx,
        bn1,
        z1,
        h,
        relu,
        bn2,
        gap,
        weights: EffectiveWeights { wq, wk, wv, wo, ffn1: w1, ffn2: w2, l_output: wout },
        masks,
    };
    Ok((y, cache))
}

pub fn forward_float(model: &FloatModel, x: &Mat, batch: usize, mode: Mode) -> Result<(Mat, Cache), ModelError> {
    forward(model, x, batch, mode, &mut NoQuant)
}

/// Evaluation-mode predictions, computed in fixed-size chunks of windows.
pub fn predict<H: QuantHook>(model: &FloatModel, x: &Mat, batch: usize, hook: &mut H) -> Result<Vec<f64>, ModelError> {
    const CHUNK: usize = 512;
    let n = model.config.seq_len;
    let mut out = Vec::with_capacity(batch * model.config.output_dim);
    let mut start = 0;
    while start < batch {
        let b = CHUNK.min(batch - start);
        let (y, _) = forward(model, &x.rows_slice(start * n, b * n), b, Mode::Eval, hook)?;
        out.extend_from_slice(&y.data);
        start += b;
    }
    Ok(out)
}
