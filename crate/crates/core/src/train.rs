//! Adam training with step learning-rate decay, early stopping on a
//! chronological validation tail, and optional quantization-aware training.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::WindowedDataset;
use crate::estimate::BitwidthCombination;
use crate::model::{backward, forward, mse_loss, predict, FakeQuant, FloatModel, Gradients, Mat, ModelError, Mode, NoQuant, QuantHook};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite loss at epoch {epoch}, batch {batch} (learning rate {lr:e})")]
    NonFinite { epoch: usize, batch: usize, lr: f64 },
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub lr_halving_period_epochs: usize,
    pub seed: u64,
    /// Train with fake quantization at these bitwidths.
    pub qat: Option<BitwidthCombination>,
    pub ema_decay: f64,
    /// Share of the training pairs, taken from the end, held out for early stopping.
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            patience: 10,
            batch_size: 256,
            lr: 0.001,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-9,
            lr_halving_period_epochs: 3,
            seed: 0,
            qat: None,
            ema_decay: 0.99,
            validation_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.epochs == 0 || self.patience == 0 || self.batch_size == 0 || self.lr_halving_period_epochs == 0 {
            return bad("epochs, patience, batch size and halving period must be positive");
        }
        if self.patience > self.epochs {
            return bad("patience exceeds the number of epochs");
        }
        if !(self.lr > 0.0 && self.adam_eps > 0.0) || !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("learning rate, betas and epsilon out of range");
        }
        if !(0.0..1.0).contains(&self.ema_decay) || !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("EMA decay and validation fraction must lie in [0, 1)");
        }
        Ok(())
    }

    /// Range-tracking decay for the `step`-th training batch. Early updates
    /// use a smaller decay, `(1 + step) / (10 + step)`, so ranges follow the
    /// fast-moving weights of the first epochs.
    pub fn ema_decay_at(&self, step: usize) -> f64 {
        self.ema_decay.min((1 + step) as f64 / (10 + step) as f64)
    }

    /// Step decay: the rate halves at every multiple of the halving period.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * 0.5f64.powi((epoch / self.lr_halving_period_epochs) as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStopping,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop_reason: StopReason,
}

pub struct Adam {
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(model: &FloatModel, beta1: f64, beta2: f64, eps: f64) -> Adam {
        let z = model.zero_gradients().0;
        Adam { m: z.clone(), v: z, t: 0, beta1, beta2, eps }
    }

    pub fn step(&mut self, model: &mut FloatModel, g: &Gradients, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, p) in model.trainable_mut().into_iter().enumerate() {
            let (m, v) = (&mut self.m[i].data, &mut self.v[i].data);
            for (k, w) in p.data.iter_mut().enumerate() {
                let gk = g.0[i].data[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                *w -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Tracks the best validation loss and keeps a copy of the best model.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best_loss: f64,
    pub best_epoch: usize,
    pub best: Option<FloatModel>,
    wait: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping { patience, best_loss: f64::INFINITY, best_epoch: 0, best: None, wait: 0 }
    }

    /// Records an epoch; returns true when training should stop.
    pub fn observe(&mut self, epoch: usize, loss: f64, model: &FloatModel) -> bool {
        if loss < self.best_loss {
            self.best_loss = loss;
            self.best_epoch = epoch;
            self.best = Some(model.clone());
            self.wait = 0;
        } else {
            self.wait += 1;
        }
        self.wait >= self.patience
    }
}

fn mse(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len().max(1) as f64
}

fn train_step<H: QuantHook>(model: &mut FloatModel, adam: &mut Adam, x: &Mat, y: &[f64], lr: f64, hook: &mut H) -> Result<f64, ModelError> {
    let b = y.len();
    let (out, cache) = forward(model, x, b, Mode::Train, hook)?;
    let (loss, dy) = mse_loss(&out, y);
    if !loss.is_finite() {
        return Ok(loss);
    }
    let g = backward(model, &cache, &dy)?;
    let stats = cache.batch_stats().map(|s| s.cloned());
    adam.step(model, &g, lr);
    if let Some((m, v)) = &stats[0] {
        model.bn_mha.update_running(m, v);
    }
    if let Some((m, v)) = &stats[1] {
        model.bn_ffn.update_running(m, v);
    }
    Ok(loss)
}

/// Trains on `data.train`; the last `validation_fraction` of it is held out.
/// With `cfg.qat` set, every forward pass is fake-quantized and the
/// returned model carries the tracked activation ranges.
pub fn train(model: FloatModel, data: &WindowedDataset, cfg: &TrainConfig) -> Result<(FloatModel, TrainReport), TrainError> {
    cfg.validate()?;
    let c = model.config;
    if c.seq_len != data.seq_len || c.input_dim != data.columns {
        return Err(TrainError::Config(format!(
            "model expects {}×{} windows, dataset has {}×{}",
            c.seq_len, c.input_dim, data.seq_len, data.columns
        )));
    }
    let n_all = data.train.len();
    let n_val = if n_all >= 2 { ((n_all as f64 * cfg.validation_fraction).round() as usize).min(n_all - 1) } else { 0 };
    let fit_end = data.train.start + n_all - n_val;
    if fit_end == data.train.start {
        return Err(TrainError::Config("no training pairs".into()));
    }
    let val = (n_val > 0).then(|| data.subset(fit_end..data.train.end));

    let mut model = model;
    let mut ranges = model.qat_ranges.take().unwrap_or_default();
    let mut adam = Adam::new(&model, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (data.train.start..fit_end).collect();
    let mut epochs = Vec::new();
    let mut reason = StopReason::MaxEpochs;
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = data.gather(idx);
            let loss = match cfg.qat {
                Some(combo) => {
                    let decay = cfg.ema_decay_at(step);
                    train_step(&mut model, &mut adam, &x, &y, lr, &mut FakeQuant::tracked(combo, &mut ranges, decay, true))?
                }
                None => train_step(&mut model, &mut adam, &x, &y, lr, &mut NoQuant)?,
            };
            if !loss.is_finite() {
                return Err(TrainError::NonFinite { epoch, batch: bi, lr });
            }
            total += loss * idx.len() as f64;
            step += 1;
        }
        let train_loss = total / order.len() as f64;
        let val_loss = match &val {
            Some((vx, vy)) => {
                let p = match cfg.qat {
                    Some(combo) => predict(&model, vx, vy.len(), &mut FakeQuant::tracked(combo, &mut ranges, cfg.ema_decay, false))?,
                    None => predict(&model, vx, vy.len(), &mut NoQuant)?,
                };
                mse(&p, vy)
            }
            None => train_loss,
        };
        epochs.push(EpochRecord { epoch, train_loss, val_loss, lr });
        if cfg.qat.is_some() {
            model.qat_ranges = Some(ranges.clone());
        }
        if stopper.observe(epoch, val_loss, &model) {
            reason = StopReason::EarlyStopping;
            break;
        }
    }
    let best = stopper.best.take().expect("at least one epoch");
    let report = TrainReport { epochs, best_epoch: stopper.best_epoch, best_val_loss: stopper.best_loss, stop_reason: reason };
    Ok((best, report))
}

/// Quantization-aware training at `combo`.
pub fn train_qat(model: FloatModel, data: &WindowedDataset, cfg: &TrainConfig, combo: BitwidthCombination) -> Result<(FloatModel, TrainReport), TrainError> {
    train(model, data, &TrainConfig { qat: Some(combo), ..cfg.clone() })
}

/// Mean squared error of real-valued predictions over a pair range.
pub fn evaluate_mse(model: &FloatModel, data: &WindowedDataset, range: std::ops::Range<usize>) -> Result<f64, TrainError> {
    let (x, y) = data.subset(range);
    Ok(mse(&predict(model, &x, y.len(), &mut NoQuant)?, &y))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 0.001);
        assert_eq!(cfg.lr_at(2), 0.001);
        assert_eq!(cfg.lr_at(3), 0.0005);
        assert_eq!(cfg.lr_at(7), 0.00025);
    }

    #[test]
    fn plateau_stops_after_patience() {
        let m = FloatModel::init(crate::model::ModelConfig::new(2, 1, 2).unwrap(), 0).unwrap();
        let mut es = EarlyStopping::new(10);
        let k = 4;
        let mut stopped = None;
        for epoch in 0..100 {
            let loss = if epoch <= k { 10.0 - epoch as f64 } else { 10.0 - k as f64 };
            if es.observe(epoch, loss, &m) {
                stopped = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped, Some(k + 10));
        assert_eq!(es.best_epoch, k);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { patience: 200, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        TrainConfig::default().validate().unwrap();
    }
}
