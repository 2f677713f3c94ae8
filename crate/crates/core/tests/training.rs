use mixq_core::data::{ingest, rmse, synthetic_csv, window, Split, WindowedDataset};
use mixq_core::model::{
    backward, float_softmax_rows, forward, forward_integer, quantize_model, mse_loss, predict, FakeQuant, FloatModel, Junction, Layer, Mat, ModelConfig, ModelError, Mode,
    NoQuant, QuantHook, Ranges, TRAINABLE,
};
use mixq_core::train::{train, train_qat, StopReason, TrainConfig};
use mixq_core::{Bitwidth, BitwidthCombination};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Target is the mean of the features at the last step of the window.
fn linear_task(pairs: usize, seed: u64) -> WindowedDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut csv = String::from("a,b,y\n");
    let (mut a1, mut b1) = (0.0, 0.0);
    for _ in 0..pairs + 8 {
        let (a, b): (f64, f64) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
        csv.push_str(&format!("{a},{b},{}\n", (a1 + b1) / 2.0));
        (a1, b1) = (a, b);
    }
    let series = ingest(&csv, "y", None, Some(&["a".to_string(), "b".to_string()])).unwrap();
    window(&series, 4, Split::Fraction(0.1)).unwrap()
}

fn synthetic(n: usize) -> WindowedDataset {
    let series = ingest(&synthetic_csv(2000, 7), "pm25", Some("timestamp"), None).unwrap();
    window(&series, n, Split::Auto(0.1)).unwrap()
}

fn mse(p: &[f64], t: &[f64]) -> f64 {
    p.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / p.len() as f64
}

#[test]
fn loss_drops_on_linear_task() {
    let data = linear_task(600, 1);
    let model = FloatModel::init(ModelConfig::new(4, 3, 16).unwrap(), 3).unwrap();
    let (x, y) = data.subset(data.train.clone());
    let before = mse(&predict(&model, &x, y.len(), &mut NoQuant).unwrap(), &y);
    let cfg = TrainConfig { epochs: 20, patience: 20, batch_size: 32, lr: 0.003, lr_halving_period_epochs: 8, ..Default::default() };
    let (model, report) = train(model, &data, &cfg).unwrap();
    let after = mse(&predict(&model, &x, y.len(), &mut NoQuant).unwrap(), &y);
    assert!(after <= 0.1 * before, "loss {before} -> {after}");
    assert!(report.epochs.len() <= 20);
}

#[test]
fn training_is_deterministic() {
    let data = linear_task(200, 2);
    let cfg = TrainConfig { epochs: 3, batch_size: 16, patience: 3, seed: 9, ..Default::default() };
    let init = FloatModel::init(ModelConfig::new(4, 3, 8).unwrap(), 4).unwrap();
    let (a, ra) = train(init.clone(), &data, &cfg).unwrap();
    let (b, rb) = train(init, &data, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
}

#[test]
fn report_tracks_schedule_and_best_epoch() {
    let data = linear_task(200, 3);
    let cfg = TrainConfig { epochs: 7, patience: 7, batch_size: 16, ..Default::default() };
    let (_, r) = train(FloatModel::init(ModelConfig::new(4, 3, 8).unwrap(), 5).unwrap(), &data, &cfg).unwrap();
    let lrs: Vec<f64> = r.epochs.iter().map(|e| e.lr).collect();
    assert_eq!(&lrs[..], &[0.001, 0.001, 0.001, 0.0005, 0.0005, 0.0005, 0.00025][..lrs.len()]);
    let best = r.epochs.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(r.best_val_loss, best);
    assert_eq!(r.epochs[r.best_epoch].val_loss, best);
    if r.stop_reason == StopReason::MaxEpochs {
        assert_eq!(r.epochs.len(), 7);
    }
}

#[test]
fn mismatched_model_rejected() {
    let data = linear_task(50, 4);
    let m = FloatModel::init(ModelConfig::new(5, 3, 8).unwrap(), 0).unwrap();
    assert!(train(m, &data, &TrainConfig::default()).is_err());
}

#[test]
fn diverging_training_reports_batch() {
    let data = linear_task(100, 5);
    let cfg = TrainConfig { epochs: 5, patience: 5, batch_size: 16, lr: 1e300, ..Default::default() };
    let err = train(FloatModel::init(ModelConfig::new(4, 3, 8).unwrap(), 0).unwrap(), &data, &cfg).unwrap_err();
    assert!(err.to_string().contains("batch"), "{err}");
}

#[test]
fn qat_disabled_matches_float_training() {
    let data = linear_task(150, 6);
    let cfg = TrainConfig { epochs: 2, patience: 2, batch_size: 16, ..Default::default() };
    let init = FloatModel::init(ModelConfig::new(4, 3, 8).unwrap(), 1).unwrap();
    let a = train(init.clone(), &data, &cfg).unwrap();
    let b = train(init, &data, &TrainConfig { qat: None, ..cfg }).unwrap();
    assert_eq!(a, b);
    assert!(a.0.qat_ranges.is_none());
}

/// Averaged over several initializations; single seeds scatter by about
/// ten percent around the mean ratio.
#[test]
fn eight_bit_qat_tracks_float_training() {
    let data = synthetic(12);
    let cfg = TrainConfig { epochs: 30, batch_size: 32, ..Default::default() };
    let (mut float, mut qat) = (0.0, 0.0);
    for seed in 1..=6 {
        let init = FloatModel::init(ModelConfig::new(12, 3, 16).unwrap(), seed).unwrap();
        float += train(init.clone(), &data, &cfg).unwrap().1.best_val_loss;
        let (m, r) = train_qat(init, &data, &cfg, BitwidthCombination::uniform(Bitwidth::B8)).unwrap();
        assert!(m.qat_ranges.as_ref().is_some_and(|r| r.0.len() == Junction::ALL.len()));
        qat += r.best_val_loss;
    }
    assert!(qat <= 1.25 * float, "QAT {} vs float {}", qat / 6.0, float / 6.0);
}

#[test]
fn eight_bit_integer_model_tracks_float_rmse() {
    let data = synthetic(12);
    let cfg = TrainConfig { epochs: 20, batch_size: 32, ..Default::default() };
    let init = FloatModel::init(ModelConfig::new(12, 3, 16).unwrap(), 1).unwrap();
    let (model, _) = train(init, &data, &cfg).unwrap();
    let (cx, cy) = data.subset(data.train.clone());
    let q = quantize_model(&model, &BitwidthCombination::uniform(Bitwidth::B8), &cx, cy.len()).unwrap();
    let test = data.test.start..data.test.start + 100;
    let (x, y) = data.subset(test);
    let float = rmse(&predict(&model, &x, 100, &mut NoQuant).unwrap(), &y, &data.scaler).unwrap();
    let int = rmse(&forward_integer(&q, &q.quantize_input(&x).unwrap(), 100).unwrap(), &y, &data.scaler).unwrap();
    assert!(int <= 1.1 * float, "integer RMSE {int} vs float {float}");
}

/// Records what fake quantization added at each hook call.
struct Recording<'a> {
    inner: FakeQuant<'a>,
    deltas: Vec<Mat>,
    z1: Option<Mat>,
    ffn1: Option<(Mat, Mat)>,
}

impl Recording<'_> {
    /// Smallest distance of a hidden pre-activation from the ReLU kink.
    fn kink_margin(&self) -> f64 {
        let (w, b) = self.ffn1.as_ref().unwrap();
        let mut h = self.z1.as_ref().unwrap().matmul(w);
        h.add_row(&b.data);
        h.data.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }
}

/// Replays recorded offsets so quantization becomes a constant shift.
struct Replay<'a> {
    deltas: &'a [Mat],
    next: usize,
}

fn diff(a: &Mat, b: &Mat) -> Mat {
    Mat::from_vec(a.rows, a.cols, a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect())
}

fn plus(a: &Mat, b: &Mat) -> Mat {
    Mat::from_vec(a.rows, a.cols, a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect())
}

impl QuantHook for Recording<'_> {
    fn linear(&mut self, layer: Layer, w: &Mat, b: &Mat) -> Result<Option<(Mat, Mat)>, ModelError> {
        let (fw, fb) = self.inner.linear(layer, w, b)?.unwrap();
        if layer == Layer::Ffn1 {
            self.ffn1 = Some((fw.clone(), fb.clone()));
        }
        self.deltas.push(diff(&fw, w));
        self.deltas.push(diff(&fb, b));
        Ok(Some((fw, fb)))
    }
    fn positional(&mut self, pe: &Mat) -> Result<Option<Mat>, ModelError> {
        let f = self.inner.positional(pe)?.unwrap();
        self.deltas.push(diff(&f, pe));
        Ok(Some(f))
    }
    fn act(&mut self, j: Junction, x: &mut Mat) -> Result<Option<Vec<bool>>, ModelError> {
        let before = x.clone();
        let m = self.inner.act(j, x)?;
        if j == Junction::BnMhaOut {
            self.z1 = Some(x.clone());
        }
        self.deltas.push(diff(x, &before));
        Ok(m)
    }
    fn add(&mut self, j: Junction, a: &Mat, b: &Mat) -> Result<Option<(Mat, Vec<bool>)>, ModelError> {
        let (o, m) = self.inner.add(j, a, b)?.unwrap();
        self.deltas.push(diff(&o, &plus(a, b)));
        Ok(Some((o, m)))
    }
    fn softmax(&mut self, s: &Mat) -> Result<Option<Mat>, ModelError> {
        let p = self.inner.softmax(s)?.unwrap();
        self.deltas.push(diff(&p, &float_softmax_rows(s)));
        Ok(Some(p))
    }
}

impl Replay<'_> {
    fn take(&mut self) -> &Mat {
        self.next += 1;
        &self.deltas[self.next - 1]
    }
}

impl QuantHook for Replay<'_> {
    fn linear(&mut self, _: Layer, w: &Mat, b: &Mat) -> Result<Option<(Mat, Mat)>, ModelError> {
        let w = plus(w, self.take());
        Ok(Some((w, plus(b, self.take()))))
    }
    fn positional(&mut self, pe: &Mat) -> Result<Option<Mat>, ModelError> {
        Ok(Some(plus(pe, self.take())))
    }
    fn act(&mut self, _: Junction, x: &mut Mat) -> Result<Option<Vec<bool>>, ModelError> {
        *x = plus(x, self.take());
        Ok(None)
    }
    fn add(&mut self, _: Junction, a: &Mat, b: &Mat) -> Result<Option<(Mat, Vec<bool>)>, ModelError> {
        let o = plus(&plus(a, b), self.take());
        Ok(Some((o, vec![true; a.len()])))
    }
    fn softmax(&mut self, s: &Mat) -> Result<Option<Mat>, ModelError> {
        Ok(Some(plus(&float_softmax_rows(s), self.take())))
    }
}

struct StePoint {
    model: FloatModel,
    x: Mat,
    t: Vec<f64>,
    ranges: Ranges,
    margin: f64,
}

fn ste_point(combo: BitwidthCombination, seed: u64, rng: &mut ChaCha8Rng) -> StePoint {
    let cfg = ModelConfig::new(4, 2, 4).unwrap();
    let mut model = FloatModel::init(cfg, seed).unwrap();
    for t in model.trainable_mut() {
        t.data.iter_mut().for_each(|v| *v += rng.gen_range(-0.1..0.1));
    }
    let x = Mat::from_fn(12, 2, |_, _| rng.gen_range(0.0..1.0));
    let t: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    // observed ranges, widened so no element reaches the clamp limits
    let mut ranges = Ranges::default();
    forward(&model, &x, 3, Mode::Train, &mut FakeQuant::tracked(combo, &mut ranges, 0.9, true)).unwrap();
    ranges.0.values_mut().for_each(|r| *r = (r.0 * 3.0 - 0.1, r.1 * 3.0 + 0.1));
    ranges.0.insert(Junction::FfnHidden, (0.0, ranges.0[&Junction::FfnHidden].1));
    let mut rec = Recording { inner: FakeQuant::tracked(combo, &mut ranges, 0.9, false), deltas: Vec::new(), z1: None, ffn1: None };
    forward(&model, &x, 3, Mode::Train, &mut rec).unwrap();
    let margin = rec.kink_margin();
    StePoint { model, x, t, ranges, margin }
}

/// Where every clamp is inactive the straight-through gradient is the exact
/// gradient of the network with each quantization error frozen as a constant
/// offset. Products of grid values can put a hidden unit exactly on the ReLU
/// kink; when no draw avoids that, only tensors after the ReLU are compared.
#[test]
fn straight_through_gradient_matches_frozen_offset_surrogate() {
    let combos = [
        BitwidthCombination::uniform(Bitwidth::B8),
        BitwidthCombination::uniform(Bitwidth::B6),
        BitwidthCombination::uniform(Bitwidth::B4),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let first_after_relu = TRAINABLE.iter().position(|n| *n == "ffn.w2.weight").unwrap();
    for (case, combo) in combos.into_iter().enumerate() {
        let mut pt = ste_point(combo, 100 * case as u64, &mut rng);
        for attempt in 1..10 {
            if pt.margin >= 1e-6 {
                break;
            }
            pt = ste_point(combo, 100 * case as u64 + attempt, &mut rng);
        }
        let StePoint { model: m, x, t, mut ranges, margin } = pt;
        let mut rec = Recording { inner: FakeQuant::tracked(combo, &mut ranges, 0.9, false), deltas: Vec::new(), z1: None, ffn1: None };
        let (y, cache) = forward(&m, &x, 3, Mode::Train, &mut rec).unwrap();
        assert!(cache.masks().iter().flatten().all(|mask| mask.iter().all(|&b| b)));
        let deltas = rec.deltas;
        let g = backward(&m, &cache, &mse_loss(&y, &t).1).unwrap();

        let surrogate = |m: &FloatModel| {
            let (y, _) = forward(m, &x, 3, Mode::Train, &mut Replay { deltas: &deltas, next: 0 }).unwrap();
            mse_loss(&y, &t).0
        };
        assert!((surrogate(&m) - mse_loss(&y, &t).0).abs() < 1e-12);
        let from = if margin >= 1e-6 { 0 } else { first_after_relu };
        if case < 2 {
            assert_eq!(from, 0, "8- and 6-bit draws should avoid the kink");
        }
        let h = 1e-5;
        for (ti, name) in TRAINABLE.iter().enumerate().skip(from) {
            let num: Vec<f64> = (0..g.0[ti].len())
                .map(|e| {
                    let mut mp = m.clone();
                    mp.trainable_mut()[ti].data[e] += h;
                    let mut mm = m.clone();
                    mm.trainable_mut()[ti].data[e] -= h;
                    (surrogate(&mp) - surrogate(&mm)) / (2.0 * h)
                })
                .collect();
            let d: f64 = num.iter().zip(&g.0[ti].data).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let s: f64 = num.iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!(d <= 1e-3 * s + 1e-7, "combo {case} {name}: error {d} against norm {s}");
        }
    }
}
