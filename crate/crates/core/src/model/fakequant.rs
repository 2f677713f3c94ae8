use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::forward::{predict, Junction, Layer, QuantHook};
use super::{FloatModel, Mat, ModelError};
use crate::estimate::BitwidthCombination;
use crate::kb::ComponentId;
use crate::quant::{calibrate_asymmetric, calibrate_range, derive_bias_params, plan_cascade, CascadePlan, IntSoftmax, QuantParams};

/// Observed `(min, max)` per junction.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Ranges(pub BTreeMap<Junction, (f64, f64)>);

impl Ranges {
    pub fn observe(&mut self, j: Junction, lo: f64, hi: f64) {
        let e = self.0.entry(j).or_insert((lo, hi));
        e.0 = e.0.min(lo);
        e.1 = e.1.max(hi);
    }

    /// Exponential moving average; the first observation initializes.
    pub fn track(&mut self, j: Junction, lo: f64, hi: f64, decay: f64) {
        match self.0.get_mut(&j) {
            Some(e) => {
                e.0 = decay * e.0 + (1.0 - decay) * lo;
                e.1 = decay * e.1 + (1.0 - decay) * hi;
            }
            None => {
                self.0.insert(j, (lo, hi));
            }
        }
    }

    pub fn get(&self, j: Junction) -> Option<(f64, f64)> {
        self.0.get(&j).copied()
    }
}

/// Bitwidth of a component under `combo`.
pub fn component_bits(combo: &BitwidthCombination, c: ComponentId) -> u32 {
    combo.get(c).bits() as u32
}

pub fn junction_params(j: Junction, lo: f64, hi: f64, combo: &BitwidthCombination) -> Result<QuantParams, ModelError> {
    Ok(calibrate_range(lo, hi, component_bits(combo, j.component()), j.signed())?)
}

/// Weight and bias parameters of a weighted stage fed by `input`.
pub fn layer_params(layer: Layer, w: &Mat, input: &QuantParams, combo: &BitwidthCombination) -> Result<(QuantParams, QuantParams), ModelError> {
    let wp = calibrate_asymmetric(&w.data, component_bits(combo, layer.component()), true)?;
    let bp = derive_bias_params(input, &wp);
    Ok((wp, bp))
}

pub fn positional_params(pe: &Mat, combo: &BitwidthCombination) -> Result<QuantParams, ModelError> {
    Ok(calibrate_asymmetric(&pe.data, component_bits(combo, ComponentId::AddPe), true)?)
}

/// Frozen activation parameters for every junction.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub combo: BitwidthCombination,
    pub plan: CascadePlan,
    pub params: BTreeMap<Junction, QuantParams>,
}

impl Calibration {
    pub fn from_ranges(ranges: &Ranges, combo: &BitwidthCombination) -> Result<Calibration, ModelError> {
        let mut params = BTreeMap::new();
        for j in Junction::ALL {
            let (lo, hi) = ranges.get(j).ok_or(ModelError::MissingCalibration(j))?;
            params.insert(j, junction_params(j, lo, hi, combo)?);
        }
        Ok(Calibration { combo: *combo, plan: plan_cascade(combo), params })
    }

    pub fn from_params(params: BTreeMap<Junction, QuantParams>, combo: &BitwidthCombination) -> Result<Calibration, ModelError> {
        for j in Junction::ALL {
            let p = params.get(&j).ok_or(ModelError::MissingCalibration(j))?;
            p.validate()?;
            if p.bitwidth != component_bits(combo, j.component()) {
                return Err(ModelError::Format(format!("junction {j} is {} bits, combination requires {}", p.bitwidth, component_bits(combo, j.component()))));
            }
        }
        Ok(Calibration { combo: *combo, plan: plan_cascade(combo), params })
    }

    pub fn get(&self, j: Junction) -> Result<&QuantParams, ModelError> {
        self.params.get(&j).ok_or(ModelError::MissingCalibration(j))
    }
}

/// Records activation ranges of the real-valued forward pass.
#[derive(Debug, Default)]
pub struct RangeRecorder {
    pub ranges: Ranges,
}

impl QuantHook for RangeRecorder {
    fn act(&mut self, j: Junction, x: &mut Mat) -> Result<Option<Vec<bool>>, ModelError> {
        if let Some((lo, hi)) = x.min_max() {
            self.ranges.observe(j, lo, hi);
        }
        Ok(None)
    }

    fn add(&mut self, j: Junction, a: &Mat, b: &Mat) -> Result<Option<(Mat, Vec<bool>)>, ModelError> {
        let mut s = a.clone();
        s.add_assign(b);
        if let Some((lo, hi)) = s.min_max() {
            self.ranges.observe(j, lo, hi);
        }
        Ok(None)
    }
}

pub fn collect_ranges(model: &FloatModel, x: &Mat, batch: usize) -> Result<Ranges, ModelError> {
    if batch == 0 {
        return Err(ModelError::Config("calibration data is empty".into()));
    }
    let mut rec = RangeRecorder::default();
    predict(model, x, batch, &mut rec)?;
    Ok(rec.ranges)
}

enum Source<'a> {
    Fixed(&'a Calibration),
    Tracked { ranges: &'a mut Ranges, decay: f64, update: bool },
}

/// Inserts quantize∘dequantize at every junction, weight, bias and residual
/// add, and evaluates attention probabilities with the integer softmax.
///
/// With fixed calibration the hook folds batch norm and reproduces the
/// integer pipeline in real arithmetic. With tracked ranges it serves
/// quantization-aware training: ranges follow an exponential moving average
/// and batch norm stays unfolded.
pub struct FakeQuant<'a> {
    combo: BitwidthCombination,
    source: Source<'a>,
}

impl<'a> FakeQuant<'a> {
    pub fn fixed(calib: &'a Calibration) -> Self {
        FakeQuant { combo: calib.combo, source: Source::Fixed(calib) }
    }

    /// `update` enables range tracking (training batches); evaluation
    /// batches read the ranges unchanged.
    pub fn tracked(combo: BitwidthCombination, ranges: &'a mut Ranges, decay: f64, update: bool) -> Self {
        FakeQuant { combo, source: Source::Tracked { ranges, decay, update } }
    }

    fn params(&mut self, j: Junction, observed: Option<(f64, f64)>) -> Result<QuantParams, ModelError> {
        match &mut self.source {
            Source::Fixed(c) => c.get(j).copied(),
            Source::Tracked { ranges, decay, update } => {
                if let (true, Some((lo, hi))) = (*update, observed) {
                    ranges.track(j, lo, hi, *decay);
                }
                let (lo, hi) = ranges.get(j).ok_or(ModelError::MissingCalibration(j))?;
                junction_params(j, lo, hi, &self.combo)
            }
        }
    }
}

fn fake_mat(m: &Mat, p: &QuantParams) -> Mat {
    Mat::from_vec(m.rows, m.cols, m.data.iter().map(|&v| p.fake(v)).collect())
}

impl QuantHook for FakeQuant<'_> {
    fn fold_bn(&self) -> bool {
        matches!(self.source, Source::Fixed(_))
    }

    fn linear(&mut self, layer: Layer, w: &Mat, b: &Mat) -> Result<Option<(Mat, Mat)>, ModelError> {
        let xp = self.params(layer.input(), None)?;
        let (wp, bp) = layer_params(layer, w, &xp, &self.combo)?;
        Ok(Some((fake_mat(w, &wp), fake_mat(b, &bp))))
    }

    fn positional(&mut self, pe: &Mat) -> Result<Option<Mat>, ModelError> {
        Ok(Some(fake_mat(pe, &positional_params(pe, &self.combo)?)))
    }

    fn act(&mut self, j: Junction, x: &mut Mat) -> Result<Option<Vec<bool>>, ModelError> {
        let p = self.params(j, x.min_max())?;
        let mask = x.data.iter().map(|&v| p.passes(v)).collect();
        x.data.iter_mut().for_each(|v| *v = p.fake(*v));
        Ok(Some(mask))
    }

    fn add(&mut self, j: Junction, a: &Mat, b: &Mat) -> Result<Option<(Mat, Vec<bool>)>, ModelError> {
        let observed = a.data.iter().zip(&b.data).fold(None, |acc: Option<(f64, f64)>, (x, y)| {
            let s = x + y;
            Some(acc.map_or((s, s), |(lo, hi)| (lo.min(s), hi.max(s))))
        });
        let p = self.params(j, observed)?;
        let mut out = a.clone();
        let mut mask = Vec::with_capacity(a.len());
        for (o, (&x, &y)) in out.data.iter_mut().zip(a.data.iter().zip(&b.data)) {
            // both addends are aligned to the output grid before the integer add
            let q = (x / p.scale).round() as i64 + (y / p.scale).round() as i64 + p.zero_point;
            mask.push((p.qmin()..=p.qmax()).contains(&q));
            *o = p.dequantize_value(p.clamp(q));
        }
        Ok(Some((out, mask)))
    }

    fn softmax(&mut self, scores: &Mat) -> Result<Option<Mat>, ModelError> {
        let p = self.params(Junction::MhaScores, None)?;
        let sm = IntSoftmax::new(p.scale, component_bits(&self.combo, ComponentId::Mha))?;
        let one = sm.one() as f64;
        let mut out = scores.clone();
        let mut q = vec![0i64; scores.cols];
        let mut r = vec![0i64; scores.cols];
        for (row_out, row) in out.data.chunks_mut(scores.cols).zip(scores.data.chunks(scores.cols)) {
            q.iter_mut().zip(row).for_each(|(qi, &v)| *qi = p.quantize_value(v));
            sm.row(&q, &mut r);
            row_out.iter_mut().zip(&r).for_each(|(o, &pi)| *o = pi as f64 / one);
        }
        Ok(Some(out))
    }
}

/// Fake-quantized evaluation-mode predictions.
pub fn forward_fake_quant(model: &FloatModel, calib: &Calibration, x: &Mat, batch: usize) -> Result<Vec<f64>, ModelError> {
    predict(model, x, batch, &mut FakeQuant::fixed(calib))
}
