use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Mat, ModelConfig, ModelError, Ranges};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `in × out`
    pub weight: Mat,
    /// `1 × out`
    pub bias: Mat,
}

impl Linear {
    fn init(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Linear {
        let a = (1.0 / fan_in as f64).sqrt();
        Linear { weight: Mat::from_fn(fan_in, fan_out, |_, _| rng.gen_range(-a..=a)), bias: Mat::zeros(1, fan_out) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Mat,
    pub beta: Mat,
    pub running_mean: Mat,
    pub running_var: Mat,
}

impl BatchNorm {
    fn new(d: usize) -> BatchNorm {
        BatchNorm {
            gamma: Mat::from_vec(1, d, vec![1.0; d]),
            beta: Mat::zeros(1, d),
            running_mean: Mat::zeros(1, d),
            running_var: Mat::from_vec(1, d, vec![1.0; d]),
        }
    }

    /// Per-feature affine `(w, b)` equivalent to evaluation-mode normalization.
    pub fn folded(&self) -> (Mat, Mat) {
        let d = self.gamma.cols;
        let w: Vec<f64> = (0..d).map(|i| self.gamma.data[i] / (self.running_var.data[i] + BN_EPS).sqrt()).collect();
        let b: Vec<f64> = (0..d).map(|i| self.beta.data[i] - self.running_mean.data[i] * w[i]).collect();
        (Mat::from_vec(1, d, w), Mat::from_vec(1, d, b))
    }

    pub fn update_running(&mut self, mean: &[f64], var: &[f64]) {
        for i in 0..self.gamma.cols {
            self.running_mean.data[i] = (1.0 - BN_MOMENTUM) * self.running_mean.data[i] + BN_MOMENTUM * mean[i];
            self.running_var.data[i] = (1.0 - BN_MOMENTUM) * self.running_var.data[i] + BN_MOMENTUM * var[i];
        }
    }
}

/// Sinusoidal position table, `seq_len × d_model`.
pub fn positional_encoding(seq_len: usize, d_model: usize) -> Mat {
    Mat::from_fn(seq_len, d_model, |pos, i| {
        let angle = pos as f64 / 10000f64.powf((2 * (i / 2)) as f64 / d_model as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Real-valued parameters of the forecasting model.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatModel {
    pub config: ModelConfig,
    pub l_input: Linear,
    pub pe: Mat,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub bn_mha: BatchNorm,
    pub ffn1: Linear,
    pub ffn2: Linear,
    pub bn_ffn: BatchNorm,
    pub l_output: Linear,
    /// Activation ranges tracked during quantization-aware training.
    pub qat_ranges: Option<Ranges>,
}

/// Names of the trained tensors, in [`FloatModel::trainable`] order.
pub const TRAINABLE: [&str; 20] = [
    "l_input.weight",
    "l_input.bias",
    "mha.wq.weight",
    "mha.wq.bias",
    "mha.wk.weight",
    "mha.wk.bias",
    "mha.wv.weight",
    "mha.wv.bias",
    "mha.wo.weight",
    "mha.wo.bias",
    "bn_mha.gamma",
    "bn_mha.beta",
    "ffn.w1.weight",
    "ffn.w1.bias",
    "ffn.w2.weight",
    "ffn.w2.bias",
    "bn_ffn.gamma",
    "bn_ffn.beta",
    "l_output.weight",
    "l_output.bias",
];

/// Non-trained tensors stored alongside the trained ones.
pub const BUFFERS: [&str; 5] =
    ["pe.table", "bn_mha.running_mean", "bn_mha.running_var", "bn_ffn.running_mean", "bn_ffn.running_var"];

impl FloatModel {
    pub fn init(config: ModelConfig, seed: u64) -> Result<FloatModel, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, d, f) = (config.input_dim, config.d_model, config.ffn_dim);
        Ok(FloatModel {
            config,
            l_input: Linear::init(m, d, &mut rng),
            pe: positional_encoding(config.seq_len, d),
            wq: Linear::init(d, d, &mut rng),
            wk: Linear::init(d, d, &mut rng),
            wv: Linear::init(d, d, &mut rng),
            wo: Linear::init(d, d, &mut rng),
            bn_mha: BatchNorm::new(d),
            ffn1: Linear::init(d, f, &mut rng),
            ffn2: Linear::init(f, d, &mut rng),
            bn_ffn: BatchNorm::new(d),
            l_output: Linear::init(d, config.output_dim, &mut rng),
            qat_ranges: None,
        })
    }

    pub fn trainable(&self) -> [&Mat; 20] {
        [
            &self.l_input.weight,
            &self.l_input.bias,
            &self.wq.weight,
            &self.wq.bias,
            &self.wk.weight,
            &self.wk.bias,
            &self.wv.weight,
            &self.wv.bias,
            &self.wo.weight,
            &self.wo.bias,
            &self.bn_mha.gamma,
            &self.bn_mha.beta,
            &self.ffn1.weight,
            &self.ffn1.bias,
            &self.ffn2.weight,
            &self.ffn2.bias,
            &self.bn_ffn.gamma,
            &self.bn_ffn.beta,
            &self.l_output.weight,
            &self.l_output.bias,
        ]
    }

    pub fn trainable_mut(&mut self) -> [&mut Mat; 20] {
        [
            &mut self.l_input.weight,
            &mut self.l_input.bias,
            &mut self.wq.weight,
            &mut self.wq.bias,
            &mut self.wk.weight,
            &mut self.wk.bias,
            &mut self.wv.weight,
            &mut self.wv.bias,
            &mut self.wo.weight,
            &mut self.wo.bias,
            &mut self.bn_mha.gamma,
            &mut self.bn_mha.beta,
            &mut self.ffn1.weight,
            &mut self.ffn1.bias,
            &mut self.ffn2.weight,
            &mut self.ffn2.bias,
            &mut self.bn_ffn.gamma,
            &mut self.bn_ffn.beta,
            &mut self.l_output.weight,
            &mut self.l_output.bias,
        ]
    }

    pub fn buffers(&self) -> [&Mat; 5] {
        [&self.pe, &self.bn_mha.running_mean, &self.bn_mha.running_var, &self.bn_ffn.running_mean, &self.bn_ffn.running_var]
    }

    pub fn buffers_mut(&mut self) -> [&mut Mat; 5] {
        [
            &mut self.pe,
            &mut self.bn_mha.running_mean,
            &mut self.bn_mha.running_var,
            &mut self.bn_ffn.running_mean,
            &mut self.bn_ffn.running_var,
        ]
    }

    /// Every named tensor, trained ones first.
    pub fn named_tensors(&self) -> Vec<(&'static str, &Mat)> {
        TRAINABLE.iter().copied().zip(self.trainable()).chain(BUFFERS.iter().copied().zip(self.buffers())).collect()
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients(self.trainable().map(|m| Mat::zeros(m.rows, m.cols)).to_vec())
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.config.validate()?;
        let c = self.config;
        let (m, d, f, o) = (c.input_dim, c.d_model, c.ffn_dim, c.output_dim);
        let expect: [(usize, usize); 20] = [
            (m, d), (1, d), (d, d), (1, d), (d, d), (1, d), (d, d), (1, d), (d, d), (1, d),
            (1, d), (1, d), (d, f), (1, f), (f, d), (1, d), (1, d), (1, d), (d, o), (1, o),
        ];
        for ((name, t), want) in TRAINABLE.iter().zip(self.trainable()).zip(expect) {
            if t.shape() != want {
                return Err(ModelError::Shape { what: name.to_string(), expected: want, found: t.shape() });
            }
        }
        for (name, t) in BUFFERS.iter().zip(self.buffers()) {
            let want = if *name == "pe.table" { (c.seq_len, d) } else { (1, d) };
            if t.shape() != want {
                return Err(ModelError::Shape { what: name.to_string(), expected: want, found: t.shape() });
            }
        }
        for bn in [&self.bn_mha, &self.bn_ffn] {
            if bn.running_var.data.iter().any(|&v| v.is_nan() || v <= 0.0) {
                return Err(ModelError::Config("batch-norm running variance must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Gradients for the trained tensors in [`TRAINABLE`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Mat>);

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Mat> {
        TRAINABLE.iter().position(|n| *n == name).map(|i| &self.0[i])
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.add_assign(b);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|m| m.data.iter().all(|v| v.is_finite()))
    }
}
