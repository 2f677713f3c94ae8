use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub seq_len: usize,
    pub input_dim: usize,
    pub d_model: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub output_dim: usize,
}

impl ModelConfig {
    pub fn new(seq_len: usize, input_dim: usize, d_model: usize) -> Result<Self, ModelError> {
        let c = ModelConfig { seq_len, input_dim, d_model, ffn_dim: 4 * d_model, heads: 1, output_dim: 1 };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.seq_len == 0 || self.input_dim == 0 || self.d_model == 0 || self.output_dim == 0 {
            return bad("dimensions must be positive");
        }
        if self.ffn_dim != 4 * self.d_model {
            return bad("ffn_dim must be 4 * d_model");
        }
        if self.heads != 1 {
            return bad("only a single attention head is supported");
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { seq_len: 12, input_dim: 1, d_model: 64, ffn_dim: 256, heads: 1, output_dim: 1 }
    }
}
