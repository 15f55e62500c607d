//! Model hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerMode {
    /// UTF-8 bytes as token ids; vocab_size must be >= 256.
    Byte,
    /// Rank-greedy BPE from vocab + merges files.
    Bpe,
}

/// Shapes and numerics of a decoder stack. Pre-layernorm GPT-2-style
/// blocks; 32-bit floats throughout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_mlp: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub ln_eps: f32,
    pub activation: Activation,
    pub tokenizer_mode: TokenizerMode,
}

impl ModelConfig {
    /// Byte-tokenizer config with standard defaults for the given shape.
    pub fn byte(n_layers: usize, d_model: usize, d_mlp: usize, n_heads: usize) -> Self {
        ModelConfig {
            n_layers,
            d_model,
            d_mlp,
            n_heads,
            vocab_size: 256,
            max_seq: 64,
            ln_eps: 1e-5,
            activation: Activation::Gelu,
            tokenizer_mode: TokenizerMode::Byte,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.d_mlp == 0 || self.n_heads == 0 {
            return Err(Error::BadConfig("all counts must be >= 1".into()));
        }
        if self.vocab_size == 0 || self.max_seq == 0 {
            return Err(Error::BadConfig("vocab_size and max_seq must be >= 1".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::BadConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::BadConfig("ln_eps must be > 0".into()));
        }
        if self.tokenizer_mode == TokenizerMode::Byte && self.vocab_size < 256 {
            return Err(Error::BadConfig(
                "byte tokenizer requires vocab_size >= 256".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validate_rejects_bad_shapes() {
        let mut cfg = ModelConfig::byte(2, 16, 32, 4);
        assert!(cfg.validate().is_ok());
        cfg.n_heads = 3;
        assert!(cfg.validate().is_err());
        cfg.n_heads = 4;
        cfg.ln_eps = 0.0;
        assert!(cfg.validate().is_err());
    }
}
