use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How prompt parameters are stored and transmitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reparam {
    /// Key/value prefixes are trained directly.
    Off,
    /// Prefixes are generated by an MLP with this hidden width from a seed matrix.
    Hidden(usize),
}

/// Shape of the server's global model and of the prompts plugged into it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// Prefix slots per layer.
    pub prefix_len: usize,
    pub reparam: Reparam,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_layers == 0 {
            return bad("n_layers must be >= 1");
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad("d_model must be a positive multiple of n_heads");
        }
        if self.prefix_len == 0 {
            return bad("prefix_len must be >= 1");
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 {
            return bad("vocab_size and max_seq_len must be >= 1");
        }
        if self.reparam == Reparam::Hidden(0) {
            return bad("reparametrization hidden size must be >= 1");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn mlp_dim(&self) -> usize {
        4 * self.d_model
    }
}
