//! Model hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which architecture a parameter vector belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Decoder-only language model over single sentences.
    Lm,
    /// Encoder-decoder translation model.
    Translator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Encoder and decoder depth (the LM uses only the decoder stack).
    #[serde(default = "default_layers")]
    pub n_layers: usize,
    #[serde(default = "default_d_model")]
    pub d_model: usize,
    #[serde(default = "default_heads")]
    pub n_heads: usize,
    /// Width of the position-wise feed-forward hidden layer.
    #[serde(default = "default_hidden")]
    pub d_hidden: usize,
    /// Maximum sequence length the position table covers.
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    pub vocab_size: usize,
    /// Dropout rate on residual branches; 0 disables it entirely.
    #[serde(default)]
    pub dropout: f64,
}

fn default_layers() -> usize {
    2
}
fn default_d_model() -> usize {
    64
}
fn default_heads() -> usize {
    2
}
fn default_hidden() -> usize {
    128
}
fn default_max_len() -> usize {
    64
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::InvalidConfig("n_layers must be >= 1".into()));
        }
        if self.d_model == 0 || self.d_model % 2 != 0 {
            return Err(Error::InvalidConfig(
                "d_model must be a positive even number".into(),
            ));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(
                "d_model must be divisible by n_heads".into(),
            ));
        }
        if self.d_hidden == 0 {
            return Err(Error::InvalidConfig("d_hidden must be >= 1".into()));
        }
        if self.max_len < 2 {
            return Err(Error::InvalidConfig("max_len must be >= 2".into()));
        }
        if self.vocab_size < crate::corpus::RESERVED {
            return Err(Error::InvalidConfig(format!(
                "vocab_size must cover the {} reserved ids",
                crate::corpus::RESERVED
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}
