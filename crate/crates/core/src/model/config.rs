use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Feed-forward hidden width as a multiple of the model width.
pub const FFN_MULT: usize = 4;
/// Standard deviation of every Gaussian weight init.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_enc: usize,
    pub d_llm: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    /// Learned Q-Former queries per branch.
    pub n_query: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            d_enc: 64,
            d_llm: 64,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            n_query: 8,
            max_seq: 256,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_enc", self.d_enc),
            ("d_llm", self.d_llm),
            ("n_heads", self.n_heads),
            ("n_query", self.n_query),
            ("max_seq", self.max_seq),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be >= 1")));
        }
        if !self.d_enc.is_multiple_of(self.n_heads) || !self.d_llm.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_enc ({}) and d_llm ({}) must be divisible by n_heads ({})",
                self.d_enc, self.d_llm, self.n_heads
            )));
        }
        if self.max_seq < 2 * self.n_query + 1 {
            return Err(Error::Config(format!(
                "max_seq {} leaves no room for text after {} modality tokens",
                self.max_seq,
                2 * self.n_query
            )));
        }
        Ok(())
    }

    /// Longest text (prompt plus answer) that fits after both modality segments.
    pub fn max_text_len(&self) -> usize {
        self.max_seq - 2 * self.n_query
    }
}
