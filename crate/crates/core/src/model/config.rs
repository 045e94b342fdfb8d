use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the decoder predicts the number of notes per token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupingMode {
    /// Halting-probability adaptive grouping.
    Adaptive,
    /// Transformer-layer classifier over 1..=k_max counts.
    Classifier,
}

impl std::str::FromStr for GroupingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive" => Ok(GroupingMode::Adaptive),
            "classifier" => Ok(GroupingMode::Classifier),
            other => Err(Error::Config(format!("unknown grouping mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for GroupingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GroupingMode::Adaptive => "adaptive",
            GroupingMode::Classifier => "classifier",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers_enc: usize,
    pub n_layers_dec: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    /// Rows of the MIDI pitch table.
    pub midi_table: usize,
    /// Rows of the duration-class table.
    pub dur_table: usize,
    /// Equal-width bins over (0, 1] for cumulative alignment ratios.
    pub ratio_bins: usize,
    /// Halting threshold slack: grouping halts once the running sum of
    /// halting probabilities reaches `1 - epsilon`.
    pub epsilon: f64,
    /// Most notes one token may take.
    pub k_max: usize,
    /// Loss weight of tokens aligned to more than one note.
    pub w_multi: f64,
    /// Weight of the grouping loss in the joint objective.
    pub beta: f64,
    pub conv_kernel: usize,
    pub seed: u64,
    pub grouping: GroupingMode,
    /// Pooled melody embedding channel.
    pub use_melody: bool,
    /// Cumulative-ratio alignment embedding channel, including its inputs
    /// to the grouping network.
    pub use_align: bool,
    /// Source sequences carry a `<len_n>` token giving the output length.
    pub length_control: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 256,
            n_layers_enc: 3,
            n_layers_dec: 3,
            n_heads: 4,
            ffn_dim: 1024,
            midi_table: 128,
            dur_table: 31,
            ratio_bins: 32,
            epsilon: 0.05,
            k_max: 30,
            w_multi: 5.0,
            beta: 0.8,
            conv_kernel: 3,
            seed: 0,
            grouping: GroupingMode::Adaptive,
            use_melody: true,
            use_align: true,
            length_control: false,
        }
    }
}

impl ModelConfig {
    /// Desk-scale configuration used for the synthetic experiments.
    pub fn small() -> Self {
        Self {
            d_model: 64,
            n_layers_enc: 2,
            n_layers_dec: 2,
            n_heads: 4,
            ffn_dim: 128,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return fail(format!("epsilon must lie in (0, 1), got {}", self.epsilon));
        }
        if self.k_max < 1 {
            return fail("k_max must be at least 1".into());
        }
        if self.ratio_bins < 1 {
            return fail("ratio_bins must be at least 1".into());
        }
        if !(self.beta >= 0.0) {
            return fail(format!("beta must be non-negative, got {}", self.beta));
        }
        if !(self.w_multi >= 1.0) {
            return fail(format!("w_multi must be at least 1, got {}", self.w_multi));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.ffn_dim == 0 || self.conv_kernel == 0 {
            return fail("ffn_dim and conv_kernel must be positive".into());
        }
        if self.midi_table != 128 {
            return fail(format!("midi_table must be 128, got {}", self.midi_table));
        }
        if self.dur_table != crate::corpus::DURATION_BINS {
            return fail(format!(
                "dur_table must be {}, got {}",
                crate::corpus::DURATION_BINS,
                self.dur_table
            ));
        }
        Ok(())
    }
}
