//! Adaptive note grouping.
//!
//! For each decoded token a small recurrent network emits halting
//! probabilities `alpha_1, alpha_2, ...`; the token takes `K` notes, where
//! `K` is the first index whose running sum reaches `1 - epsilon`, capped at
//! `min(k_max, remaining notes)`. The remainder `R = 1 - sum_{k<K} alpha_k`
//! completes the halting distribution.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use super::layers::{causal_mask, EncoderLayer, Linear};
use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupingOutcome {
    /// Halting probabilities up to and including the halting step.
    pub alphas: Vec<f64>,
    /// Number of notes assigned to the token.
    pub k: usize,
    /// `1 - sum_{k < K} alpha_k`.
    pub remainder: f64,
}

impl GroupingOutcome {
    /// Sum of the halting probabilities before the halting step.
    pub fn pre_halt_mass(&self) -> f64 {
        self.alphas[..self.k - 1].iter().sum()
    }
}

/// Incremental halting rule; feed probabilities one at a time.
#[derive(Debug, Clone)]
pub struct Halting {
    threshold: f64,
    cap: usize,
    sum: f64,
    alphas: Vec<f64>,
}

impl Halting {
    pub fn new(epsilon: f64, cap: usize) -> Self {
        assert!(cap >= 1, "halting cap must be at least 1");
        Self { threshold: 1.0 - epsilon, cap, sum: 0.0, alphas: Vec::new() }
    }

    /// Returns the outcome once this probability halts the process.
    pub fn push(&mut self, alpha: f64) -> Option<GroupingOutcome> {
        let before = self.sum;
        self.sum += alpha;
        self.alphas.push(alpha);
        let k = self.alphas.len();
        if self.sum >= self.threshold || k >= self.cap {
            Some(GroupingOutcome { alphas: std::mem::take(&mut self.alphas), k, remainder: 1.0 - before })
        } else {
            None
        }
    }
}

/// Applies the halting rule to a precomputed probability sequence. The
/// sequence must be long enough to reach a halt.
pub fn halt(alphas: &[f64], epsilon: f64, cap: usize) -> Result<GroupingOutcome> {
    if cap == 0 {
        return Err(Error::Domain("no unaligned notes remain; grouping cannot run".into()));
    }
    let mut state = Halting::new(epsilon, cap);
    for &a in alphas {
        if let Some(out) = state.push(a) {
            return Ok(out);
        }
    }
    Err(Error::Shape(format!("{} halting probabilities never halt", alphas.len())))
}

/// Largest group a token may take given the notes still unaligned.
pub fn group_cap(k_max: usize, remaining: usize) -> usize {
    k_max.min(remaining)
}

/// Per-token inputs to the grouping network, stacked over `P` tokens.
pub struct GroupingInputs {
    /// Last decoder layer state that predicted the token, `(P, d)`.
    pub hidden: Tensor,
    /// Mean source alignment embedding of the token's verse, `(P, d)`.
    pub src_align: Tensor,
    /// Target alignment embedding at the preceding position, `(P, d)`.
    pub last_align: Tensor,
    /// Unaligned notes before the token.
    pub remaining: Vec<usize>,
    /// Melody length of the token's verse.
    pub n_notes: Vec<usize>,
}

/// Result of running the grouping network over a batch of tokens.
pub struct GroupingRun {
    /// `(P, iterations)`; entries past a token's halting step are unused.
    pub alphas: Tensor,
    pub outcomes: Vec<GroupingOutcome>,
}

/// The grouping network `g`: the five inputs (previous state, pooled source
/// alignment, last target alignment, projected remaining-note fraction and
/// projected iteration index) are summed and passed through a two-layer
/// feed-forward net; a linear layer and sigmoid give the halting probability.
#[derive(Debug, Clone)]
pub struct AlignmentDecoder {
    remaining_proj: Linear,
    step_proj: Linear,
    ff_in: Linear,
    ff_out: Linear,
    halt: Linear,
    k_max: usize,
    epsilon: f64,
}

impl AlignmentDecoder {
    pub fn new(ps: &ParamStore, name: &str, d: usize, k_max: usize, epsilon: f64) -> Result<Self> {
        Ok(Self {
            remaining_proj: Linear::new(ps, &format!("{name}.remaining_proj"), 1, d)?,
            step_proj: Linear::new(ps, &format!("{name}.step_proj"), 1, d)?,
            ff_in: Linear::new(ps, &format!("{name}.ff_in"), d, d)?,
            ff_out: Linear::new(ps, &format!("{name}.ff_out"), d, d)?,
            halt: Linear::new(ps, &format!("{name}.halt"), d, 1)?,
            k_max,
            epsilon,
        })
    }

    pub fn run(&self, inputs: &GroupingInputs) -> Result<GroupingRun> {
        let p = inputs.remaining.len();
        if let Some(i) = inputs.remaining.iter().position(|&r| r == 0) {
            return Err(Error::Domain(format!("token {i} has no unaligned notes left to group")));
        }
        let device = inputs.hidden.device();
        let dtype = inputs.hidden.dtype();
        let caps: Vec<usize> = inputs.remaining.iter().map(|&r| group_cap(self.k_max, r)).collect();
        let frac: Vec<f64> = inputs
            .remaining
            .iter()
            .zip(&inputs.n_notes)
            .map(|(&r, &n)| r as f64 / n.max(1) as f64)
            .collect();
        let frac = Tensor::from_vec(frac, (p, 1), device)?.to_dtype(dtype)?;
        let base = (inputs.src_align.clone() + &inputs.last_align)?
            .add(&self.remaining_proj.forward(&frac)?)?;

        let mut state: Vec<Option<Halting>> =
            caps.iter().map(|&c| Some(Halting::new(self.epsilon, c))).collect();
        let mut outcomes: Vec<Option<GroupingOutcome>> = vec![None; p];
        let mut columns = Vec::new();
        let mut h = inputs.hidden.clone();
        let max_iter = caps.iter().copied().max().unwrap_or(0);
        for k in 1..=max_iter {
            let step = Tensor::full((k - 1) as f64 / self.k_max as f64, (1, 1), device)?.to_dtype(dtype)?;
            let x = h.add(&base)?.broadcast_add(&self.step_proj.forward(&step)?)?;
            h = self.ff_out.forward(&self.ff_in.forward(&x)?.relu()?)?;
            let alpha = candle_nn::ops::sigmoid(&self.halt.forward(&h)?)?;
            let host = alpha.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
            columns.push(alpha);
            let mut pending = false;
            for (i, slot) in state.iter_mut().enumerate() {
                if let Some(st) = slot {
                    if let Some(out) = st.push(host[i]) {
                        outcomes[i] = Some(out);
                        *slot = None;
                    } else {
                        pending = true;
                    }
                }
            }
            if !pending {
                break;
            }
        }
        let alphas = if columns.is_empty() {
            Tensor::zeros((p, 0), dtype, device)?
        } else {
            Tensor::cat(&columns, 1)?
        };
        let outcomes = outcomes.into_iter().map(|o| o.expect("every token halts by its cap")).collect();
        Ok(GroupingRun { alphas, outcomes })
    }
}

/// Classifier baseline: one causal transformer layer over the decoder
/// states, then a linear map onto counts `1..=k_max`.
#[derive(Debug, Clone)]
pub struct CountClassifier {
    layer: EncoderLayer,
    proj: Linear,
}

impl CountClassifier {
    pub fn new(ps: &ParamStore, name: &str, d: usize, heads: usize, ffn: usize, k_max: usize) -> Result<Self> {
        Ok(Self {
            layer: EncoderLayer::new(ps, &format!("{name}.layer"), d, heads, ffn)?,
            proj: Linear::new(ps, &format!("{name}.proj"), d, k_max)?,
        })
    }

    /// `(B, T, d)` decoder states to `(B, T, k_max)` count logits.
    pub fn forward(&self, hidden: &Tensor) -> Result<Tensor> {
        let t = hidden.dim(1)?;
        let mask = causal_mask(t, hidden.device())?.to_dtype(hidden.dtype())?;
        let h = self.layer.forward(hidden, Some(&mask))?;
        self.proj.forward(&h)
    }
}

/// Softmax over count logits.
pub fn count_distribution(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Index of the largest value; ties go to the smallest index.
pub fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Predicted count from classifier logits (classes are counts `1..`).
pub fn classify_group_count(logits: &[f64]) -> usize {
    argmax_first(logits) + 1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn halting_examples() {
        let out = halt(&[0.96], 0.05, 30).unwrap();
        assert_eq!((out.k, out.remainder), (1, 1.0));

        let out = halt(&[0.3, 0.4, 0.5], 0.05, 30).unwrap();
        assert_eq!(out.k, 3);
        assert!((out.remainder - 0.3).abs() < 1e-12);

        let out = halt(&[1e-9, 1e-9, 1e-9], 0.05, 2).unwrap();
        assert_eq!(out.k, 2);
        assert_eq!(out.alphas.len(), 2);

        assert!(halt(&[0.1], 0.05, 0).is_err());
        assert!(halt(&[0.1], 0.05, 5).is_err());
    }

    #[test]
    fn halting_always_takes_at_least_one_note() {
        for eps in [0.001, 0.05, 0.5, 0.999] {
            let out = halt(&[1.0], eps, 30).unwrap();
            assert_eq!(out.k, 1);
            assert_eq!(out.remainder, 1.0);
        }
    }

    #[test]
    fn classifier_helpers() {
        assert_eq!(classify_group_count(&[0.0; 30]), 1);
        let mut one_hot = vec![0.0; 30];
        one_hot[2] = 5.0;
        assert_eq!(classify_group_count(&one_hot), 3);
        let dist = count_distribution(&[0.3, -1.0, 2.0, 0.0]);
        assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert_eq!(argmax_first(&dist), 2);
    }
}
