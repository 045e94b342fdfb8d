//! Denoising auto-encoder pretraining on text alone.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::joint::{TrainOptions, Trainer};
use crate::corpus::{Domain, Lang, SpecialToken};
use crate::error::{Error, Result};
use crate::model::{Example, Model};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Chance that a kept token is replaced by `<unk>`.
    pub mask_prob: f64,
    /// Chance that a token is dropped.
    pub delete_prob: f64,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self { mask_prob: 0.1, delete_prob: 0.1, seed: 0 }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("mask_prob", self.mask_prob), ("delete_prob", self.delete_prob)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {p}")));
            }
        }
        Ok(())
    }

    /// Noisy copy of `ids`; never empty when `ids` is not.
    pub fn apply(&self, ids: &[u32], rng: &mut impl Rng) -> Vec<u32> {
        let mut out: Vec<u32> = Vec::with_capacity(ids.len());
        for &id in ids {
            if rng.gen_bool(self.delete_prob) {
                continue;
            }
            out.push(if rng.gen_bool(self.mask_prob) { SpecialToken::Unk.id() } else { id });
        }
        if out.is_empty() && !ids.is_empty() {
            out.push(ids[rng.gen_range(0..ids.len())]);
        }
        out
    }
}

/// A monolingual training line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextLine {
    pub lang: Lang,
    pub domain: Domain,
    pub tokens: Vec<String>,
}

/// Reconstructs clean lines from noised copies, with direction and domain
/// prefixes as in translation. Melody and alignment channels stay empty.
/// Returns the mean token loss of each epoch.
pub fn denoising_pretrain(
    model: &Model,
    corpus: &[TextLine],
    noise: &NoiseSpec,
    opts: &TrainOptions,
    epochs: usize,
) -> Result<Vec<f64>> {
    noise.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyInput("pretraining corpus is empty".into()));
    }
    let vocab = model.vocab();
    let mut trainer = Trainer::new(model, opts.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let mut losses = Vec::with_capacity(epochs);
    for e in 0..epochs {
        let examples: Vec<Example> = corpus
            .iter()
            .map(|line| {
                let clean = vocab.encode(&line.tokens);
                let noisy = noise.apply(&clean, &mut rng);
                let mut prefix = vec![SpecialToken::direction(line.lang).id(), SpecialToken::domain(line.domain).id()];
                if model.config().length_control {
                    prefix.push(vocab.length_token(clean.len()));
                }
                Example::text(&prefix, &noisy, &clean)
            })
            .collect();
        let loss = trainer.epoch(examples, noise.seed.wrapping_add(e as u64), e + 1)?;
        log::info!("pretrain epoch {} nll={:.4}", e + 1, loss.nll);
        losses.push(loss.nll);
    }
    Ok(losses)
}
