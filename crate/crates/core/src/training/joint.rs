//! Joint optimisation of translation and grouping.

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::curriculum::{curriculum_ratios, sample_epoch, CurriculumSchedule};
use crate::corpus::Verse;
use crate::decode::{translate_batch, DecodeOptions};
use crate::error::{Error, Result};
use crate::eval::{corpus_alignment_score, token_accuracy};
use crate::model::loss::scalar;
use crate::model::{Example, Model};

/// Optimiser and batching settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Linear learning-rate warm-up, in optimiser steps.
    pub warmup_steps: usize,
    /// Inverse square-root decay after warm-up; needs `warmup_steps > 0`.
    pub lr_decay: bool,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    /// Validation verses decoded after each epoch (0 skips decoding).
    pub val_limit: usize,
    /// Beam size for validation decoding.
    pub val_beam: usize,
    /// End with the parameters of the epoch with the best validation token
    /// accuracy plus alignment score.
    pub keep_best: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.01,
            batch_size: 32,
            warmup_steps: 100,
            lr_decay: true,
            clip_norm: 1.0,
            val_limit: 200,
            val_beam: 1,
            keep_best: true,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.weight_decay < 0.0 || self.clip_norm < 0.0 {
            return Err(Error::Config("weight_decay and clip_norm must be non-negative".into()));
        }
        if self.val_beam == 0 {
            return Err(Error::Config("val_beam must be at least 1".into()));
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub nll: f64,
    pub l_g: f64,
    pub val_token_acc: f64,
    pub val_as: f64,
}

/// Back-translated and annotated training pools.
#[derive(Debug, Clone, Default)]
pub struct Streams {
    pub bt: Vec<Verse>,
    pub at: Vec<Verse>,
}

/// Optimiser state shared by the training stages.
pub struct Trainer<'m> {
    model: &'m Model,
    opt: AdamW,
    opts: TrainOptions,
    step: usize,
}

/// Running means of the two loss terms over an epoch.
#[derive(Debug, Clone, Copy, Default)]
pub struct EpochLoss {
    pub nll: f64,
    pub l_g: f64,
    pub steps: usize,
}

impl<'m> Trainer<'m> {
    pub fn new(model: &'m Model, opts: TrainOptions) -> Result<Self> {
        opts.validate()?;
        let params = ParamsAdamW {
            lr: opts.lr,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            weight_decay: opts.weight_decay,
        };
        let opt = AdamW::new(model.params().vars(), params)?;
        Ok(Self { model, opt, opts, step: 0 })
    }

    pub fn options(&self) -> &TrainOptions {
        &self.opts
    }

    fn clip(&self, grads: &mut GradStore) -> Result<()> {
        if self.opts.clip_norm <= 0.0 {
            return Ok(());
        }
        let vars = self.model.params().vars();
        let mut sq = 0.0;
        for v in &vars {
            if let Some(g) = grads.get(v.as_tensor()) {
                sq += scalar(&g.sqr()?.sum_all()?)?;
            }
        }
        let norm = sq.sqrt();
        if norm > self.opts.clip_norm {
            let scale = self.opts.clip_norm / norm;
            for v in &vars {
                if let Some(g) = grads.remove(v.as_tensor()) {
                    grads.insert(v.as_tensor(), (g * scale)?);
                }
            }
        }
        Ok(())
    }

    fn lr_factor(&self) -> f64 {
        let (s, w) = ((self.step + 1) as f64, self.opts.warmup_steps as f64);
        if w == 0.0 {
            1.0
        } else if s < w {
            s / w
        } else if self.opts.lr_decay {
            (w / s).sqrt()
        } else {
            1.0
        }
    }

    /// One optimiser step on `examples`; returns `(nll, l_g)`.
    pub fn step(&mut self, examples: &[Example], epoch: usize) -> Result<(f64, f64)> {
        let batch = self.model.collate(examples)?;
        let out = self.model.teacher_forced_step(&batch)?;
        let nll = scalar(&out.nll)?;
        let l_g = match &out.grouping {
            Some(g) => scalar(g)?,
            None => 0.0,
        };
        if !nll.is_finite() || !l_g.is_finite() {
            return Err(Error::Divergence { epoch, step: self.step, detail: format!("nll={nll}, l_g={l_g}") });
        }
        let mut grads = out.loss.backward()?;
        self.clip(&mut grads)?;
        self.opt.set_learning_rate(self.opts.lr * self.lr_factor());
        self.opt.step(&grads)?;
        self.step += 1;
        Ok((nll, l_g))
    }

    /// Shuffles `examples` with `seed` and runs one pass in mini-batches.
    pub fn epoch(&mut self, mut examples: Vec<Example>, seed: u64, epoch: usize) -> Result<EpochLoss> {
        examples.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut acc = EpochLoss::default();
        for chunk in examples.chunks(self.opts.batch_size) {
            let (nll, l_g) = self.step(chunk, epoch)?;
            acc.nll += nll;
            acc.l_g += l_g;
            acc.steps += 1;
        }
        if acc.steps > 0 {
            acc.nll /= acc.steps as f64;
            acc.l_g /= acc.steps as f64;
        }
        Ok(acc)
    }
}

/// Token accuracy and alignment score of greedy or beam decodes on `val`.
pub fn validate(model: &Model, val: &[Verse], beam: usize) -> Result<(f64, f64)> {
    if val.is_empty() {
        return Ok((0.0, 0.0));
    }
    let opts = DecodeOptions { beam, ..DecodeOptions::default() };
    let mut pred_tokens = Vec::new();
    let mut pred_counts = Vec::new();
    for t in translate_batch(model, val, &opts) {
        match t {
            Ok(t) => {
                pred_tokens.push(t.tokens);
                pred_counts.push(t.counts);
            }
            // An undecodable verse scores as an empty prediction.
            Err(e) => {
                log::debug!("validation decode failed: {e}");
                pred_tokens.push(Vec::new());
                pred_counts.push(Vec::new());
            }
        }
    }
    let gold_tokens: Vec<Vec<String>> = val.iter().map(|v| v.tgt_tokens.clone()).collect();
    let gold_counts: Vec<Vec<u32>> = val.iter().map(|v| v.tgt_counts.clone()).collect();
    let acc = token_accuracy(&pred_tokens, &gold_tokens);
    let has_counts = gold_counts.iter().all(|c| !c.is_empty());
    let as_score = if has_counts { corpus_alignment_score(&pred_counts, &gold_counts)? } else { 0.0 };
    Ok((acc, as_score))
}

/// Trains with `nll + beta * l_g` over curriculum-mixed epochs. `on_epoch`
/// sees each epoch's metrics and returns `false` to stop early.
pub fn train_joint<F>(
    model: &Model,
    streams: &Streams,
    val: &[Verse],
    sched: &CurriculumSchedule,
    opts: &TrainOptions,
    mut on_epoch: F,
) -> Result<Vec<EpochMetrics>>
where
    F: FnMut(&EpochMetrics) -> bool,
{
    sched.validate()?;
    if streams.bt.is_empty() && streams.at.is_empty() {
        return Err(Error::EmptyInput("no training data".into()));
    }
    let cfg = model.config();
    let to_examples = |vs: &[Verse]| -> Result<Vec<Example>> {
        vs.iter().map(|v| Example::from_verse(v, model.vocab(), cfg)).collect()
    };
    let bt = to_examples(&streams.bt)?;
    let at = to_examples(&streams.at)?;
    let val = &val[..val.len().min(opts.val_limit)];
    let mut trainer = Trainer::new(model, opts.clone())?;
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, Vec<Tensor>)> = None;
    for e in 0..sched.total_epochs {
        let ratios = curriculum_ratios(e, sched)?;
        let seed = cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(e as u64);
        let stream = sample_epoch(&bt, &at, ratios, seed);
        let loss = trainer.epoch(stream, seed ^ 0x5555, e + 1)?;
        let (val_token_acc, val_as) = validate(model, val, opts.val_beam)?;
        let m = EpochMetrics { epoch: e + 1, nll: loss.nll, l_g: loss.l_g, val_token_acc, val_as };
        log::info!(
            "epoch {} bt={:.3} at={:.2} nll={:.4} l_g={:.4} val_acc={:.4} val_as={:.4}",
            m.epoch,
            ratios.0,
            ratios.1,
            m.nll,
            m.l_g,
            m.val_token_acc,
            m.val_as
        );
        let score = m.val_token_acc + m.val_as;
        if opts.keep_best && !val.is_empty() && best.as_ref().is_none_or(|b| score > b.0) {
            let snapshot = model.params().vars().iter().map(|v| v.as_tensor().copy()).collect::<candle_core::Result<_>>()?;
            best = Some((score, m.epoch, snapshot));
        }
        let go_on = on_epoch(&m);
        log.push(m);
        if !go_on {
            break;
        }
    }
    if let Some((_, epoch, snapshot)) = best {
        if epoch != log.len() {
            log::info!("restoring parameters from epoch {epoch}");
            for (v, t) in model.params().vars().iter().zip(&snapshot) {
                v.set(t)?;
            }
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Vocabulary;
    use crate::model::ModelConfig;
    use crate::training::synth::generate_synthetic_corpus;

    fn setup(beta: f64, n: usize) -> (Model, Vec<Verse>) {
        let corpus = generate_synthetic_corpus(5, n, 12).unwrap();
        let vocab = Vocabulary::build(corpus.verses.iter());
        let cfg = ModelConfig { beta, ..ModelConfig::small() };
        (Model::new(cfg, vocab).unwrap(), corpus.verses)
    }

    #[test]
    fn warmup_then_inverse_sqrt_decay() {
        let (model, _) = setup(0.8, 1);
        let mut t = Trainer::new(&model, TrainOptions::default()).unwrap();
        let mut at = |step: usize| {
            t.step = step;
            t.lr_factor()
        };
        assert_eq!(at(0), 0.01);
        assert_eq!(at(99), 1.0);
        assert_eq!(at(399), 0.5);
        let mut flat = Trainer::new(&model, TrainOptions { lr_decay: false, ..TrainOptions::default() }).unwrap();
        flat.step = 399;
        assert_eq!(flat.lr_factor(), 1.0);
    }

    #[test]
    fn memorises_a_small_fixture() {
        let (model, verses) = setup(0.8, 10);
        let opts = TrainOptions { lr: 3e-3, batch_size: 10, warmup_steps: 0, val_limit: 0, ..TrainOptions::default() };
        let streams = Streams { bt: Vec::new(), at: verses };
        let sched = CurriculumSchedule::flat(150, 1.0, 1.0);
        let log = train_joint(&model, &streams, &[], &sched, &opts, |_| true).unwrap();
        let last = log.last().unwrap();
        assert!(last.nll < 0.1, "final nll {}", last.nll);
        assert!(log.windows(2).all(|w| w[1].epoch == w[0].epoch + 1));
    }

    #[test]
    fn beta_zero_leaves_grouping_untouched() {
        let (model, verses) = setup(0.0, 8);
        let before = model.params().var("grouping.halt.weight").unwrap().to_vec2::<f32>().unwrap();
        let opts = TrainOptions { batch_size: 4, val_limit: 0, weight_decay: 0.0, ..TrainOptions::default() };
        let streams = Streams { bt: Vec::new(), at: verses };
        let log = train_joint(&model, &streams, &[], &CurriculumSchedule::flat(2, 1.0, 1.0), &opts, |_| true).unwrap();
        assert!(log.iter().all(|m| m.l_g == 0.0));
        let after = model.params().var("grouping.halt.weight").unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn runs_are_reproducible() {
        let run = || {
            let (model, verses) = setup(0.8, 12);
            let opts = TrainOptions { batch_size: 4, val_limit: 4, ..TrainOptions::default() };
            let streams = Streams { bt: verses[..4].to_vec(), at: verses[4..].to_vec() };
            train_joint(&model, &streams, &verses[..4], &CurriculumSchedule::new(2), &opts, |_| true).unwrap()
        };
        let a = serde_json::to_string(&run()).unwrap();
        let b = serde_json::to_string(&run()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn early_stop_is_honoured() {
        let (model, verses) = setup(0.8, 6);
        let opts = TrainOptions { val_limit: 0, ..TrainOptions::default() };
        let streams = Streams { bt: Vec::new(), at: verses };
        let log = train_joint(&model, &streams, &[], &CurriculumSchedule::flat(5, 1.0, 1.0), &opts, |m| m.epoch < 2).unwrap();
        assert_eq!(log.len(), 2);
    }
}
