//! Inference: beam search that emits each token together with its note
//! count, length-controlled decoding, and score export.

mod export;

pub use export::{export_score, ExportedScore, EXPORT_DIVISIONS};

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::alignment::{post_process_counts, TrimOrder};
use crate::corpus::{SpecialToken, Verse};
use crate::error::{Error, Result};
use crate::model::batch::{decoder_input, encoder_input, note_ids, prefix_tokens, side_tensors, Example, SideInput};
use crate::model::{classify_group_count, GroupingMode, Model};

pub const DEFAULT_BEAM: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOptions {
    pub beam: usize,
    /// Hard cap on emitted content tokens.
    pub max_len: usize,
    pub post_process: TrimOrder,
    /// Verses decoded together in one batched search.
    pub chunk: usize,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self { beam: DEFAULT_BEAM, max_len: 64, post_process: TrimOrder::default(), chunk: 32 }
    }
}

/// A partial or finished output sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub ids: Vec<u32>,
    /// Count per emitted content token (empty for text-only decoding).
    pub counts: Vec<u32>,
    pub logprob: f64,
    /// Notes consumed so far, clamped at the melody length.
    pub consumed: usize,
    pub finished: bool,
}

impl Hypothesis {
    fn start() -> Self {
        Self { ids: Vec::new(), counts: Vec::new(), logprob: 0.0, consumed: 0, finished: false }
    }
}

/// Decoder output for one verse.
#[derive(Debug, Clone, PartialEq)]
pub struct Translation {
    pub id: String,
    pub tokens: Vec<String>,
    pub ids: Vec<u32>,
    /// Counts as predicted, before reconciliation with the melody.
    pub raw_counts: Vec<u32>,
    /// Post-processed counts summing to the melody length.
    pub counts: Vec<u32>,
    pub logprob: f64,
}

/// Line of a prediction file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub tgt_tokens: Vec<String>,
    pub tgt_align: Vec<u32>,
    pub logprob: f64,
}

impl From<&Translation> for PredictionRecord {
    fn from(t: &Translation) -> Self {
        Self { id: t.id.clone(), tgt_tokens: t.tokens.clone(), tgt_align: t.counts.clone(), logprob: t.logprob }
    }
}

/// One search problem: encoder input, melody, and an optional exact length.
struct Job {
    example: Example,
    n_notes: usize,
    target_len: Option<usize>,
}

impl Job {
    /// Most content tokens a hypothesis may hold. With a melody, every token
    /// needs at least one note of its own.
    fn max_tokens(&self, max_len: usize) -> usize {
        let cap = self.target_len.unwrap_or(max_len).min(max_len);
        if self.n_notes > 0 {
            cap.min(self.n_notes)
        } else {
            cap
        }
    }
}

fn source_job(model: &Model, verse: &Verse, target_len: Option<usize>) -> Result<Job> {
    if !verse.has_source() {
        return Err(Error::Decode(format!("verse {} has no source tokens", verse.id)));
    }
    let vocab = model.vocab();
    let src = vocab.encode(&verse.src_tokens);
    let n = verse.n_notes();
    let prefix = prefix_tokens(vocab, verse, model.config(), target_len.unwrap_or(n.max(1)));
    let counts = verse.has_source_alignment().then_some(verse.src_counts.as_slice());
    Ok(Job {
        example: Example {
            src: encoder_input(&prefix, &src, counts, n),
            tgt_in: decoder_input(&[], None, n),
            tgt_out: Vec::new(),
            notes: note_ids(verse)?,
            gold_counts: None,
        },
        n_notes: n,
        target_len,
    })
}

/// Token ids that may never be emitted: everything reserved except EOS.
fn banned_ids(model: &Model) -> Vec<u32> {
    (0..model.vocab().len() as u32)
        .filter(|&id| !model.vocab().is_content(id) && id != SpecialToken::Eos.id())
        .collect()
}

/// Batched beam search over several jobs. Returns the best hypothesis per
/// job.
fn search(model: &Model, jobs: &[Job], opts: &DecodeOptions) -> Result<Vec<Hypothesis>> {
    if opts.beam == 0 {
        return Err(Error::Config("beam size must be at least 1".into()));
    }
    let examples: Vec<Example> = jobs.iter().map(|j| j.example.clone()).collect();
    let batch = model.collate(&examples)?;
    let enc = model.encode(&batch)?;
    let device = model.params().device().clone();
    let eos = SpecialToken::Eos.id();
    let banned = banned_ids(model);

    let mut beams: Vec<Vec<Hypothesis>> = vec![vec![Hypothesis::start()]; jobs.len()];
    let max_steps = jobs
        .iter()
        .map(|j| j.max_tokens(opts.max_len))
        .max()
        .unwrap_or(0)
        + 1;
    for _ in 0..max_steps {
        let alive: Vec<(usize, usize)> = beams
            .iter()
            .enumerate()
            .flat_map(|(v, hs)| hs.iter().enumerate().filter(|(_, h)| !h.finished).map(move |(i, _)| (v, i)))
            .collect();
        if alive.is_empty() {
            break;
        }
        let inputs: Vec<SideInput> = alive
            .iter()
            .map(|&(v, i)| {
                let h = &beams[v][i];
                let counts = (jobs[v].n_notes > 0 && h.counts.len() == h.ids.len()).then_some(h.counts.as_slice());
                decoder_input(&h.ids, counts, jobs[v].n_notes)
            })
            .collect();
        let t = inputs.iter().map(|s| s.ids.len()).max().unwrap_or(1);
        let refs: Vec<&SideInput> = inputs.iter().collect();
        let side = side_tensors(&refs, t, batch.max_notes, model.config().ratio_bins, &device, model.dtype())?;
        let rows = Tensor::from_vec(alive.iter().map(|&(v, _)| v as u32).collect::<Vec<_>>(), alive.len(), &device)?;
        let dec = model.decode(&enc, &side, Some(&rows))?;
        let positions: Vec<u32> = inputs.iter().enumerate().map(|(r, s)| (r * t + s.ids.len() - 1) as u32).collect();
        let positions = Tensor::from_vec(positions, alive.len(), &device)?;
        let (h, tt, d) = dec.hidden.dims3()?;
        let last = dec.hidden.reshape((h * tt, d))?.index_select(&positions, 0)?;
        let logp = candle_nn::ops::log_softmax(&model.logits(&last)?, D::Minus1)?
            .to_dtype(DType::F64)?
            .to_vec2::<f64>()?;

        // Group sizes depend only on the parent state, so they are computed
        // once per live hypothesis.
        let mut next_count = vec![1u32; alive.len()];
        {
            let grouped: Vec<usize> = (0..alive.len())
                .filter(|&r| {
                    let (v, i) = alive[r];
                    jobs[v].n_notes > beams[v][i].consumed
                })
                .collect();
            if !grouped.is_empty() {
                let sel = Tensor::from_vec(grouped.iter().map(|&r| r as u32).collect::<Vec<_>>(), grouped.len(), &device)?;
                let pos = positions.index_select(&sel, 0)?;
                let remaining: Vec<usize> = grouped
                    .iter()
                    .map(|&r| {
                        let (v, i) = alive[r];
                        jobs[v].n_notes - beams[v][i].consumed
                    })
                    .collect();
                let counts: Vec<usize> = match model.config().grouping {
                    GroupingMode::Adaptive => {
                        let enc_rows = rows.index_select(&sel, 0)?;
                        let src_align = enc.src_align.index_select(&enc_rows, 0)?;
                        let n_notes = grouped.iter().map(|&r| jobs[alive[r].0].n_notes).collect();
                        let run = model.run_grouping(&dec, &src_align, &pos, remaining.clone(), n_notes)?;
                        run.outcomes.iter().map(|o| o.k).collect()
                    }
                    GroupingMode::Classifier => {
                        let logits = model.classify_counts(&dec, &pos)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
                        logits
                            .iter()
                            .zip(&remaining)
                            .map(|(l, &rem)| classify_group_count(l).min(rem))
                            .collect()
                    }
                };
                for (&r, &k) in grouped.iter().zip(&counts) {
                    next_count[r] = k as u32;
                }
            }
        }

        let mut candidates: Vec<Vec<Hypothesis>> = beams
            .iter()
            .map(|hs| hs.iter().filter(|h| h.finished).cloned().collect())
            .collect();
        for (r, &(v, i)) in alive.iter().enumerate() {
            let parent = &beams[v][i];
            let job = &jobs[v];
            let len = parent.ids.len();
            let must_stop = len >= job.max_tokens(opts.max_len);
            let mut scores = logp[r].clone();
            for &b in &banned {
                scores[b as usize] = f64::NEG_INFINITY;
            }
            if must_stop {
                scores.iter_mut().enumerate().for_each(|(id, s)| {
                    if id as u32 != eos {
                        *s = f64::NEG_INFINITY
                    }
                });
                scores[eos as usize] = logp[r][eos as usize].max(f64::MIN);
            } else if job.target_len.is_some() || len == 0 {
                scores[eos as usize] = f64::NEG_INFINITY;
            }
            let mut order: Vec<usize> = (0..scores.len()).filter(|&id| scores[id].is_finite()).collect();
            if order.is_empty() {
                return Err(Error::Decode("every token is masked at this step".into()));
            }
            order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
            for &id in order.iter().take(opts.beam) {
                let mut child = parent.clone();
                child.logprob += scores[id];
                if id as u32 == eos {
                    child.finished = true;
                } else {
                    child.ids.push(id as u32);
                    if job.n_notes > 0 {
                        let k = next_count[r];
                        child.counts.push(k);
                        child.consumed = (child.consumed + k as usize).min(job.n_notes);
                    }
                }
                candidates[v].push(child);
            }
        }
        for (v, mut cands) in candidates.into_iter().enumerate() {
            if cands.is_empty() {
                continue;
            }
            cands.sort_by(|a, b| b.logprob.total_cmp(&a.logprob));
            cands.truncate(opts.beam);
            beams[v] = cands;
        }
    }
    Ok(beams
        .into_iter()
        .map(|hs| {
            let mut best = hs
                .iter()
                .filter(|h| h.finished)
                .max_by(|a, b| a.logprob.total_cmp(&b.logprob).then(b.ids.cmp(&a.ids)))
                .or_else(|| hs.first())
                .cloned()
                .unwrap_or_else(Hypothesis::start);
            best.finished = true;
            best
        })
        .collect())
}

fn finish(model: &Model, verse: &Verse, hyp: Hypothesis, opts: &DecodeOptions) -> Result<Translation> {
    let tokens = model.vocab().decode(&hyp.ids);
    let n = verse.n_notes();
    let counts = if n == 0 {
        Vec::new()
    } else {
        let raw = if hyp.counts.len() == hyp.ids.len() { hyp.counts.clone() } else { vec![1; hyp.ids.len()] };
        post_process_counts(&raw, n, opts.post_process).map_err(|e| {
            Error::Decode(format!("{e}; raw hypothesis {:?} with counts {:?}", tokens, hyp.counts))
        })?
    };
    Ok(Translation { id: verse.id.clone(), tokens, ids: hyp.ids, raw_counts: hyp.counts, counts, logprob: hyp.logprob })
}

/// Translates several source verses, in chunks of `opts.chunk` verses per
/// batched search. Target-side fields of the inputs are ignored.
pub fn translate_batch(model: &Model, sources: &[Verse], opts: &DecodeOptions) -> Vec<Result<Translation>> {
    let chunks: Vec<&[Verse]> = sources.chunks(opts.chunk.max(1)).collect();
    crate::par::map(&chunks, |chunk| translate_chunk(model, chunk, opts)).into_iter().flatten().collect()
}

fn translate_chunk(model: &Model, chunk: &[Verse], opts: &DecodeOptions) -> Vec<Result<Translation>> {
    let jobs: Vec<Result<Job>> = chunk.iter().map(|v| source_job(model, &v.source_only(), None)).collect();
    let ok: Vec<Job> = jobs.iter().filter_map(|j| j.as_ref().ok()).map(clone_job).collect();
    let mut found = match search(model, &ok, opts) {
        Ok(h) => h.into_iter(),
        Err(e) => return chunk.iter().map(|_| Err(Error::Decode(e.to_string()))).collect(),
    };
    chunk
        .iter()
        .zip(jobs)
        .map(|(v, job)| {
            job?;
            finish(model, v, found.next().expect("one hypothesis per job"), opts)
        })
        .collect()
}

fn clone_job(j: &Job) -> Job {
    Job { example: j.example.clone(), n_notes: j.n_notes, target_len: j.target_len }
}

/// Beam search for one source verse: tokens plus post-processed counts.
pub fn beam_translate(model: &Model, source: &Verse, opts: &DecodeOptions) -> Result<Translation> {
    let job = source_job(model, &source.source_only(), None)?;
    let hyp = search(model, &[job], opts)?.pop().expect("one job");
    finish(model, source, hyp, opts)
}

/// Decodes exactly `target_len` content tokens: EOS is masked until then
/// and forced afterwards.
pub fn length_controlled_decode(
    model: &Model,
    source: &Verse,
    target_len: usize,
    opts: &DecodeOptions,
) -> Result<Vec<String>> {
    if target_len == 0 {
        return Err(Error::Domain("target length must be at least 1".into()));
    }
    let opts = DecodeOptions { max_len: target_len.max(opts.max_len), ..opts.clone() };
    let job = source_job(model, &source.source_only(), Some(target_len))?;
    let hyp = search(model, &[job], &opts)?.pop().expect("one job");
    if hyp.ids.len() != target_len {
        return Err(Error::Decode(format!("produced {} tokens instead of {target_len}", hyp.ids.len())));
    }
    Ok(model.vocab().decode(&hyp.ids))
}
