//! Host-side layout of model inputs.
//!
//! Source sequences are `[direction, domain, (<len_n>), x_1..x_L, EOS]`;
//! decoder inputs are `[BOS, y_1..y_L]` predicting `[y_1..y_L, EOS]`. A
//! content position carries the block of notes aligned to its own token and
//! the cumulative alignment ratio after that token; special positions carry
//! neither.

use candle_core::{DType, Device, Tensor};

use super::config::ModelConfig;
use crate::alignment::bin_ratio;
use crate::corpus::{SpecialToken, Verse, Vocabulary};
use crate::error::{Error, Result};

/// Melody block and cumulative ratio attached to one sequence position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Slot {
    pub start: usize,
    pub end: usize,
    pub ratio: f64,
}

/// Token ids of one sequence with the melody slot of each position.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SideInput {
    pub ids: Vec<u32>,
    pub slots: Vec<Option<Slot>>,
}

/// Slots for content tokens with the given counts over `n_notes` notes.
/// Running totals past the melody are clamped to its end, so overflowing
/// hypotheses get empty blocks and ratio 1.
pub fn content_slots(counts: &[u32], n_notes: usize) -> Vec<Option<Slot>> {
    if n_notes == 0 {
        return vec![None; counts.len()];
    }
    let mut s = 0usize;
    counts
        .iter()
        .map(|&c| {
            let start = s.min(n_notes);
            s += c as usize;
            let end = s.min(n_notes);
            Some(Slot { start, end, ratio: end.max(1) as f64 / n_notes as f64 })
        })
        .collect()
}

/// Encoder input: prefix tokens, content, EOS.
pub fn encoder_input(prefix: &[u32], tokens: &[u32], counts: Option<&[u32]>, n_notes: usize) -> SideInput {
    let mut ids = prefix.to_vec();
    ids.extend_from_slice(tokens);
    ids.push(SpecialToken::Eos.id());
    let mut slots = vec![None; prefix.len()];
    match counts {
        Some(c) => slots.extend(content_slots(c, n_notes)),
        None => slots.extend(std::iter::repeat(None).take(tokens.len())),
    }
    slots.push(None);
    SideInput { ids, slots }
}

/// Decoder input `[BOS, y_1..]`.
pub fn decoder_input(tokens: &[u32], counts: Option<&[u32]>, n_notes: usize) -> SideInput {
    let mut ids = vec![SpecialToken::Bos.id()];
    ids.extend_from_slice(tokens);
    let mut slots = vec![None];
    match counts {
        Some(c) => slots.extend(content_slots(c, n_notes)),
        None => slots.extend(std::iter::repeat(None).take(tokens.len())),
    }
    SideInput { ids, slots }
}

/// One training or decoding example.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub src: SideInput,
    pub tgt_in: SideInput,
    /// Shifted targets, `[y_1..y_L, EOS]`; empty at inference.
    pub tgt_out: Vec<u32>,
    /// `(midi, duration class)` per note.
    pub notes: Vec<(u32, u32)>,
    /// Gold target counts; drives the grouping loss.
    pub gold_counts: Option<Vec<u32>>,
}

/// Prefix tokens for a translation into `lang_tgt`.
pub fn prefix_tokens(vocab: &Vocabulary, verse: &Verse, cfg: &ModelConfig, out_len: usize) -> Vec<u32> {
    let mut p = vec![
        SpecialToken::direction(verse.lang_tgt).id(),
        SpecialToken::domain(verse.domain_tag).id(),
    ];
    if cfg.length_control {
        p.push(vocab.length_token(out_len));
    }
    p
}

pub fn note_ids(verse: &Verse) -> Result<Vec<(u32, u32)>> {
    verse
        .notes
        .iter()
        .map(|n| Ok((n.pitch()? as u32, n.dur_bin()? as u32)))
        .collect()
}

impl Example {
    /// Teacher-forced example from a parallel verse.
    pub fn from_verse(verse: &Verse, vocab: &Vocabulary, cfg: &ModelConfig) -> Result<Self> {
        if !verse.has_source() || verse.tgt_tokens.is_empty() {
            return Err(Error::Shape(format!("verse {} lacks a parallel side", verse.id)));
        }
        let n = verse.n_notes();
        let src = vocab.encode(&verse.src_tokens);
        let tgt = vocab.encode(&verse.tgt_tokens);
        let src_counts = verse.has_source_alignment().then_some(verse.src_counts.as_slice());
        let tgt_counts = (!verse.tgt_counts.is_empty()).then_some(verse.tgt_counts.as_slice());
        let prefix = prefix_tokens(vocab, verse, cfg, tgt.len());
        let mut tgt_out = tgt.clone();
        tgt_out.push(SpecialToken::Eos.id());
        Ok(Self {
            src: encoder_input(&prefix, &src, src_counts, n),
            tgt_in: decoder_input(&tgt, tgt_counts, n),
            tgt_out,
            notes: note_ids(verse)?,
            gold_counts: tgt_counts.map(|c| c.to_vec()),
        })
    }

    /// Text-only example with explicit prefix.
    pub fn text(prefix: &[u32], src: &[u32], tgt: &[u32]) -> Self {
        let mut tgt_out = tgt.to_vec();
        tgt_out.push(SpecialToken::Eos.id());
        Self {
            src: encoder_input(prefix, src, None, 0),
            tgt_in: decoder_input(tgt, None, 0),
            tgt_out,
            notes: Vec::new(),
            gold_counts: None,
        }
    }

    /// Number of predicted target positions, EOS included.
    pub fn n_targets(&self) -> usize {
        self.tgt_out.len()
    }
}

/// Melody channel inputs for one side of a batch.
#[derive(Debug, Clone)]
pub struct SideTensors {
    /// `(B, T)` token ids.
    pub ids: Tensor,
    /// `(B, T, N_max)` mean-pooling weights.
    pub pool: Tensor,
    /// `(B, T)` ratio bin per position (0 where masked).
    pub bins: Tensor,
    /// `(B, T, 1)`, 1 at positions with an alignment ratio.
    pub align_mask: Tensor,
}

/// Tokens whose group size is supervised.
#[derive(Debug, Clone)]
pub struct GroupingBatch {
    /// Flat `(B * T_tgt)` index of the decoder position predicting the token.
    pub positions: Tensor,
    /// Verse (batch row) of each token.
    pub rows: Tensor,
    pub remaining: Vec<usize>,
    pub n_notes: Vec<usize>,
    pub gold: Vec<u32>,
    /// Index into `verse_notes` per token.
    pub verse_of: Vec<usize>,
    /// Melody length per supervised verse.
    pub verse_notes: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub size: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    pub max_notes: usize,
    pub src: SideTensors,
    pub tgt: SideTensors,
    /// `(B, 1, 1, T_src)` additive key-padding mask.
    pub src_key_mask: Tensor,
    /// `(B, 1, T_src)` mean weights over source content positions with a ratio.
    pub src_align_mean: Tensor,
    /// `(B, N_max)` pitch and duration ids (0 for padding).
    pub note_midi: Tensor,
    pub note_dur: Tensor,
    /// `(B * T_tgt)` shifted target ids and their weights (0 on padding).
    pub tgt_out: Tensor,
    pub tgt_weight: Tensor,
    pub n_targets: usize,
    pub grouping: Option<GroupingBatch>,
}

pub fn side_tensors(
    sides: &[&SideInput],
    t: usize,
    n_max: usize,
    bins: usize,
    device: &Device,
    dtype: DType,
) -> Result<SideTensors> {
    let b = sides.len();
    let mut ids = vec![SpecialToken::Pad.id(); b * t];
    let mut pool = vec![0f32; b * t * n_max.max(1)];
    let mut bin_ids = vec![0u32; b * t];
    let mut mask = vec![0f32; b * t];
    let n_cols = n_max.max(1);
    for (r, side) in sides.iter().enumerate() {
        for (p, (&id, slot)) in side.ids.iter().zip(&side.slots).enumerate() {
            ids[r * t + p] = id;
            if let Some(s) = slot {
                let width = s.end - s.start;
                for i in s.start..s.end {
                    pool[(r * t + p) * n_cols + i] = 1.0 / width as f32;
                }
                bin_ids[r * t + p] = bin_ratio(s.ratio, bins)? as u32;
                mask[r * t + p] = 1.0;
            }
        }
    }
    Ok(SideTensors {
        ids: Tensor::from_vec(ids, (b, t), device)?,
        pool: Tensor::from_vec(pool, (b, t, n_cols), device)?.to_dtype(dtype)?,
        bins: Tensor::from_vec(bin_ids, (b, t), device)?,
        align_mask: Tensor::from_vec(mask, (b, t, 1), device)?.to_dtype(dtype)?,
    })
}

impl Batch {
    pub fn collate(examples: &[Example], ratio_bins: usize, device: &Device, dtype: DType) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::EmptyInput("cannot collate an empty batch".into()));
        }
        for (i, ex) in examples.iter().enumerate() {
            if ex.src.ids.len() != ex.src.slots.len() || ex.tgt_in.ids.len() != ex.tgt_in.slots.len() {
                return Err(Error::Shape(format!("example {i} has ids and slots of different lengths")));
            }
            if !ex.tgt_out.is_empty() && ex.tgt_out.len() != ex.tgt_in.ids.len() {
                return Err(Error::Shape(format!("example {i} has misaligned decoder targets")));
            }
        }
        let b = examples.len();
        let t_src = examples.iter().map(|e| e.src.ids.len()).max().unwrap_or(0);
        let t_tgt = examples.iter().map(|e| e.tgt_in.ids.len()).max().unwrap_or(0);
        let n_max = examples.iter().map(|e| e.notes.len()).max().unwrap_or(0);
        let srcs: Vec<&SideInput> = examples.iter().map(|e| &e.src).collect();
        let tgts: Vec<&SideInput> = examples.iter().map(|e| &e.tgt_in).collect();
        let src = side_tensors(&srcs, t_src, n_max, ratio_bins, device, dtype)?;
        let tgt = side_tensors(&tgts, t_tgt, n_max, ratio_bins, device, dtype)?;

        let mut key_mask = vec![0f32; b * t_src];
        let mut mean = vec![0f32; b * t_src];
        for (r, e) in examples.iter().enumerate() {
            for p in e.src.ids.len()..t_src {
                key_mask[r * t_src + p] = super::layers::MASK_NEG as f32;
            }
            let aligned: Vec<usize> = (0..e.src.slots.len()).filter(|&p| e.src.slots[p].is_some()).collect();
            for &p in &aligned {
                mean[r * t_src + p] = 1.0 / aligned.len() as f32;
            }
        }

        let n_cols = n_max.max(1);
        let mut midi = vec![0u32; b * n_cols];
        let mut dur = vec![0u32; b * n_cols];
        for (r, e) in examples.iter().enumerate() {
            for (i, &(m, d)) in e.notes.iter().enumerate() {
                midi[r * n_cols + i] = m;
                dur[r * n_cols + i] = d;
            }
        }

        let mut out = vec![SpecialToken::Pad.id(); b * t_tgt];
        let mut weight = vec![0f32; b * t_tgt];
        let mut n_targets = 0;
        for (r, e) in examples.iter().enumerate() {
            for (p, &y) in e.tgt_out.iter().enumerate() {
                out[r * t_tgt + p] = y;
                weight[r * t_tgt + p] = 1.0;
            }
            n_targets += e.tgt_out.len();
        }

        let mut positions = Vec::new();
        let mut rows = Vec::new();
        let mut remaining = Vec::new();
        let mut n_notes = Vec::new();
        let mut gold = Vec::new();
        let mut verse_of = Vec::new();
        let mut verse_notes = Vec::new();
        for (r, e) in examples.iter().enumerate() {
            let Some(counts) = &e.gold_counts else { continue };
            let n = e.notes.len();
            if n == 0 || counts.is_empty() {
                continue;
            }
            let total: u64 = counts.iter().map(|&c| c as u64).sum();
            if total != n as u64 {
                return Err(Error::Shape(format!("gold counts sum to {total} over {n} notes")));
            }
            let v = verse_notes.len();
            verse_notes.push(n);
            let mut s = 0usize;
            for (j, &c) in counts.iter().enumerate() {
                positions.push((r * t_tgt + j) as u32);
                rows.push(r as u32);
                remaining.push(n - s);
                n_notes.push(n);
                gold.push(c);
                verse_of.push(v);
                s += c as usize;
            }
        }
        let grouping = if positions.is_empty() {
            None
        } else {
            let p = positions.len();
            Some(GroupingBatch {
                positions: Tensor::from_vec(positions, p, device)?,
                rows: Tensor::from_vec(rows, p, device)?,
                remaining,
                n_notes,
                gold,
                verse_of,
                verse_notes,
            })
        };

        Ok(Self {
            size: b,
            src_len: t_src,
            tgt_len: t_tgt,
            max_notes: n_max,
            src,
            tgt,
            src_key_mask: Tensor::from_vec(key_mask, (b, 1, 1, t_src), device)?.to_dtype(dtype)?,
            src_align_mean: Tensor::from_vec(mean, (b, 1, t_src), device)?.to_dtype(dtype)?,
            note_midi: Tensor::from_vec(midi, (b, n_cols), device)?,
            note_dur: Tensor::from_vec(dur, (b, n_cols), device)?,
            tgt_out: Tensor::from_vec(out, b * t_tgt, device)?,
            tgt_weight: Tensor::from_vec(weight, b * t_tgt, device)?.to_dtype(dtype)?,
            n_targets,
            grouping,
        })
    }
}
