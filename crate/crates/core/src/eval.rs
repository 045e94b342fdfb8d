//! Corpus metrics: BLEU-4, alignment score over pooled count histograms,
//! and the position-wise accuracies used for the synthetic experiments.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::alignment::{alignment_score, AlignmentHistogram};
use crate::corpus::Verse;
use crate::decode::PredictionRecord;
use crate::error::{Error, Result};

pub const BLEU_ORDER: usize = 4;

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Corpus BLEU-4 on a 0-100 scale. Precisions of order two and up use
/// add-one smoothing; unigram precision is unsmoothed.
pub fn corpus_bleu(hypotheses: &[Vec<String>], references: &[Vec<String>]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::Shape(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut matches = [0usize; BLEU_ORDER];
    let mut totals = [0usize; BLEU_ORDER];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=BLEU_ORDER {
            let rc = ngrams(r, n);
            for (g, c) in ngrams(h, n) {
                matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if hyp_len == 0 || matches[0] == 0 {
        return Ok(0.0);
    }
    let mut log_p = (matches[0] as f64 / totals[0] as f64).ln();
    for n in 1..BLEU_ORDER {
        log_p += ((matches[n] + 1) as f64 / (totals[n] + 1) as f64).ln();
    }
    let bp = if hyp_len < ref_len { (1.0 - ref_len as f64 / hyp_len as f64).exp() } else { 1.0 };
    Ok((100.0 * bp * (log_p / BLEU_ORDER as f64).exp()).clamp(0.0, 100.0))
}

/// Share of positions holding the same token, over the longer of each pair.
pub fn token_accuracy(predicted: &[Vec<String>], gold: &[Vec<String>]) -> f64 {
    let (mut hit, mut total) = (0usize, 0usize);
    for (p, g) in predicted.iter().zip(gold) {
        hit += p.iter().zip(g).filter(|(a, b)| a == b).count();
        total += p.len().max(g.len());
    }
    if total == 0 {
        1.0
    } else {
        hit as f64 / total as f64
    }
}

/// Share of gold tokens whose predicted count at the same position matches.
pub fn exact_count_accuracy(predicted: &[Vec<u32>], gold: &[Vec<u32>]) -> f64 {
    let (mut hit, mut total) = (0usize, 0usize);
    for (p, g) in predicted.iter().zip(gold) {
        hit += p.iter().zip(g).filter(|(a, b)| a == b).count();
        total += g.len();
    }
    if total == 0 {
        1.0
    } else {
        hit as f64 / total as f64
    }
}

/// Pooled-histogram alignment score over a corpus.
pub fn corpus_alignment_score(predicted: &[Vec<u32>], gold: &[Vec<u32>]) -> Result<f64> {
    let (mut hp, mut hg) = (AlignmentHistogram::new(), AlignmentHistogram::new());
    for p in predicted {
        hp.extend(p)?;
    }
    for g in gold {
        hg.extend(g)?;
    }
    alignment_score(&hp, &hg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu: f64,
    pub as_score: f64,
    pub histogram_pred: AlignmentHistogram,
    pub histogram_gt: AlignmentHistogram,
    pub n_verses: usize,
}

/// Scores predictions against gold verses, paired by id.
pub fn evaluate(predictions: &[PredictionRecord], gold: &[Verse]) -> Result<EvalReport> {
    let mut by_id: BTreeMap<&str, &Verse> = BTreeMap::new();
    for g in gold {
        if by_id.insert(g.id.as_str(), g).is_some() {
            return Err(Error::Pairing(format!("duplicate gold id {}", g.id)));
        }
    }
    if predictions.len() != by_id.len() {
        return Err(Error::Pairing(format!(
            "{} predictions for {} gold records",
            predictions.len(),
            by_id.len()
        )));
    }
    let mut hyps = Vec::new();
    let mut refs = Vec::new();
    let mut hp = AlignmentHistogram::new();
    let mut hg = AlignmentHistogram::new();
    let mut seen = std::collections::BTreeSet::new();
    for p in predictions {
        let g = by_id
            .get(p.id.as_str())
            .ok_or_else(|| Error::Pairing(format!("prediction {} has no gold record", p.id)))?;
        if !seen.insert(p.id.as_str()) {
            return Err(Error::Pairing(format!("duplicate prediction id {}", p.id)));
        }
        hyps.push(p.tgt_tokens.clone());
        refs.push(g.tgt_tokens.clone());
        hp.extend(&p.tgt_align)?;
        hg.extend(&g.tgt_counts)?;
    }
    Ok(EvalReport {
        bleu: corpus_bleu(&hyps, &refs)?,
        as_score: alignment_score(&hp, &hg)?,
        histogram_pred: hp,
        histogram_gt: hg,
        n_verses: predictions.len(),
    })
}
