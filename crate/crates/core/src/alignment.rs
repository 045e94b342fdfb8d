//! Lyrics-melody alignment arithmetic: block matrices, cumulative ratios and
//! their bins, note mean-pooling, count histograms, the Alignment Score and
//! the count reconciliation applied after decoding.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary tokens x notes matrix of a monotone alignment, stored by its row
/// sums. Row `j` covers the column block `offsets[j]..offsets[j] + counts[j]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignmentMatrix {
    counts: Vec<u32>,
    offsets: Vec<usize>,
    n_notes: usize,
}

impl AlignmentMatrix {
    pub fn from_counts(counts: &[u32], n_notes: usize) -> Result<Self> {
        let total: u64 = counts.iter().map(|&c| c as u64).sum();
        if total != n_notes as u64 {
            return Err(Error::Alignment(format!(
                "counts sum to {total} but there are {n_notes} notes"
            )));
        }
        let mut offsets = Vec::with_capacity(counts.len());
        let mut acc = 0usize;
        for &c in counts {
            offsets.push(acc);
            acc += c as usize;
        }
        Ok(Self { counts: counts.to_vec(), offsets, n_notes })
    }

    pub fn n_tokens(&self) -> usize {
        self.counts.len()
    }

    pub fn n_notes(&self) -> usize {
        self.n_notes
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    /// Column range aligned to token `j`.
    pub fn block(&self, j: usize) -> std::ops::Range<usize> {
        self.offsets[j]..self.offsets[j] + self.counts[j] as usize
    }

    pub fn get(&self, j: usize, i: usize) -> bool {
        self.block(j).contains(&i)
    }

    pub fn row_sums(&self) -> Vec<u32> {
        self.counts.clone()
    }

    pub fn to_dense(&self) -> Array2<u8> {
        let mut m = Array2::zeros((self.n_tokens(), self.n_notes));
        for j in 0..self.n_tokens() {
            for i in self.block(j) {
                m[[j, i]] = 1;
            }
        }
        m
    }

    /// Row-normalised matrix `W = M / rowsum(M)`; all-zero rows stay zero.
    pub fn pooling_weights(&self) -> Array2<f64> {
        let mut w = Array2::zeros((self.n_tokens(), self.n_notes));
        for j in 0..self.n_tokens() {
            let c = self.counts[j];
            for i in self.block(j) {
                w[[j, i]] = 1.0 / c as f64;
            }
        }
        w
    }
}

/// Builds the alignment matrix for per-token note counts `counts`.
/// Zero counts are allowed and produce all-zero rows.
pub fn counts_to_matrix(counts: &[i64], n_notes: usize) -> Result<AlignmentMatrix> {
    AlignmentMatrix::from_counts(&nonnegative(counts)?, n_notes)
}

fn nonnegative(counts: &[i64]) -> Result<Vec<u32>> {
    counts
        .iter()
        .map(|&c| {
            u32::try_from(c).map_err(|_| Error::Domain(format!("note count {c} is negative or too large")))
        })
        .collect()
}

/// Cumulative aligned-note totals and their fraction of the melody.
#[derive(Debug, Clone, PartialEq)]
pub struct CumulativeAlignment {
    pub cumulative: Vec<u32>,
    pub ratios: Vec<f64>,
}

pub fn cumulative_ratios(counts: &[u32], n_notes: usize) -> Result<CumulativeAlignment> {
    if n_notes == 0 {
        return Err(Error::Domain("cumulative ratios need at least one note".into()));
    }
    let matrix = AlignmentMatrix::from_counts(counts, n_notes)?;
    let mut acc = 0u32;
    let cumulative: Vec<u32> = matrix
        .row_sums()
        .into_iter()
        .map(|c| {
            acc += c;
            acc
        })
        .collect();
    let ratios = cumulative.iter().map(|&s| s as f64 / n_notes as f64).collect();
    Ok(CumulativeAlignment { cumulative, ratios })
}

/// Index of the equal-width bin of `(0, 1]` containing `ratio`:
/// `ceil(ratio * bins) - 1`. Products within rounding error of a bin edge
/// count as lying on it.
pub fn bin_ratio(ratio: f64, bins: usize) -> Result<usize> {
    if bins == 0 {
        return Err(Error::Domain("ratio bin count must be positive".into()));
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Domain(format!("alignment ratio {ratio} outside (0, 1]")));
    }
    let x = ratio * bins as f64;
    let edge = x.round();
    let idx = if (x - edge).abs() <= 1e-9 * bins as f64 { edge } else { x.ceil() } as usize;
    Ok(idx.clamp(1, bins) - 1)
}

/// Non-overlapping mean pooling of note embeddings (`N x d`) onto tokens,
/// computed as `W * e_note` with `W` the row-normalised alignment matrix.
pub fn pool_notes(note_embeddings: ArrayView2<f64>, matrix: &AlignmentMatrix) -> Result<Array2<f64>> {
    if note_embeddings.nrows() != matrix.n_notes() {
        return Err(Error::Shape(format!(
            "{} note embeddings for an alignment over {} notes",
            note_embeddings.nrows(),
            matrix.n_notes()
        )));
    }
    if note_embeddings.ncols() == 0 {
        return Err(Error::Shape("note embeddings have zero width".into()));
    }
    Ok(matrix.pooling_weights().dot(&note_embeddings))
}

/// Frequencies of aligned-note counts.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AlignmentHistogram {
    freq: BTreeMap<u32, u64>,
}

impl AlignmentHistogram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_counts(counts: &[u32]) -> Result<Self> {
        let mut h = Self::new();
        h.extend(counts)?;
        Ok(h)
    }

    pub fn extend(&mut self, counts: &[u32]) -> Result<()> {
        if let Some(bad) = counts.iter().find(|&&c| c < 1) {
            return Err(Error::Domain(format!("aligned-note count {bad} is below 1")));
        }
        for &c in counts {
            *self.freq.entry(c).or_insert(0) += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &AlignmentHistogram) {
        for (&k, &n) in &other.freq {
            *self.freq.entry(k).or_insert(0) += n;
        }
    }

    pub fn get(&self, k: u32) -> u64 {
        self.freq.get(&k).copied().unwrap_or(0)
    }

    /// Total number of counted tokens.
    pub fn total(&self) -> u64 {
        self.freq.values().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, u64)> + '_ {
        self.freq.iter().map(|(&k, &n)| (k, n))
    }

    pub fn density(&self, k: u32) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.get(k) as f64 / total as f64
        }
    }
}

pub fn build_histogram(counts: &[u32]) -> Result<AlignmentHistogram> {
    AlignmentHistogram::from_counts(counts)
}

/// Count-weighted intersection of the predicted and gold count densities,
/// over the gold total:
///
/// `sum_k min(p_k, g_k) * k / sum_k g_k * k`
///
/// An empty prediction has zero density everywhere.
pub fn alignment_score(pred: &AlignmentHistogram, gt: &AlignmentHistogram) -> Result<f64> {
    if gt.is_empty() {
        return Err(Error::Domain("alignment score needs a non-empty gold histogram".into()));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (k, _) in gt.iter() {
        let g = gt.density(k);
        num += pred.density(k).min(g) * k as f64;
        den += g * k as f64;
    }
    Ok(num / den)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrimOrder {
    /// Remove surplus notes starting from the last token.
    #[default]
    TrimTailFirst,
    /// Remove surplus notes starting from the first token.
    TrimHeadFirst,
}

impl std::str::FromStr for TrimOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trim_tail_first" => Ok(TrimOrder::TrimTailFirst),
            "trim_head_first" => Ok(TrimOrder::TrimHeadFirst),
            other => Err(Error::Config(format!("unknown post-processing mode {other:?}"))),
        }
    }
}

/// Reconciles predicted counts with the melody length. A surplus is removed
/// one note at a time, sweeping tokens in `order` and never taking a token
/// below one note; a deficit goes entirely to the last token.
pub fn post_process_counts(predicted: &[u32], n_notes: usize, order: TrimOrder) -> Result<Vec<u32>> {
    if predicted.is_empty() {
        return Err(Error::Infeasible { len: 0, notes: n_notes });
    }
    if n_notes < predicted.len() {
        return Err(Error::Infeasible { len: predicted.len(), notes: n_notes });
    }
    let mut out: Vec<u32> = predicted.iter().map(|&c| c.max(1)).collect();
    let total: u64 = out.iter().map(|&c| c as u64).sum();
    let n = n_notes as u64;
    if total < n {
        *out.last_mut().unwrap() += (n - total) as u32;
        return Ok(out);
    }
    let mut surplus = total - n;
    let len = out.len();
    while surplus > 0 {
        for step in 0..len {
            let j = match order {
                TrimOrder::TrimTailFirst => len - 1 - step,
                TrimOrder::TrimHeadFirst => step,
            };
            if surplus > 0 && out[j] > 1 {
                out[j] -= 1;
                surplus -= 1;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn counts_to_matrix_examples() {
        let m = counts_to_matrix(&[2, 1, 1], 4).unwrap();
        assert_eq!(m.to_dense(), array![[1, 1, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1]]);
        assert!(matches!(counts_to_matrix(&[1], 2), Err(Error::Alignment(_))));
        assert_eq!(counts_to_matrix(&[4], 4).unwrap().to_dense(), array![[1, 1, 1, 1]]);
        assert!(matches!(counts_to_matrix(&[-1, 3], 2), Err(Error::Domain(_))));
        let z = counts_to_matrix(&[0, 2, 0], 2).unwrap();
        assert_eq!(z.to_dense(), array![[0, 0], [1, 1], [0, 0]]);
    }

    #[test]
    fn dense_matrix_columns_sum_to_one() {
        let m = counts_to_matrix(&[1, 0, 3, 2], 6).unwrap().to_dense();
        for col in m.columns() {
            assert_eq!(col.sum(), 1);
        }
    }

    #[test]
    fn cumulative_examples() {
        let c = cumulative_ratios(&[2, 1, 1], 4).unwrap();
        assert_eq!(c.cumulative, [2, 3, 4]);
        assert_eq!(c.ratios, [0.5, 0.75, 1.0]);
        assert_eq!(cumulative_ratios(&[1], 1).unwrap().ratios, [1.0]);
        assert_eq!(cumulative_ratios(&[1, 1, 2], 4).unwrap().ratios, [0.25, 0.5, 1.0]);
        assert!(matches!(cumulative_ratios(&[], 0), Err(Error::Domain(_))));
    }

    #[test]
    fn bin_ratio_examples() {
        assert_eq!(bin_ratio(1.0, 32).unwrap(), 31);
        assert_eq!(bin_ratio(0.5, 32).unwrap(), 15);
        assert!(bin_ratio(0.0, 32).is_err());
        assert!(bin_ratio(1.0001, 32).is_err());
        assert!(bin_ratio(0.5, 0).is_err());
        assert_eq!(bin_ratio(1e-9, 32).unwrap(), 0);
    }

    proptest! {
        #[test]
        fn bin_ratio_partitions_unit_interval(bins in 1usize..64, b in 0usize..64, t in 0.0f64..1.0) {
            let b = b % bins;
            let lo = b as f64 / bins as f64;
            let hi = (b + 1) as f64 / bins as f64;
            let r = lo + (hi - lo) * t;
            if t > 1e-6 {
                prop_assert_eq!(bin_ratio(r, bins).unwrap(), b);
            }
            prop_assert_eq!(bin_ratio(hi, bins).unwrap(), b);
        }

        #[test]
        fn row_sums_invert_counts(counts in proptest::collection::vec(0u32..6, 1..10)) {
            let n: u32 = counts.iter().sum();
            let m = AlignmentMatrix::from_counts(&counts, n as usize).unwrap();
            let dense = m.to_dense();
            let sums: Vec<u32> = dense.rows().into_iter().map(|r| r.iter().map(|&x| x as u32).sum()).collect();
            prop_assert_eq!(sums, counts);
        }

        #[test]
        fn post_process_sums_to_n(pred in proptest::collection::vec(1u32..8, 1..12), n in 0usize..60, head in any::<bool>()) {
            let order = if head { TrimOrder::TrimHeadFirst } else { TrimOrder::TrimTailFirst };
            match post_process_counts(&pred, n, order) {
                Ok(out) => {
                    prop_assert!(n >= pred.len());
                    prop_assert_eq!(out.iter().map(|&c| c as usize).sum::<usize>(), n);
                    prop_assert!(out.iter().all(|&c| c >= 1));
                    prop_assert_eq!(out.len(), pred.len());
                }
                Err(_) => prop_assert!(n < pred.len()),
            }
        }
    }

    #[test]
    fn pool_examples() {
        let e = array![[2.0, 0.0], [4.0, 0.0], [6.0, 2.0]];
        let m = AlignmentMatrix::from_counts(&[2, 1], 3).unwrap();
        assert_eq!(pool_notes(e.view(), &m).unwrap(), array![[3.0, 0.0], [6.0, 2.0]]);

        let e = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let id = AlignmentMatrix::from_counts(&[1, 1, 1], 3).unwrap();
        assert_eq!(pool_notes(e.view(), &id).unwrap(), e);

        let ones = Array2::<f64>::ones((3, 2));
        let m = AlignmentMatrix::from_counts(&[0, 3], 3).unwrap();
        assert_eq!(pool_notes(ones.view(), &m).unwrap(), array![[0.0, 0.0], [1.0, 1.0]]);

        assert!(matches!(pool_notes(ones.view(), &AlignmentMatrix::from_counts(&[2], 2).unwrap()), Err(Error::Shape(_))));
    }

    #[test]
    fn histogram_examples() {
        let h = build_histogram(&[1, 1, 2]).unwrap();
        assert_eq!((h.get(1), h.get(2), h.total()), (2, 1, 3));
        let e = build_histogram(&[]).unwrap();
        assert_eq!(e.total(), 0);
        assert_eq!(build_histogram(&[3]).unwrap().iter().collect::<Vec<_>>(), [(3, 1)]);
        assert!(build_histogram(&[0]).is_err());
        assert_eq!(serde_json::to_string(&h).unwrap(), r#"{"1":2,"2":1}"#);
        let back: AlignmentHistogram = serde_json::from_str(r#"{"1":2,"2":1}"#).unwrap();
        assert_eq!(back, h);
    }

    #[test]
    fn alignment_score_examples() {
        let h = build_histogram(&[1, 2, 2, 5]).unwrap();
        assert_eq!(alignment_score(&h, &h).unwrap(), 1.0);
        let p = build_histogram(&[1]).unwrap();
        let g = build_histogram(&[2]).unwrap();
        assert_eq!(alignment_score(&p, &g).unwrap(), 0.0);
        let p = build_histogram(&[1, 1, 1, 2]).unwrap();
        let g = build_histogram(&[1, 1, 2, 2]).unwrap();
        assert!((alignment_score(&p, &g).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(alignment_score(&AlignmentHistogram::new(), &g).unwrap(), 0.0);
        assert!(alignment_score(&g, &AlignmentHistogram::new()).is_err());
    }

    #[test]
    fn post_process_examples() {
        assert_eq!(post_process_counts(&[2, 2], 3, TrimOrder::TrimTailFirst).unwrap(), [2, 1]);
        assert_eq!(post_process_counts(&[2, 2], 3, TrimOrder::TrimHeadFirst).unwrap(), [1, 2]);
        assert_eq!(post_process_counts(&[1, 1], 4, TrimOrder::TrimTailFirst).unwrap(), [1, 3]);
        assert_eq!(post_process_counts(&[2, 2], 4, TrimOrder::TrimTailFirst).unwrap(), [2, 2]);
        assert_eq!(post_process_counts(&[5, 1, 4], 4, TrimOrder::TrimTailFirst).unwrap(), [2, 1, 1]);
        assert!(matches!(
            post_process_counts(&[1, 1, 1], 2, TrimOrder::TrimTailFirst),
            Err(Error::Infeasible { len: 3, notes: 2 })
        ));
    }
}
