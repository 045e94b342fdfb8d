//! Synthetic parallel lyrics for desk-scale experiments.
//!
//! English pseudo-words map one-to-one onto single CJK characters. Each
//! target character is sung on `1 + (FNV-1a hash mod 3)` notes, and its
//! source word on the same notes.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{bin_duration, Domain, Lang, Note, Verse, DURATION_BINS};
use crate::error::{Error, Result};

pub const MIN_VERSE_TOKENS: usize = 3;
pub const MAX_VERSE_TOKENS: usize = 8;
pub const PITCH_RANGE: std::ops::RangeInclusive<i32> = 48..=84;

const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "ch", "sh", "tr"];
const NUCLEI: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou", "ee"];
const CODAS: &[&str] = &["", "n", "m", "s", "l", "r", "k"];
const CJK_START: u32 = 0x4E00;

/// 64-bit FNV-1a over the UTF-8 bytes of `s`.
pub fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Number of notes the synthetic corpus assigns to a target token.
pub fn gold_count(token: &str) -> u32 {
    1 + (fnv1a(token) % 3) as u32
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub verses: Vec<Verse>,
    /// Source word to target character.
    pub lexicon: BTreeMap<String, String>,
}

impl SyntheticCorpus {
    /// Splits off the last `n_test` verses.
    pub fn split(mut self, n_test: usize) -> (Vec<Verse>, Vec<Verse>) {
        let test = self.verses.split_off(self.verses.len().saturating_sub(n_test));
        (self.verses, test)
    }

    pub fn translate(&self, words: &[String]) -> Option<Vec<String>> {
        words.iter().map(|w| self.lexicon.get(w).cloned()).collect()
    }
}

fn source_words(n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut words = BTreeSet::new();
    while words.len() < n {
        let syllables = rng.gen_range(1..=2);
        let w: String = (0..syllables)
            .map(|_| {
                format!(
                    "{}{}{}",
                    ONSETS.choose(rng).unwrap(),
                    NUCLEI.choose(rng).unwrap(),
                    CODAS.choose(rng).unwrap()
                )
            })
            .collect();
        words.insert(w);
    }
    let mut words: Vec<String> = words.into_iter().collect();
    words.shuffle(rng);
    words
}

/// `n` CJK characters, as balanced as possible across the three counts.
fn target_chars(n: usize) -> Vec<String> {
    let mut buckets: [Vec<String>; 3] = Default::default();
    let quota = |k: usize| n / 3 + usize::from(k < n % 3);
    let mut code = CJK_START;
    while (0..3).any(|k| buckets[k].len() < quota(k)) {
        let c = char::from_u32(code).expect("CJK block is contiguous").to_string();
        let k = (gold_count(&c) - 1) as usize;
        if buckets[k].len() < quota(k) {
            buckets[k].push(c);
        }
        code += 1;
    }
    buckets.into_iter().flatten().collect()
}

/// Generates `n_verses` En→Zh verses over a `vocab_size`-word lexicon.
/// The same seed always yields the same corpus.
pub fn generate_synthetic_corpus(seed: u64, n_verses: usize, vocab_size: usize) -> Result<SyntheticCorpus> {
    if n_verses == 0 || vocab_size == 0 {
        return Err(Error::Config("synthetic corpus sizes must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let src = source_words(vocab_size, &mut rng);
    let mut tgt = target_chars(vocab_size);
    tgt.shuffle(&mut rng);
    let lexicon: BTreeMap<String, String> = src.iter().cloned().zip(tgt.iter().cloned()).collect();

    let verses = (0..n_verses)
        .map(|i| {
            let len = rng.gen_range(MIN_VERSE_TOKENS..=MAX_VERSE_TOKENS);
            let src_tokens: Vec<String> = (0..len).map(|_| src.choose(&mut rng).unwrap().clone()).collect();
            let tgt_tokens: Vec<String> = src_tokens.iter().map(|w| lexicon[w].clone()).collect();
            let counts: Vec<u32> = tgt_tokens.iter().map(|t| gold_count(t)).collect();
            let n: u32 = counts.iter().sum();
            let notes = (0..n)
                .map(|_| {
                    let bin = rng.gen_range(0..DURATION_BINS as u8);
                    Note::new(rng.gen_range(PITCH_RANGE), bin_duration(bin))
                })
                .collect();
            Verse {
                id: format!("synth-{seed}-{i:06}"),
                lang_src: Lang::En,
                lang_tgt: Lang::Zh,
                domain_tag: Domain::Lyrics,
                src_tokens,
                tgt_tokens,
                notes,
                src_counts: counts.clone(),
                tgt_counts: counts,
            }
        })
        .collect();
    Ok(SyntheticCorpus { verses, lexicon })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{validate_record, write_jsonl};

    #[test]
    fn records_are_valid_and_consistent() {
        let c = generate_synthetic_corpus(1, 200, 60).unwrap();
        assert_eq!(c.lexicon.len(), 60);
        let targets: BTreeSet<_> = c.lexicon.values().collect();
        assert_eq!(targets.len(), 60);
        for v in &c.verses {
            assert!(validate_record(v).is_empty(), "{:?}", validate_record(v));
            assert_eq!(v.tgt_counts.iter().sum::<u32>() as usize, v.n_notes());
            assert_eq!(c.translate(&v.src_tokens).unwrap(), v.tgt_tokens);
            assert!((MIN_VERSE_TOKENS..=MAX_VERSE_TOKENS).contains(&v.tgt_tokens.len()));
            assert!(v.notes.iter().all(|n| PITCH_RANGE.contains(&n.midi)));
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let bytes = |seed| {
            let mut out = Vec::new();
            write_jsonl(&mut out, &generate_synthetic_corpus(seed, 50, 40).unwrap().verses).unwrap();
            out
        };
        assert_eq!(bytes(7), bytes(7));
        assert_ne!(bytes(7), bytes(8));
    }

    #[test]
    fn counts_are_roughly_uniform() {
        let c = generate_synthetic_corpus(3, 2000, 200).unwrap();
        let mut hist = [0usize; 3];
        let mut total = 0;
        for v in &c.verses {
            for &k in &v.tgt_counts {
                hist[k as usize - 1] += 1;
                total += 1;
            }
        }
        assert!(total >= 10_000);
        for h in hist {
            let share = h as f64 / total as f64;
            assert!((share - 1.0 / 3.0).abs() <= 0.02, "{hist:?}");
        }
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(""), 0xcbf29ce484222325);
        assert_eq!(fnv1a("a"), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn rejects_empty_sizes() {
        assert!(generate_synthetic_corpus(0, 0, 10).is_err());
        assert!(generate_synthetic_corpus(0, 10, 0).is_err());
    }
}
