//! Synthetic parallel data from monolingual target-side lyrics.
//!
//! A reverse model translates each target verse into the source language
//! with exactly one token per note, so the synthetic source side is aligned
//! one-to-one with the melody.

use crate::corpus::{validate_record, Domain, Lang, Verse};
use crate::decode::{length_controlled_decode, DecodeOptions};
use crate::error::Result;
use crate::model::Model;

/// Anything that can translate a token sequence into exactly `len` tokens.
pub trait LengthControlledTranslator: Sync {
    fn translate_len(&self, tokens: &[String], lang_tgt: Lang, domain: Domain, len: usize) -> Result<Vec<String>>;
}

/// A text-only model used in the reverse direction.
pub struct ReverseModel<'m> {
    pub model: &'m Model,
    pub options: DecodeOptions,
}

impl LengthControlledTranslator for ReverseModel<'_> {
    fn translate_len(&self, tokens: &[String], lang_tgt: Lang, domain: Domain, len: usize) -> Result<Vec<String>> {
        let query = Verse {
            id: String::new(),
            lang_src: lang_tgt.other(),
            lang_tgt,
            domain_tag: domain,
            src_tokens: tokens.to_vec(),
            tgt_tokens: Vec::new(),
            notes: Vec::new(),
            src_counts: Vec::new(),
            tgt_counts: Vec::new(),
        };
        length_controlled_decode(self.model, &query, len, &self.options)
    }
}

/// Swaps the sides of a parallel verse and drops the melody, giving a
/// training record for the reverse model.
pub fn reverse_text_pair(v: &Verse) -> Verse {
    Verse {
        id: v.id.clone(),
        lang_src: v.lang_tgt,
        lang_tgt: v.lang_src,
        domain_tag: v.domain_tag,
        src_tokens: v.tgt_tokens.clone(),
        tgt_tokens: v.src_tokens.clone(),
        notes: Vec::new(),
        src_counts: Vec::new(),
        tgt_counts: Vec::new(),
    }
}

#[derive(Debug, Clone, Default)]
pub struct BackTranslation {
    pub verses: Vec<Verse>,
    /// Records dropped because the translator failed or the result was
    /// invalid.
    pub skipped: usize,
}

/// Gives every monolingual verse a synthetic source side of one token per
/// note with unit counts. Target side and melody are unchanged.
pub fn back_translate(mono: &[Verse], translator: &dyn LengthControlledTranslator) -> BackTranslation {
    let results = crate::par::map(mono, |v| {
        let n = v.n_notes();
        let tokens = translator.translate_len(&v.tgt_tokens, v.lang_src, v.domain_tag, n);
        match tokens {
            Ok(src) if src.len() == n => {
                let out = Verse { src_tokens: src, src_counts: vec![1; n], ..v.clone() };
                let violations = validate_record(&out);
                if violations.is_empty() {
                    Some(out)
                } else {
                    log::warn!("back-translation of {} is invalid: {:?}", v.id, violations);
                    None
                }
            }
            Ok(src) => {
                log::warn!("back-translation of {} has {} tokens for {n} notes", v.id, src.len());
                None
            }
            Err(e) => {
                log::warn!("back-translation of {} failed: {e}", v.id);
                None
            }
        }
    });
    let skipped = results.iter().filter(|r| r.is_none()).count();
    BackTranslation { verses: results.into_iter().flatten().collect(), skipped }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::training::synth::generate_synthetic_corpus;

    struct Echo;

    impl LengthControlledTranslator for Echo {
        fn translate_len(&self, tokens: &[String], _: Lang, _: Domain, len: usize) -> Result<Vec<String>> {
            if tokens.len() > 7 {
                return Err(Error::Decode("too long".into()));
            }
            Ok((0..len).map(|i| format!("w{}", i % tokens.len())).collect())
        }
    }

    fn mono() -> Vec<Verse> {
        generate_synthetic_corpus(2, 30, 20)
            .unwrap()
            .verses
            .into_iter()
            .map(|v| Verse { src_tokens: Vec::new(), src_counts: Vec::new(), ..v })
            .collect()
    }

    #[test]
    fn outputs_are_one_to_one() {
        let pool = mono();
        let out = back_translate(&pool, &Echo);
        assert_eq!(out.verses.len() + out.skipped, pool.len());
        assert!(out.skipped > 0);
        for v in &out.verses {
            assert_eq!(v.src_tokens.len(), v.n_notes());
            assert!(v.src_counts.iter().all(|&c| c == 1));
            let orig = pool.iter().find(|o| o.id == v.id).unwrap();
            assert_eq!((&v.tgt_tokens, &v.tgt_counts, &v.notes), (&orig.tgt_tokens, &orig.tgt_counts, &orig.notes));
        }
    }

    #[test]
    fn empty_pool() {
        let out = back_translate(&[], &Echo);
        assert!(out.verses.is_empty() && out.skipped == 0);
    }

    #[test]
    fn reversal_swaps_sides() {
        let v = &generate_synthetic_corpus(1, 1, 5).unwrap().verses[0];
        let r = reverse_text_pair(v);
        assert_eq!((r.lang_src, r.lang_tgt), (Lang::Zh, Lang::En));
        assert_eq!(r.src_tokens, v.tgt_tokens);
        assert!(r.notes.is_empty());
    }
}
