use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{Domain, Lang, Verse};
use crate::error::{Error, Result};

/// Largest desired-length token; longer requests reuse it.
pub const MAX_LENGTH_TOKEN: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpecialToken {
    Pad,
    Bos,
    Eos,
    Unk,
    ToEn,
    ToZh,
    Lyrics,
    General,
}

impl SpecialToken {
    pub const ALL: [SpecialToken; 8] = [
        SpecialToken::Pad,
        SpecialToken::Bos,
        SpecialToken::Eos,
        SpecialToken::Unk,
        SpecialToken::ToEn,
        SpecialToken::ToZh,
        SpecialToken::Lyrics,
        SpecialToken::General,
    ];

    pub fn id(self) -> u32 {
        self as u32
    }

    pub fn text(self) -> &'static str {
        match self {
            SpecialToken::Pad => "<pad>",
            SpecialToken::Bos => "<bos>",
            SpecialToken::Eos => "<eos>",
            SpecialToken::Unk => "<unk>",
            SpecialToken::ToEn => "<2en>",
            SpecialToken::ToZh => "<2zh>",
            SpecialToken::Lyrics => "<lyrics>",
            SpecialToken::General => "<general>",
        }
    }

    pub fn direction(lang_tgt: Lang) -> SpecialToken {
        match lang_tgt {
            Lang::En => SpecialToken::ToEn,
            Lang::Zh => SpecialToken::ToZh,
        }
    }

    pub fn domain(domain: Domain) -> SpecialToken {
        match domain {
            Domain::Lyrics => SpecialToken::Lyrics,
            Domain::General => SpecialToken::General,
        }
    }
}

/// Token table shared by the encoder and decoder.
///
/// Ids are dense from zero. The special tokens come first, then the
/// desired-length tokens `<len_1>..<len_128>`, then content tokens in
/// sorted order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    fn reserved() -> Vec<String> {
        let mut out: Vec<String> = SpecialToken::ALL.iter().map(|t| t.text().to_string()).collect();
        out.extend((1..=MAX_LENGTH_TOKEN).map(|n| format!("<len_{n}>")));
        out
    }

    pub fn n_reserved() -> usize {
        SpecialToken::ALL.len() + MAX_LENGTH_TOKEN
    }

    pub fn from_tokens<I, S>(content: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut tokens = Self::reserved();
        let mut content: Vec<String> = content
            .into_iter()
            .map(|s| s.as_ref().to_string())
            .filter(|s| !s.is_empty())
            .collect();
        content.sort();
        content.dedup();
        let reserved_len = tokens.len();
        for t in content {
            if !tokens[..reserved_len].contains(&t) {
                tokens.push(t);
            }
        }
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Self { tokens, index }
    }

    /// Collects every source and target token of `verses`.
    pub fn build<'a, I>(verses: I) -> Self
    where
        I: IntoIterator<Item = &'a Verse>,
    {
        let mut all = Vec::new();
        for v in verses {
            all.extend(v.src_tokens.iter().cloned());
            all.extend(v.tgt_tokens.iter().cloned());
        }
        Self::from_tokens(all)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(SpecialToken::Unk.id())
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map(String::as_str).unwrap_or("<unk>")
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    pub fn length_token(&self, n: usize) -> u32 {
        let n = n.clamp(1, MAX_LENGTH_TOKEN);
        (SpecialToken::ALL.len() + n - 1) as u32
    }

    /// True for ids that may appear as decoded lyric content.
    pub fn is_content(&self, id: u32) -> bool {
        (id as usize) >= Self::n_reserved() && (id as usize) < self.tokens.len()
    }

    pub fn content_ids(&self) -> std::ops::Range<u32> {
        Self::n_reserved() as u32..self.tokens.len() as u32
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        let reserved = Self::reserved();
        if tokens.len() < reserved.len() || tokens[..reserved.len()] != reserved[..] {
            return Err(Error::Config("vocabulary does not start with the reserved tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_are_dense_and_distinct() {
        let v = Vocabulary::from_tokens(["b", "a", "a", "你"]);
        for (i, t) in SpecialToken::ALL.iter().enumerate() {
            assert_eq!(t.id() as usize, i);
            assert_eq!(v.id(t.text()), t.id());
        }
        assert_eq!(v.len(), Vocabulary::n_reserved() + 3);
        assert_eq!(v.id("a") as usize, Vocabulary::n_reserved());
        assert_eq!(v.id("zzz"), SpecialToken::Unk.id());
        assert_eq!(v.token(v.length_token(1)), "<len_1>");
        assert_eq!(v.token(v.length_token(500)), "<len_128>");
        assert!(v.is_content(v.id("b")));
        assert!(!v.is_content(SpecialToken::Eos.id()));
    }

    #[test]
    fn serde_round_trip_and_rejects_tampering() {
        let v = Vocabulary::from_tokens(["x", "y"]);
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
        assert!(serde_json::from_str::<Vocabulary>(r#"["x","y"]"#).is_err());
    }
}
