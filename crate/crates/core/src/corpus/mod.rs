//! Verse records, tokenization, vocabulary and the on-disk corpus format.
//!
//! The canonical corpus is UTF-8 JSON lines, one [`Verse`] per line.

mod musicxml;
mod tokenize;
mod vocab;

use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use musicxml::{parse_musicxml, ParseOptions, ParseOutcome};
pub use tokenize::tokenize;
pub use vocab::{SpecialToken, Vocabulary, MAX_LENGTH_TOKEN};

/// Number of duration classes in the note duration table.
pub const DURATION_BINS: usize = 31;
/// Width of one duration class, in beats.
pub const DURATION_STEP: f64 = 0.25;

/// Maps a duration in beats onto one of the [`DURATION_BINS`] quarter-beat
/// classes (0.25, 0.5, ..., 7.75 beats), clamping at both ends.
pub fn quantize_duration(dur_beats: f64) -> Result<u8> {
    if !(dur_beats > 0.0) || !dur_beats.is_finite() {
        return Err(Error::Domain(format!(
            "note duration must be positive, got {dur_beats}"
        )));
    }
    let steps = (dur_beats / DURATION_STEP).round();
    let steps = steps.clamp(1.0, DURATION_BINS as f64);
    Ok(steps as u8 - 1)
}

/// Nominal duration, in beats, of a duration class.
pub fn bin_duration(bin: u8) -> f64 {
    (bin as f64 + 1.0) * DURATION_STEP
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lang {
    En,
    Zh,
}

impl Lang {
    pub fn other(self) -> Lang {
        match self {
            Lang::En => Lang::Zh,
            Lang::Zh => Lang::En,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Lang::En => "en",
            Lang::Zh => "zh",
        }
    }
}

impl fmt::Display for Lang {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Lang {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "en" => Ok(Lang::En),
            "zh" => Ok(Lang::Zh),
            other => Err(Error::Config(format!("unknown language tag {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Lyrics,
    General,
}

/// One melody note. `midi` is kept wide so out-of-range pitches read from
/// disk can be reported by [`validate_record`] instead of failing to load.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Note {
    pub midi: i32,
    pub dur_beats: f64,
}

impl Note {
    pub fn new(midi: i32, dur_beats: f64) -> Self {
        Self { midi, dur_beats }
    }

    pub fn dur_bin(&self) -> Result<u8> {
        quantize_duration(self.dur_beats)
    }

    pub fn pitch(&self) -> Result<u8> {
        if (0..=127).contains(&self.midi) {
            Ok(self.midi as u8)
        } else {
            Err(Error::Domain(format!("midi pitch {} out of range", self.midi)))
        }
    }
}

/// A verse: lyrics on one or both sides plus the melody they are sung to.
///
/// Counts hold the number of notes aligned to each content token. A record
/// with an empty source side (no tokens, no counts) is monolingual; a record
/// with source tokens but no source counts carries no source alignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verse {
    pub id: String,
    pub lang_src: Lang,
    pub lang_tgt: Lang,
    pub domain_tag: Domain,
    pub src_tokens: Vec<String>,
    pub tgt_tokens: Vec<String>,
    pub notes: Vec<Note>,
    pub src_counts: Vec<u32>,
    pub tgt_counts: Vec<u32>,
}

impl Verse {
    pub fn n_notes(&self) -> usize {
        self.notes.len()
    }

    pub fn has_source(&self) -> bool {
        !self.src_tokens.is_empty()
    }

    pub fn has_source_alignment(&self) -> bool {
        !self.src_counts.is_empty()
    }

    /// Drops every target-side field, which is what inference may see.
    pub fn source_only(&self) -> Verse {
        Verse {
            tgt_tokens: Vec::new(),
            tgt_counts: Vec::new(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Source,
    Target,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Source => "src",
            Side::Target => "tgt",
        })
    }
}

/// One broken [`Verse`] invariant.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    EmptyId,
    EmptyTokens(Side),
    NoNotes,
    CountLengthMismatch { side: Side, tokens: usize, counts: usize },
    CountSumMismatch { side: Side, sum: u64, notes: usize },
    ZeroCount { side: Side, index: usize },
    PitchOutOfRange { index: usize, midi: i32 },
    NonPositiveDuration { index: usize, dur_beats: f64 },
    EmptyToken { side: Side, index: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyId => write!(f, "empty id"),
            Violation::EmptyTokens(side) => write!(f, "empty token sequence ({side})"),
            Violation::NoNotes => write!(f, "no notes"),
            Violation::CountLengthMismatch { side, tokens, counts } => write!(
                f,
                "count-length mismatch ({side}): {tokens} tokens, {counts} counts"
            ),
            Violation::CountSumMismatch { side, sum, notes } => write!(
                f,
                "count-sum mismatch ({side}): counts sum to {sum}, {notes} notes"
            ),
            Violation::ZeroCount { side, index } => {
                write!(f, "zero count ({side}) at token {index}")
            }
            Violation::PitchOutOfRange { index, midi } => {
                write!(f, "pitch out of range: note {index} has midi {midi}")
            }
            Violation::NonPositiveDuration { index, dur_beats } => write!(
                f,
                "non-positive duration: note {index} lasts {dur_beats} beats"
            ),
            Violation::EmptyToken { side, index } => {
                write!(f, "empty token ({side}) at position {index}")
            }
        }
    }
}

/// Checks every [`Verse`] invariant and reports all violations found.
pub fn validate_record(v: &Verse) -> Vec<Violation> {
    let mut out = Vec::new();
    if v.id.is_empty() {
        out.push(Violation::EmptyId);
    }
    if v.notes.is_empty() {
        out.push(Violation::NoNotes);
    }
    for (index, note) in v.notes.iter().enumerate() {
        if !(0..=127).contains(&note.midi) {
            out.push(Violation::PitchOutOfRange { index, midi: note.midi });
        }
        if !(note.dur_beats > 0.0) || !note.dur_beats.is_finite() {
            out.push(Violation::NonPositiveDuration { index, dur_beats: note.dur_beats });
        }
    }
    if v.tgt_tokens.is_empty() {
        out.push(Violation::EmptyTokens(Side::Target));
    }
    check_side(Side::Target, &v.tgt_tokens, &v.tgt_counts, v.notes.len(), true, &mut out);
    if v.src_tokens.is_empty() {
        if !v.src_counts.is_empty() {
            out.push(Violation::EmptyTokens(Side::Source));
        }
    } else {
        let required = !v.src_counts.is_empty();
        check_side(Side::Source, &v.src_tokens, &v.src_counts, v.notes.len(), required, &mut out);
    }
    out
}

fn check_side(
    side: Side,
    tokens: &[String],
    counts: &[u32],
    notes: usize,
    counts_required: bool,
    out: &mut Vec<Violation>,
) {
    for (index, t) in tokens.iter().enumerate() {
        if t.is_empty() {
            out.push(Violation::EmptyToken { side, index });
        }
    }
    if !counts_required {
        return;
    }
    if counts.len() != tokens.len() {
        out.push(Violation::CountLengthMismatch { side, tokens: tokens.len(), counts: counts.len() });
    }
    for (index, &c) in counts.iter().enumerate() {
        if c == 0 {
            out.push(Violation::ZeroCount { side, index });
        }
    }
    let sum: u64 = counts.iter().map(|&c| c as u64).sum();
    if sum != notes as u64 {
        out.push(Violation::CountSumMismatch { side, sum, notes });
    }
}

/// Returns `Err(Error::Validation)` if the record breaks any invariant.
pub fn ensure_valid(v: &Verse) -> Result<()> {
    let violations = validate_record(v);
    if violations.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation { id: v.id.clone(), violations })
    }
}

/// Reads a JSON-lines corpus. Blank lines are skipped.
pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Vec<Verse>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let verse: Verse = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i as u32 + 1,
            message: e.to_string(),
        })?;
        out.push(verse);
    }
    Ok(out)
}

pub fn write_jsonl<W: Write>(mut writer: W, verses: &[Verse]) -> Result<()> {
    for v in verses {
        serde_json::to_writer(&mut writer, v)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl_file(path: &std::path::Path) -> Result<Vec<Verse>> {
    let f = std::fs::File::open(path)?;
    read_jsonl(std::io::BufReader::new(f))
}

pub fn write_jsonl_file(path: &std::path::Path, verses: &[Verse]) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_jsonl(&mut w, verses)?;
    w.flush()?;
    Ok(())
}
