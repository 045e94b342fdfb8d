use std::fmt::Write as _;

use crate::corpus::{tokenize, validate_record, Note, Verse};
use crate::error::{Error, Result};

/// Divisions per quarter note in exported scores.
pub const EXPORT_DIVISIONS: u32 = 480;

const STEPS: [(&str, i32); 12] = [
    ("C", 0),
    ("C", 1),
    ("D", 0),
    ("D", 1),
    ("E", 0),
    ("F", 0),
    ("F", 1),
    ("G", 0),
    ("G", 1),
    ("A", 0),
    ("A", 1),
    ("B", 0),
];

#[derive(Debug, Clone, PartialEq)]
pub struct ExportedScore {
    pub musicxml: String,
    /// The source verse with the decoded target side filled in.
    pub record: Verse,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn write_pitch(out: &mut String, note: &Note) -> Result<()> {
    if !(0..=127).contains(&note.midi) {
        return Err(Error::Export(format!("pitch {} outside MIDI range", note.midi)));
    }
    let (step, alter) = STEPS[(note.midi % 12) as usize];
    let octave = note.midi / 12 - 1;
    out.push_str("        <pitch><step>");
    out.push_str(step);
    out.push_str("</step>");
    if alter != 0 {
        let _ = write!(out, "<alter>{alter}</alter>");
    }
    let _ = writeln!(out, "<octave>{octave}</octave></pitch>");
    Ok(())
}

/// Renders decoded lyrics onto the source melody. Each token is the lyric
/// of the first note of its block; the rest of a block is held as a
/// melisma with a lyric extender.
pub fn export_score(source: &Verse, tokens: &[String], counts: &[u32]) -> Result<ExportedScore> {
    if tokens.len() != counts.len() {
        return Err(Error::Export(format!("{} tokens but {} counts", tokens.len(), counts.len())));
    }
    let total: u64 = counts.iter().map(|&c| c as u64).sum();
    if total != source.n_notes() as u64 || counts.contains(&0) {
        return Err(Error::Export(format!(
            "counts {counts:?} do not cover the {} notes with positive blocks",
            source.n_notes()
        )));
    }
    for token in tokens {
        if tokenize(token, source.lang_tgt).ok().as_deref() != Some(std::slice::from_ref(token)) {
            return Err(Error::Export(format!("{token:?} is not a single {} lyric token", source.lang_tgt)));
        }
    }
    let record = Verse { tgt_tokens: tokens.to_vec(), tgt_counts: counts.to_vec(), ..source.clone() };
    let violations = validate_record(&record);
    if !violations.is_empty() {
        let list: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        return Err(Error::Export(list.join("; ")));
    }

    let mut x = String::new();
    x.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    x.push_str("<score-partwise version=\"3.1\">\n");
    x.push_str("  <part-list>\n    <score-part id=\"P1\"><part-name>Voice</part-name></score-part>\n  </part-list>\n");
    x.push_str("  <part id=\"P1\">\n    <measure number=\"1\">\n");
    let _ = writeln!(x, "      <attributes><divisions>{EXPORT_DIVISIONS}</divisions></attributes>");
    let mut note_iter = source.notes.iter();
    for (token, &count) in tokens.iter().zip(counts) {
        for k in 0..count {
            let note = note_iter.next().expect("counts sum to the note count");
            let ticks = (note.dur_beats * EXPORT_DIVISIONS as f64).round().max(1.0) as u64;
            x.push_str("      <note>\n");
            write_pitch(&mut x, note)?;
            let _ = writeln!(x, "        <duration>{ticks}</duration>");
            if k == 0 {
                x.push_str("        <lyric number=\"1\"><syllabic>single</syllabic>");
                let _ = write!(x, "<text>{}</text>", escape(token));
                if count > 1 {
                    x.push_str("<extend type=\"start\"/>");
                }
                x.push_str("</lyric>\n");
            }
            x.push_str("      </note>\n");
        }
    }
    x.push_str("    </measure>\n  </part>\n</score-partwise>\n");
    Ok(ExportedScore { musicxml: x, record })
}
