//! Reader for the partwise MusicXML subset the corpus uses: single-voice
//! parts made of `measure`/`note` with `pitch`, `duration`, `divisions`,
//! `tie` and `lyric`.
//!
//! Tied notes are merged into one [`Note`]. A note without a lyric continues
//! the previous syllable when a melisma is open (lyric `extend` or a slur);
//! otherwise it is an alignment error. Rests are dropped and close any open
//! melisma. Each part yields one target-side verse.

use roxmltree::{Document, Node};

use super::{tokenize, Domain, Lang, Note, Verse};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct ParseOptions {
    /// Language of the lyrics in the score.
    pub lang: Lang,
    /// Unknown elements are errors when set, warnings otherwise.
    pub strict: bool,
    /// Prepended to each part id to form the verse id.
    pub id_prefix: String,
}

impl ParseOptions {
    pub fn new(lang: Lang) -> Self {
        Self { lang, strict: true, id_prefix: String::new() }
    }

    pub fn lenient(mut self) -> Self {
        self.strict = false;
        self
    }

    pub fn with_prefix(mut self, prefix: impl Into<String>) -> Self {
        self.id_prefix = prefix.into();
        self
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParseOutcome {
    pub verses: Vec<Verse>,
    pub warnings: Vec<String>,
}

const IGNORED_TOP: &[&str] = &[
    "work", "movement-number", "movement-title", "identification", "defaults", "credit", "part-list",
];
const IGNORED_MEASURE: &[&str] = &["print", "direction", "barline", "sound", "harmony"];
const IGNORED_ATTRIBUTES: &[&str] = &[
    "key", "time", "clef", "staves", "transpose", "staff-details", "measure-style", "instruments",
];
const IGNORED_NOTE: &[&str] = &[
    "voice", "type", "dot", "stem", "beam", "accidental", "notehead", "staff", "instrument",
    "time-modification", "play",
];
const IGNORED_NOTATIONS: &[&str] = &[
    "articulations", "dynamics", "fermata", "ornaments", "technical", "tuplet", "arpeggiate",
];
const IGNORED_LYRIC: &[&str] = &["end-line", "end-paragraph"];

pub fn parse_musicxml(document: &str, opts: &ParseOptions) -> Result<ParseOutcome> {
    let doc = Document::parse(document).map_err(|e| Error::Parse {
        line: e.pos().row,
        message: e.to_string(),
    })?;
    let mut parser = Parser { doc: &doc, opts, warnings: Vec::new() };
    let root = doc.root_element();
    if root.tag_name().name() != "score-partwise" {
        return Err(parser.error(root, format!("unsupported root element <{}>", root.tag_name().name())));
    }
    let mut verses = Vec::new();
    for child in root.children().filter(Node::is_element) {
        match child.tag_name().name() {
            "part" => {
                if let Some(v) = parser.part(child)? {
                    verses.push(v);
                }
            }
            name if IGNORED_TOP.contains(&name) => {}
            _ => parser.unsupported(child)?,
        }
    }
    Ok(ParseOutcome { verses, warnings: parser.warnings })
}

struct Parser<'a, 'input> {
    doc: &'a Document<'input>,
    opts: &'a ParseOptions,
    warnings: Vec<String>,
}

/// Lyric-side state of one part.
#[derive(Default)]
struct PartState {
    notes: Vec<Note>,
    tokens: Vec<String>,
    counts: Vec<u32>,
    /// Syllables of an English word still waiting for its `end` syllable.
    open_word: Option<(String, u32)>,
    melisma: bool,
    /// Previous note started a tie.
    tie_pending: bool,
}

struct Lyric {
    text: Option<String>,
    syllabic: String,
    extend: Option<String>,
}

impl<'a, 'input> Parser<'a, 'input> {
    fn line(&self, node: Node) -> u32 {
        self.doc.text_pos_at(node.range().start).row
    }

    fn error(&self, node: Node, message: String) -> Error {
        Error::Parse { line: self.line(node), message }
    }

    fn unsupported(&mut self, node: Node) -> Result<()> {
        let message = format!("unsupported element <{}>", node.tag_name().name());
        if self.opts.strict {
            Err(self.error(node, message))
        } else {
            let line = self.line(node);
            log::warn!("line {line}: {message}, skipped");
            self.warnings.push(format!("line {line}: {message}"));
            Ok(())
        }
    }

    fn part(&mut self, part: Node) -> Result<Option<Verse>> {
        let part_id = part.attribute("id").unwrap_or("P");
        let mut divisions: Option<f64> = None;
        let mut st = PartState::default();
        for measure in part.children().filter(Node::is_element) {
            if measure.tag_name().name() != "measure" {
                self.unsupported(measure)?;
                continue;
            }
            for el in measure.children().filter(Node::is_element) {
                match el.tag_name().name() {
                    "attributes" => {
                        for a in el.children().filter(Node::is_element) {
                            match a.tag_name().name() {
                                "divisions" => {
                                    let d: f64 = self.number(a)?;
                                    if !(d > 0.0) {
                                        return Err(self.error(a, "divisions must be positive".into()));
                                    }
                                    divisions = Some(d);
                                }
                                name if IGNORED_ATTRIBUTES.contains(&name) => {}
                                _ => self.unsupported(a)?,
                            }
                        }
                    }
                    "note" => self.note(el, divisions, &mut st)?,
                    name if IGNORED_MEASURE.contains(&name) => {}
                    _ => self.unsupported(el)?,
                }
            }
        }
        if let Some((word, count)) = st.open_word.take() {
            self.push_word(part, &mut st, &word, count)?;
        }
        if st.notes.is_empty() {
            return Ok(None);
        }
        Ok(Some(Verse {
            id: format!("{}{}", self.opts.id_prefix, part_id),
            lang_src: self.opts.lang.other(),
            lang_tgt: self.opts.lang,
            domain_tag: Domain::Lyrics,
            src_tokens: Vec::new(),
            tgt_tokens: st.tokens,
            notes: st.notes,
            src_counts: Vec::new(),
            tgt_counts: st.counts,
        }))
    }

    fn number(&self, node: Node) -> Result<f64> {
        let text = node.text().unwrap_or("").trim();
        text.parse::<f64>()
            .map_err(|_| self.error(node, format!("<{}> is not a number: {text:?}", node.tag_name().name())))
    }

    fn note(&mut self, note: Node, divisions: Option<f64>, st: &mut PartState) -> Result<()> {
        let mut pitch = None;
        let mut rest = false;
        let mut duration = None;
        let mut tie_start = false;
        let mut tie_stop = false;
        let mut slur_start = false;
        let mut slur_stop = false;
        let mut lyric: Option<Lyric> = None;

        for c in note.children().filter(Node::is_element) {
            match c.tag_name().name() {
                "pitch" => pitch = Some(self.pitch(c)?),
                "rest" => rest = true,
                "duration" => duration = Some(self.number(c)?),
                "tie" => match c.attribute("type") {
                    Some("start") => tie_start = true,
                    Some("stop") => tie_stop = true,
                    _ => return Err(self.error(c, "tie without a start/stop type".into())),
                },
                "lyric" => {
                    // Only the first lyric line is read.
                    if lyric.is_none() {
                        lyric = Some(self.lyric(c)?);
                    }
                }
                "notations" => {
                    for n in c.children().filter(Node::is_element) {
                        match (n.tag_name().name(), n.attribute("type")) {
                            ("tied", Some("start")) => tie_start = true,
                            ("tied", Some("stop")) => tie_stop = true,
                            ("tied", _) => {}
                            ("slur", Some("start")) => slur_start = true,
                            ("slur", Some("stop")) => slur_stop = true,
                            ("slur", _) => {}
                            (name, _) if IGNORED_NOTATIONS.contains(&name) => {}
                            _ => self.unsupported(n)?,
                        }
                    }
                }
                "chord" | "grace" | "cue" => {
                    // The whole note is outside the supported subset.
                    return self.unsupported(c);
                }
                name if IGNORED_NOTE.contains(&name) => {}
                _ => self.unsupported(c)?,
            }
        }

        if rest {
            st.melisma = false;
            st.tie_pending = false;
            return Ok(());
        }
        let midi = pitch.ok_or_else(|| self.error(note, "note has neither <pitch> nor <rest>".into()))?;
        let duration = duration.ok_or_else(|| self.error(note, "note without <duration>".into()))?;
        let divisions =
            divisions.ok_or_else(|| self.error(note, "note before any <divisions> was set".into()))?;
        if !(duration > 0.0) {
            return Err(self.error(note, "note duration must be positive".into()));
        }
        let dur_beats = duration / divisions;
        let lyric_text = lyric.as_ref().and_then(|l| l.text.clone());

        if tie_stop && st.tie_pending && lyric_text.is_none() {
            let prev = st.notes.last_mut().expect("tie_pending implies a previous note");
            if prev.midi == midi {
                prev.dur_beats += dur_beats;
                st.tie_pending = tie_start;
                return Ok(());
            }
        }
        st.tie_pending = tie_start;
        st.notes.push(Note::new(midi, dur_beats));

        let extend = lyric.as_ref().and_then(|l| l.extend.clone());
        let extend_open = extend.as_deref().is_some_and(|t| t != "stop");
        let extend_stop = extend.as_deref() == Some("stop");

        match (lyric_text, lyric) {
            (Some(text), Some(l)) => {
                self.syllable(note, st, &text, &l.syllabic)?;
                st.melisma = extend_open || slur_start;
            }
            _ => {
                let continues = st.melisma || extend.is_some();
                if !continues {
                    return Err(Error::Alignment(format!(
                        "note {} (line {}) has no lyric and continues no melisma",
                        st.notes.len(),
                        self.line(note)
                    )));
                }
                if let Some((_, count)) = st.open_word.as_mut() {
                    *count += 1;
                } else if let Some(last) = st.counts.last_mut() {
                    *last += 1;
                } else {
                    return Err(Error::Alignment(format!(
                        "note {} (line {}) continues a melisma with no syllable",
                        st.notes.len(),
                        self.line(note)
                    )));
                }
                st.melisma = (st.melisma && !slur_stop && !extend_stop) || slur_start || extend_open;
            }
        }
        Ok(())
    }

    fn syllable(&mut self, note: Node, st: &mut PartState, text: &str, syllabic: &str) -> Result<()> {
        match self.opts.lang {
            Lang::Zh => {
                if let Some((word, count)) = st.open_word.take() {
                    self.push_word(note, st, &word, count)?;
                }
                self.push_word(note, st, text, 1)
            }
            Lang::En => match syllabic {
                "begin" => {
                    if let Some((word, count)) = st.open_word.take() {
                        self.push_word(note, st, &word, count)?;
                    }
                    st.open_word = Some((text.to_string(), 1));
                    Ok(())
                }
                "middle" | "end" => {
                    let (mut word, count) = st.open_word.take().unwrap_or_default();
                    word.push_str(text);
                    if syllabic == "middle" {
                        st.open_word = Some((word, count + 1));
                        Ok(())
                    } else {
                        self.push_word(note, st, &word, count + 1)
                    }
                }
                _ => {
                    if let Some((word, count)) = st.open_word.take() {
                        self.push_word(note, st, &word, count)?;
                    }
                    self.push_word(note, st, text, 1)
                }
            },
        }
    }

    fn push_word(&self, at: Node, st: &mut PartState, text: &str, count: u32) -> Result<()> {
        let tokens = tokenize(text, self.opts.lang).map_err(|_| {
            Error::Alignment(format!("lyric {text:?} (line {}) holds no token", self.line(at)))
        })?;
        if tokens.len() != 1 {
            return Err(Error::Alignment(format!(
                "lyric {text:?} (line {}) holds {} tokens on one note",
                self.line(at),
                tokens.len()
            )));
        }
        st.tokens.extend(tokens);
        st.counts.push(count);
        Ok(())
    }

    fn pitch(&self, node: Node) -> Result<i32> {
        let mut step = None;
        let mut alter = 0.0;
        let mut octave = None;
        for c in node.children().filter(Node::is_element) {
            match c.tag_name().name() {
                "step" => step = c.text().map(|s| s.trim().to_string()),
                "alter" => alter = self.number(c)?,
                "octave" => octave = Some(self.number(c)?),
                _ => return Err(self.error(c, format!("unexpected <{}> in <pitch>", c.tag_name().name()))),
            }
        }
        let semitone = match step.as_deref() {
            Some("C") => 0,
            Some("D") => 2,
            Some("E") => 4,
            Some("F") => 5,
            Some("G") => 7,
            Some("A") => 9,
            Some("B") => 11,
            other => return Err(self.error(node, format!("invalid pitch step {other:?}"))),
        };
        if alter.fract() != 0.0 {
            return Err(self.error(node, format!("microtonal alter {alter} is not supported")));
        }
        let octave = octave.ok_or_else(|| self.error(node, "pitch without <octave>".into()))?;
        let midi = (octave as i32 + 1) * 12 + semitone + alter as i32;
        if !(0..=127).contains(&midi) {
            return Err(self.error(node, format!("pitch out of range: midi {midi}")));
        }
        Ok(midi)
    }

    fn lyric(&mut self, node: Node) -> Result<Lyric> {
        let mut out = Lyric { text: None, syllabic: "single".into(), extend: None };
        for c in node.children().filter(Node::is_element) {
            match c.tag_name().name() {
                "text" => {
                    let t = c.text().unwrap_or("").trim();
                    if !t.is_empty() {
                        out.text = Some(t.to_string());
                    }
                }
                "syllabic" => out.syllabic = c.text().unwrap_or("single").trim().to_string(),
                "extend" => out.extend = Some(c.attribute("type").unwrap_or("start").to_string()),
                name if IGNORED_LYRIC.contains(&name) => {}
                _ => self.unsupported(c)?,
            }
        }
        Ok(out)
    }
}
