use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use ltag_core::alignment::TrimOrder;
use ltag_core::config::RunConfig;
use ltag_core::corpus::{
    parse_musicxml, read_jsonl_file, validate_record, write_jsonl_file, Lang, ParseOptions, Verse, Vocabulary,
};
use ltag_core::decode::{export_score, translate_batch, DecodeOptions, PredictionRecord, DEFAULT_BEAM};
use ltag_core::eval::evaluate;
use ltag_core::model::Model;
use ltag_core::training::{
    back_translate, denoising_pretrain, generate_synthetic_corpus, reverse_text_pair, train_joint, NoiseSpec,
    ReverseModel, Streams, TextLine,
};

mod manifest;

use manifest::Manifest;

#[derive(Parser, Debug)]
#[command(name = "ltag", version, about = "Lyrics translation with melody alignment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Run configuration (key = value lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse MusicXML or JSONL inputs, validate, and write canonical JSONL.
    Ingest {
        /// Files or directories (`.xml`, `.musicxml`, `.jsonl`).
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Lyric language of MusicXML inputs.
        #[arg(long, default_value = "zh")]
        lang: Lang,
        /// Fail on unknown elements and invalid records (default).
        #[arg(long, conflicts_with = "lenient")]
        strict: bool,
        /// Downgrade unknown elements to warnings and skip invalid records.
        #[arg(long)]
        lenient: bool,
    },
    /// Generate a synthetic parallel corpus.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        verses: usize,
        #[arg(long, default_value_t = 200)]
        vocab: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also write the source-to-target lexicon as JSON.
        #[arg(long)]
        lexicon: Option<PathBuf>,
    },
    /// Denoising pretraining on the text of a corpus.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        /// Checkpoint directory to write.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 0.1)]
        mask_prob: f64,
        #[arg(long, default_value_t = 0.1)]
        delete_prob: f64,
    },
    /// Joint training of translation and grouping.
    Train {
        #[command(flatten)]
        common: Common,
        /// Annotated parallel verses.
        #[arg(long)]
        train: PathBuf,
        /// Back-translated verses.
        #[arg(long)]
        bt: Option<PathBuf>,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Start from this checkpoint's weights and vocabulary.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Train the text-only reverse model used for back-translation.
        #[arg(long)]
        reverse: bool,
    },
    /// Give monolingual verses a one-token-per-note synthetic source side.
    Backtranslate {
        /// Reverse model checkpoint.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        mono: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_BEAM)]
        beam: usize,
    },
    /// Translate source verses and predict note counts.
    Translate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_BEAM)]
        beam: usize,
        #[arg(long = "post-process", default_value = "trim_tail_first")]
        post_process: TrimOrder,
        /// Write one MusicXML score per translated verse into this directory.
        #[arg(long = "export-musicxml")]
        export_musicxml: Option<PathBuf>,
    },
    /// Score predictions against gold verses.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a complete default configuration file.
    PrintConfig,
}

/// Failure with its exit status: 1 for validation or evaluation failures,
/// 2 for usage errors.
#[derive(Debug)]
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let usage = error
            .chain()
            .any(|e| matches!(e.downcast_ref::<ltag_core::Error>(), Some(ltag_core::Error::Config(_))));
        Self { code: if usage { 2 } else { 1 }, error }
    }
}

impl From<ltag_core::Error> for Failure {
    fn from(e: ltag_core::Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure { code: 2, error: anyhow::anyhow!(msg.into()) }
}

fn load_config(common: &Common) -> Result<RunConfig, Failure> {
    let path = common.config.as_ref().ok_or_else(|| {
        usage(format!(
            "--config is required; a complete default file is:\n{}",
            RunConfig::default().render()
        ))
    })?;
    let mut cfg = RunConfig::from_file(path).with_context(|| format!("reading {}", path.display()))?;
    if let Some(seed) = common.seed {
        cfg.model.seed = seed;
    }
    Ok(cfg)
}

fn read_corpus(path: &Path) -> Result<Vec<Verse>, Failure> {
    Ok(read_jsonl_file(path).with_context(|| format!("reading {}", path.display()))?)
}

fn write_json_lines<T: serde::Serialize>(path: &Path, items: &[T]) -> anyhow::Result<()> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

fn collect_inputs(inputs: &[PathBuf]) -> anyhow::Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut entries: Vec<PathBuf> = std::fs::read_dir(p)
                .with_context(|| format!("listing {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| matches!(f.extension().and_then(|e| e.to_str()), Some("xml" | "musicxml" | "jsonl")))
                .collect();
            entries.sort();
            files.extend(entries);
        } else {
            files.push(p.clone());
        }
    }
    Ok(files)
}

fn cmd_ingest(inputs: &[PathBuf], out: &Path, lang: Lang, strict: bool) -> Result<(), Failure> {
    let files = collect_inputs(inputs)?;
    let mut verses = Vec::new();
    let mut warnings = Vec::new();
    for f in &files {
        let is_jsonl = f.extension().and_then(|e| e.to_str()) == Some("jsonl");
        if is_jsonl {
            verses.extend(read_corpus(f)?);
        } else {
            let text = std::fs::read_to_string(f).with_context(|| format!("reading {}", f.display()))?;
            let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or("score");
            let mut opts = ParseOptions::new(lang).with_prefix(format!("{stem}:"));
            opts.strict = strict;
            let parsed = parse_musicxml(&text, &opts).with_context(|| format!("parsing {}", f.display()))?;
            warnings.extend(parsed.warnings.into_iter().map(|w| format!("{}: {w}", f.display())));
            verses.extend(parsed.verses);
        }
    }
    let mut valid = Vec::new();
    let mut invalid = Vec::new();
    for v in verses {
        let violations = validate_record(&v);
        if violations.is_empty() {
            valid.push(v);
        } else {
            let listed: Vec<String> = violations.iter().map(|x| x.to_string()).collect();
            eprintln!("record {}: {}", v.id, listed.join("; "));
            invalid.push(serde_json::json!({"id": v.id, "violations": listed}));
        }
    }
    let summary = serde_json::json!({
        "files": files.len(),
        "written": valid.len(),
        "invalid": invalid,
        "warnings": warnings,
    });
    println!("{}", serde_json::to_string_pretty(&summary).map_err(anyhow::Error::from)?);
    if strict && !invalid.is_empty() {
        return Err(Failure {
            code: 1,
            error: anyhow::anyhow!("{} record(s) failed validation", invalid.len()),
        });
    }
    write_jsonl_file(out, &valid).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

fn text_lines(verses: &[Verse]) -> Vec<TextLine> {
    let mut lines = Vec::new();
    for v in verses {
        if !v.tgt_tokens.is_empty() {
            lines.push(TextLine { lang: v.lang_tgt, domain: v.domain_tag, tokens: v.tgt_tokens.clone() });
        }
        if !v.src_tokens.is_empty() {
            lines.push(TextLine { lang: v.lang_src, domain: v.domain_tag, tokens: v.src_tokens.clone() });
        }
    }
    lines
}

fn run(cli: Cli, argv: &[String]) -> Result<(), Failure> {
    let mut manifest = Manifest::new(argv);
    match cli.command {
        Command::PrintConfig => {
            print!("{}", RunConfig::default().render());
        }
        Command::Ingest { inputs, out, lang, strict: _, lenient } => {
            cmd_ingest(&inputs, &out, lang, !lenient)?;
            manifest.write_beside(&out)?;
        }
        Command::Synth { seed, verses, vocab, out, lexicon } => {
            let corpus = generate_synthetic_corpus(seed, verses, vocab)?;
            write_jsonl_file(&out, &corpus.verses)?;
            if let Some(path) = lexicon {
                std::fs::write(&path, serde_json::to_string_pretty(&corpus.lexicon).map_err(anyhow::Error::from)?)
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            manifest.seed = Some(seed);
            manifest.write_beside(&out)?;
            log::info!("wrote {} verses to {}", corpus.verses.len(), out.display());
        }
        Command::Pretrain { common, corpus, out, epochs, mask_prob, delete_prob } => {
            let cfg = load_config(&common)?;
            manifest.set_config(&cfg);
            let verses = read_corpus(&corpus)?;
            let vocab = Vocabulary::build(verses.iter());
            let model = Model::new(cfg.model.clone(), vocab)?;
            let noise = NoiseSpec { mask_prob, delete_prob, seed: cfg.model.seed };
            let losses = denoising_pretrain(&model, &text_lines(&verses), &noise, &cfg.train, epochs)?;
            model.save(&out)?;
            let log: Vec<_> = losses
                .iter()
                .enumerate()
                .map(|(i, l)| serde_json::json!({"epoch": i + 1, "nll": l}))
                .collect();
            write_json_lines(&out.join("pretrain_metrics.jsonl"), &log)?;
            manifest.write_in(&out)?;
        }
        Command::Train { common, train, bt, val, out, init, reverse } => {
            let cfg = load_config(&common)?;
            manifest.set_config(&cfg);
            let mut at = read_corpus(&train)?;
            let mut bt = match bt {
                Some(p) => read_corpus(&p)?,
                None => Vec::new(),
            };
            let mut val = match val {
                Some(p) => read_corpus(&p)?,
                None => Vec::new(),
            };
            if reverse {
                if !cfg.model.length_control {
                    log::warn!("reverse model trained without length_control; back-translation will rely on EOS masking alone");
                }
                for pool in [&mut at, &mut bt, &mut val] {
                    *pool = pool.iter().map(reverse_text_pair).collect();
                }
            }
            let model = match init {
                Some(dir) => {
                    let base = Model::load(&dir)?;
                    let model = Model::new(cfg.model.clone(), base.vocab().clone())?;
                    copy_weights(&base, &model)?;
                    model
                }
                None => Model::new(cfg.model.clone(), Vocabulary::build(at.iter().chain(&bt).chain(&val)))?,
            };
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let log_path = out.join("metrics.jsonl");
            let mut lines = Vec::new();
            let streams = Streams { bt, at };
            let log = train_joint(&model, &streams, &val, &cfg.curriculum, &cfg.train, |m| {
                lines.push(m.clone());
                if let Err(e) = write_json_lines(&log_path, &lines) {
                    log::error!("{e:#}");
                }
                true
            })?;
            model.save(&out)?;
            log::info!("trained {} epochs; checkpoint in {}", log.len(), out.display());
            manifest.write_in(&out)?;
        }
        Command::Backtranslate { model, mono, out, beam } => {
            let model = Model::load(&model)?;
            manifest.set_model(&model);
            let mono = read_corpus(&mono)?;
            let translator = ReverseModel { model: &model, options: DecodeOptions { beam, ..DecodeOptions::default() } };
            let result = back_translate(&mono, &translator);
            write_jsonl_file(&out, &result.verses)?;
            println!(
                "{}",
                serde_json::json!({"converted": result.verses.len(), "skipped": result.skipped})
            );
            manifest.write_beside(&out)?;
        }
        Command::Translate { model, input, out, beam, post_process, export_musicxml } => {
            if beam == 0 {
                return Err(usage("--beam must be at least 1"));
            }
            let model = Model::load(&model)?;
            manifest.set_model(&model);
            let sources = read_corpus(&input)?;
            let opts = DecodeOptions { beam, post_process, ..DecodeOptions::default() };
            let mut records = Vec::new();
            let mut failures = 0;
            if let Some(dir) = &export_musicxml {
                std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            for (src, result) in sources.iter().zip(translate_batch(&model, &sources, &opts)) {
                match result {
                    Ok(t) => {
                        if let Some(dir) = &export_musicxml {
                            match export_score(src, &t.tokens, &t.counts) {
                                Ok(score) => {
                                    let name = src.id.replace(|c: char| !c.is_alphanumeric() && c != '-', "_");
                                    let path = dir.join(format!("{name}.musicxml"));
                                    std::fs::write(&path, score.musicxml)
                                        .with_context(|| format!("writing {}", path.display()))?;
                                }
                                Err(e) => {
                                    failures += 1;
                                    eprintln!("verse {}: {e}", src.id);
                                }
                            }
                        }
                        records.push(PredictionRecord::from(&t));
                    }
                    Err(e) => {
                        failures += 1;
                        eprintln!("verse {}: {e}", src.id);
                    }
                }
            }
            write_json_lines(&out, &records)?;
            manifest.write_beside(&out)?;
            if failures > 0 {
                return Err(Failure { code: 1, error: anyhow::anyhow!("{failures} verse(s) could not be decoded") });
            }
        }
        Command::Evaluate { pred, gold, out } => {
            let text = std::fs::read_to_string(&pred).with_context(|| format!("reading {}", pred.display()))?;
            let preds: Vec<PredictionRecord> = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .enumerate()
                .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{} line {}", pred.display(), i + 1)))
                .collect::<anyhow::Result<_>>()?;
            let gold = read_corpus(&gold)?;
            let report = evaluate(&preds, &gold)?;
            let json = serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)?;
            println!("{json}");
            if let Some(out) = out {
                std::fs::write(&out, &json).with_context(|| format!("writing {}", out.display()))?;
                manifest.write_beside(&out)?;
            }
        }
    }
    Ok(())
}

/// Copies every parameter present in both models with the same shape.
fn copy_weights(from: &Model, to: &Model) -> anyhow::Result<()> {
    let mut copied = 0;
    for (name, var) in to.params().named_vars() {
        if let Some(src) = from.params().var(&name) {
            if src.shape() == var.shape() {
                var.set(src.as_tensor())?;
                copied += 1;
            }
        }
    }
    log::info!("initialised {copied} parameter tensors from checkpoint");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("LTAG_LOG_LEVEL", "info")).init();
    let argv: Vec<String> = std::env::args().collect();
    let cli = Cli::parse();
    match run(cli, &argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
