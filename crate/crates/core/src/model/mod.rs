//! The translation model: a transformer encoder-decoder whose input
//! embeddings add pooled melody and alignment-ratio channels, with a
//! grouping head predicting how many notes each decoded token takes.

pub mod batch;
pub mod config;
pub mod embedding;
pub mod grouping;
pub mod layers;
pub mod loss;
pub mod params;

use std::path::Path;

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

pub use batch::{Batch, Example, GroupingBatch, SideInput, Slot};
pub use config::{GroupingMode, ModelConfig};
pub use embedding::NotePooling;
pub use grouping::{
    argmax_first, classify_group_count, count_distribution, group_cap, halt, AlignmentDecoder, CountClassifier,
    GroupingInputs, GroupingOutcome, GroupingRun, Halting,
};
pub use loss::{grouping_loss, grouping_loss_tensor, grouping_loss_with_grad, joint_loss, GroupingTargets};
pub use params::ParamStore;

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use embedding::lookup;
use layers::{causal_mask, sinusoidal_positions, DecoderLayer, EncoderLayer, LayerNorm};

/// Version written into checkpoint sidecars; loaders refuse anything else.
pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    format_version: u32,
    config: ModelConfig,
}

pub struct Model {
    config: ModelConfig,
    vocab: Vocabulary,
    params: ParamStore,
    embed: Tensor,
    src_notes: NotePooling,
    tgt_notes: NotePooling,
    encoder: Vec<EncoderLayer>,
    enc_norm: LayerNorm,
    decoder: Vec<DecoderLayer>,
    dec_norm: LayerNorm,
    grouping: AlignmentDecoder,
    classifier: Option<CountClassifier>,
}

/// Encoder output for a batch.
pub struct Encoded {
    /// `(B, T_src, d)`.
    pub memory: Tensor,
    /// `(B, d)` mean source alignment embedding over aligned positions.
    pub src_align: Tensor,
    pub key_mask: Tensor,
    /// `(B, N_max, d)` target-side note embeddings.
    pub tgt_notes: Tensor,
}

/// Decoder output for a batch of (possibly partial) target prefixes.
pub struct Decoded {
    /// `(B, T, d)` final-layer states.
    pub hidden: Tensor,
    /// `(B, T, d)` target alignment embeddings.
    pub align: Tensor,
}

/// Everything produced by one teacher-forced pass.
pub struct StepOutput {
    /// `(B * T_tgt, V)`.
    pub logits: Tensor,
    /// Mean token cross-entropy over target positions.
    pub nll: Tensor,
    /// Grouping loss over the same normaliser; `None` when not computed.
    pub grouping: Option<Tensor>,
    pub loss: Tensor,
    /// Adaptive-mode outcomes for every supervised token.
    pub outcomes: Vec<GroupingOutcome>,
    /// Predicted count per supervised token.
    pub counts: Vec<u32>,
    pub n_targets: usize,
}

impl Model {
    pub fn new(config: ModelConfig, vocab: Vocabulary) -> Result<Self> {
        Self::with_dtype(config, vocab, DType::F32)
    }

    pub fn with_dtype(config: ModelConfig, vocab: Vocabulary, dtype: DType) -> Result<Self> {
        config.validate()?;
        let ps = ParamStore::new(config.seed, dtype);
        let c = &config;
        let d = c.d_model;
        let embed = ps.normal("embed", &[vocab.len(), d], 1.0 / (d as f64).sqrt())?;
        let pooling = |name: &str| {
            NotePooling::new(&ps, name, d, c.midi_table, c.dur_table, c.ratio_bins, c.conv_kernel)
        };
        let src_notes = pooling("src_notes")?;
        let tgt_notes = pooling("tgt_notes")?;
        let encoder = (0..c.n_layers_enc)
            .map(|i| EncoderLayer::new(&ps, &format!("enc.{i}"), d, c.n_heads, c.ffn_dim))
            .collect::<Result<Vec<_>>>()?;
        let enc_norm = LayerNorm::new(&ps, "enc.norm", d)?;
        let decoder = (0..c.n_layers_dec)
            .map(|i| DecoderLayer::new(&ps, &format!("dec.{i}"), d, c.n_heads, c.ffn_dim))
            .collect::<Result<Vec<_>>>()?;
        let dec_norm = LayerNorm::new(&ps, "dec.norm", d)?;
        let grouping = AlignmentDecoder::new(&ps, "grouping", d, c.k_max, c.epsilon)?;
        let classifier = match c.grouping {
            GroupingMode::Classifier => {
                Some(CountClassifier::new(&ps, "count_cls", d, c.n_heads, c.ffn_dim, c.k_max)?)
            }
            GroupingMode::Adaptive => None,
        };
        Ok(Self {
            config,
            vocab,
            params: ps,
            embed,
            src_notes,
            tgt_notes,
            encoder,
            enc_norm,
            decoder,
            dec_norm,
            grouping,
            classifier,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn src_pooling(&self) -> &NotePooling {
        &self.src_notes
    }

    pub fn tgt_pooling(&self) -> &NotePooling {
        &self.tgt_notes
    }

    pub fn grouping_decoder(&self) -> &AlignmentDecoder {
        &self.grouping
    }

    pub fn collate(&self, examples: &[Example]) -> Result<Batch> {
        Batch::collate(examples, self.config.ratio_bins, self.params.device(), self.dtype())
    }

    /// `e_token + e_p + e_md + e_align` for one side; returns the sum and
    /// the alignment term.
    fn embed_side(
        &self,
        side: &batch::SideTensors,
        pooling: &NotePooling,
        notes: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let (_, t) = side.ids.dims2()?;
        let d = self.config.d_model;
        let tok = (lookup(&self.embed, &side.ids)? * (d as f64).sqrt())?;
        let pos = sinusoidal_positions(t, d, self.params.device())?.to_dtype(self.dtype())?;
        let mut x = tok.broadcast_add(&pos)?;
        if self.config.use_melody {
            x = (x + pooling.melody(&side.pool, notes)?)?;
        }
        let align = if self.config.use_align {
            pooling.alignment(&side.bins, &side.align_mask)?
        } else {
            x.zeros_like()?
        };
        Ok(((x + &align)?, align))
    }

    pub fn encode(&self, batch: &Batch) -> Result<Encoded> {
        let src_notes = self.src_notes.embed_notes(&batch.note_midi, &batch.note_dur)?;
        let tgt_notes = self.tgt_notes.embed_notes(&batch.note_midi, &batch.note_dur)?;
        let (mut x, align) = self.embed_side(&batch.src, &self.src_notes, &src_notes)?;
        for layer in &self.encoder {
            x = layer.forward(&x, Some(&batch.src_key_mask))?;
        }
        let memory = self.enc_norm.forward(&x)?;
        let src_align = batch.src_align_mean.matmul(&align)?.squeeze(1)?;
        Ok(Encoded { memory, src_align, key_mask: batch.src_key_mask.clone(), tgt_notes })
    }

    /// Runs the decoder over `side` against encoder rows `rows` of `enc`.
    pub fn decode(&self, enc: &Encoded, side: &batch::SideTensors, rows: Option<&Tensor>) -> Result<Decoded> {
        let pick = |t: &Tensor| -> Result<Tensor> {
            Ok(match rows {
                Some(r) => t.index_select(r, 0)?,
                None => t.clone(),
            })
        };
        let memory = pick(&enc.memory)?;
        let key_mask = pick(&enc.key_mask)?;
        let notes = pick(&enc.tgt_notes)?;
        let (mut x, align) = self.embed_side(side, &self.tgt_notes, &notes)?;
        let t = x.dim(1)?;
        let mask = causal_mask(t, self.params.device())?.to_dtype(self.dtype())?;
        for layer in &self.decoder {
            x = layer.forward(&x, &memory, &mask, &key_mask)?;
        }
        Ok(Decoded { hidden: self.dec_norm.forward(&x)?, align })
    }

    /// Output logits over the vocabulary (tied with the input embedding).
    pub fn logits(&self, hidden: &Tensor) -> Result<Tensor> {
        Ok(hidden.broadcast_matmul(&self.embed.t()?)?)
    }

    /// Runs adaptive grouping for tokens at flat decoder `positions`.
    pub fn run_grouping(
        &self,
        decoded: &Decoded,
        src_align: &Tensor,
        positions: &Tensor,
        remaining: Vec<usize>,
        n_notes: Vec<usize>,
    ) -> Result<GroupingRun> {
        let (b, t, d) = decoded.hidden.dims3()?;
        let hidden = decoded.hidden.reshape((b * t, d))?.index_select(positions, 0)?;
        let last_align = decoded.align.reshape((b * t, d))?.index_select(positions, 0)?;
        let inputs = GroupingInputs { hidden, src_align: src_align.clone(), last_align, remaining, n_notes };
        self.grouping.run(&inputs)
    }

    /// Classifier count logits `(P, k_max)` for tokens at flat `positions`.
    pub fn classify_counts(&self, decoded: &Decoded, positions: &Tensor) -> Result<Tensor> {
        let cls = self
            .classifier
            .as_ref()
            .ok_or_else(|| Error::Config("model has no count classifier".into()))?;
        let logits = cls.forward(&decoded.hidden)?;
        let (b, t, k) = logits.dims3()?;
        Ok(logits.reshape((b * t, k))?.index_select(positions, 0)?)
    }

    /// Teacher-forced pass with token and grouping losses, both divided by
    /// the number of target positions.
    pub fn teacher_forced_step(&self, batch: &Batch) -> Result<StepOutput> {
        let enc = self.encode(batch)?;
        let dec = self.decode(&enc, &batch.tgt, None)?;
        let (b, t, d) = dec.hidden.dims3()?;
        let logits = self.logits(&dec.hidden.reshape((b * t, d))?)?;
        let norm = batch.n_targets.max(1) as f64;
        let logp = candle_nn::ops::log_softmax(&logits, D::Minus1)?;
        let picked = logp.gather(&batch.tgt_out.unsqueeze(1)?, 1)?.squeeze(1)?;
        let nll = ((picked * &batch.tgt_weight)?.sum_all()? * (-1.0 / norm))?;

        let mut outcomes = Vec::new();
        let mut counts = Vec::new();
        let mut grouping = None;
        if let (Some(g), true) = (&batch.grouping, self.config.beta > 0.0) {
            let src_align = enc.src_align.index_select(&g.rows, 0)?;
            match self.config.grouping {
                GroupingMode::Adaptive => {
                    let run = self.run_grouping(&dec, &src_align, &g.positions, g.remaining.clone(), g.n_notes.clone())?;
                    let targets = GroupingTargets {
                        outcomes: &run.outcomes,
                        gold: &g.gold,
                        verse_of: &g.verse_of,
                        n_notes: &g.verse_notes,
                    };
                    let l = grouping_loss_tensor(&run.alphas, &targets, self.config.w_multi, self.config.epsilon)?;
                    grouping = Some((l / norm)?);
                    counts = run.outcomes.iter().map(|o| o.k as u32).collect();
                    outcomes = run.outcomes;
                }
                GroupingMode::Classifier => {
                    let cls = self.classify_counts(&dec, &g.positions)?;
                    let k_max = self.config.k_max as u32;
                    let gold: Vec<u32> = g.gold.iter().map(|&c| c.clamp(1, k_max) - 1).collect();
                    let gold = Tensor::from_vec(gold, (g.gold.len(), 1), self.params.device())?;
                    let lp = candle_nn::ops::log_softmax(&cls, D::Minus1)?;
                    let ce = (lp.gather(&gold, 1)?.sum_all()? * (-1.0 / norm))?;
                    grouping = Some(ce);
                    let host = cls.to_dtype(DType::F64)?.to_vec2::<f64>()?;
                    counts = host.iter().map(|row| classify_group_count(row) as u32).collect();
                }
            }
        }
        let loss = match &grouping {
            Some(l) => (&nll + (l * self.config.beta)?)?,
            None => nll.clone(),
        };
        Ok(StepOutput { logits, nll, grouping, loss, outcomes, counts, n_targets: batch.n_targets })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let meta = CheckpointMeta { format_version: CHECKPOINT_FORMAT, config: self.config.clone() };
        std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(&meta)?)?;
        std::fs::write(dir.join("vocab.json"), serde_json::to_string(&self.vocab)?)?;
        self.params
            .varmap()
            .save(dir.join("weights.safetensors"))
            .map_err(|e| Error::Checkpoint { path: dir.to_path_buf(), message: e.to_string() })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let fail = |m: String| Error::Checkpoint { path: dir.to_path_buf(), message: m };
        let meta: CheckpointMeta = serde_json::from_str(
            &std::fs::read_to_string(dir.join("config.json")).map_err(|e| fail(format!("config.json: {e}")))?,
        )
        .map_err(|e| fail(format!("config.json: {e}")))?;
        if meta.format_version != CHECKPOINT_FORMAT {
            return Err(fail(format!(
                "format version {} is not supported (expected {CHECKPOINT_FORMAT})",
                meta.format_version
            )));
        }
        let vocab: Vocabulary = serde_json::from_str(
            &std::fs::read_to_string(dir.join("vocab.json")).map_err(|e| fail(format!("vocab.json: {e}")))?,
        )
        .map_err(|e| fail(format!("vocab.json: {e}")))?;
        let mut model = Self::new(meta.config, vocab)?;
        model
            .params
            .varmap_mut()
            .load(dir.join("weights.safetensors"))
            .map_err(|e| fail(format!("weights: {e}")))?;
        Ok(model)
    }

    /// Single-verse note embeddings on the target side, `(N, d)`.
    pub fn embed_notes(&self, notes: &[(u32, u32)]) -> Result<Tensor> {
        let n = notes.len();
        let device = self.params.device();
        let midi = Tensor::from_vec(notes.iter().map(|n| n.0).collect::<Vec<_>>(), (1, n), device)?;
        let dur = Tensor::from_vec(notes.iter().map(|n| n.1).collect::<Vec<_>>(), (1, n), device)?;
        Ok(self.tgt_notes.embed_notes(&midi, &dur)?.squeeze(0)?)
    }

    /// Single-verse target alignment embedding from cumulative ratios.
    pub fn alignment_embedding(&self, ratios: &[f64]) -> Result<Tensor> {
        self.tgt_notes.alignment_from_ratios(ratios)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SpecialToken;

    fn tiny(beta: f64) -> Model {
        let cfg = ModelConfig { d_model: 16, n_heads: 2, ffn_dim: 32, n_layers_enc: 1, n_layers_dec: 1, beta, ..ModelConfig::default() };
        let vocab = Vocabulary::from_tokens(["a", "b", "c", "x", "y", "z"]);
        Model::with_dtype(cfg, vocab, DType::F64).unwrap()
    }

    fn example(m: &Model, src: &[&str], tgt: &[&str], counts: &[u32]) -> Example {
        example_with_source(m, src, counts, tgt, counts)
    }

    fn example_with_source(m: &Model, src: &[&str], src_counts: &[u32], tgt: &[&str], counts: &[u32]) -> Example {
        let v = m.vocab();
        let s: Vec<u32> = src.iter().map(|t| v.id(t)).collect();
        let y: Vec<u32> = tgt.iter().map(|t| v.id(t)).collect();
        let n: u32 = counts.iter().sum();
        let prefix = [SpecialToken::ToZh.id(), SpecialToken::Lyrics.id()];
        let mut ex = Example::text(&prefix, &s, &y);
        ex.notes = (0..n).map(|i| (60 + i, 3)).collect();
        ex.src = batch::encoder_input(&prefix, &s, Some(src_counts), n as usize);
        ex.tgt_in = batch::decoder_input(&y, Some(counts), n as usize);
        ex.gold_counts = Some(counts.to_vec());
        ex
    }

    #[test]
    fn trivial_verse_gives_finite_losses() {
        let m = tiny(0.8);
        let b = m.collate(&[example(&m, &["a"], &["x"], &[1])]).unwrap();
        let out = m.teacher_forced_step(&b).unwrap();
        assert_eq!(out.counts, vec![1]);
        assert!(out.loss.to_scalar::<f64>().unwrap().is_finite());
        assert_eq!(out.logits.dims(), &[2, m.vocab().len()]);
    }

    #[test]
    fn decoder_is_causal_in_tokens_and_counts() {
        let m = tiny(0.8);
        let a = example_with_source(&m, &["a", "b", "c"], &[1, 2, 1], &["x", "y", "z"], &[1, 2, 1]);
        let b = example_with_source(&m, &["a", "b", "c"], &[1, 2, 1], &["x", "z", "y"], &[1, 1, 2]);
        let oa = m.teacher_forced_step(&m.collate(&[a]).unwrap()).unwrap();
        let ob = m.teacher_forced_step(&m.collate(&[b]).unwrap()).unwrap();
        let la = oa.logits.to_vec2::<f64>().unwrap();
        let lb = ob.logits.to_vec2::<f64>().unwrap();
        // Positions 0 and 1 see only BOS and y_1, identical in both.
        assert_eq!(la[0], lb[0]);
        assert_eq!(la[1], lb[1]);
        assert_ne!(la[2], lb[2]);
        assert_eq!(oa.outcomes[..2], ob.outcomes[..2]);
    }

    #[test]
    fn beta_zero_skips_grouping() {
        let m = tiny(0.0);
        let b = m.collate(&[example(&m, &["a", "b"], &["x", "y"], &[2, 1])]).unwrap();
        let out = m.teacher_forced_step(&b).unwrap();
        assert!(out.grouping.is_none());
        let grads = out.loss.backward().unwrap();
        let v = m.params().var("grouping.halt.weight").unwrap();
        assert!(grads.get(v.as_tensor()).is_none());
    }

    #[test]
    fn disabled_channels_match_text_only_inputs() {
        let cfg = ModelConfig {
            d_model: 16,
            n_heads: 2,
            ffn_dim: 32,
            n_layers_enc: 1,
            n_layers_dec: 1,
            use_melody: false,
            use_align: false,
            ..ModelConfig::default()
        };
        let vocab = Vocabulary::from_tokens(["a", "b", "x", "y"]);
        let m = Model::with_dtype(cfg, vocab, DType::F64).unwrap();
        let full = example(&m, &["a", "b"], &["x", "y"], &[2, 1]);
        let mut plain = full.clone();
        plain.src = batch::encoder_input(&[SpecialToken::ToZh.id(), SpecialToken::Lyrics.id()], &[m.vocab().id("a"), m.vocab().id("b")], None, 0);
        plain.tgt_in = batch::decoder_input(&[m.vocab().id("x"), m.vocab().id("y")], None, 0);
        plain.notes.clear();
        plain.gold_counts = None;
        let lf = m.teacher_forced_step(&m.collate(&[full]).unwrap()).unwrap().logits.to_vec2::<f64>().unwrap();
        let lp = m.teacher_forced_step(&m.collate(&[plain]).unwrap()).unwrap().logits.to_vec2::<f64>().unwrap();
        for (a, b) in lf.iter().flatten().zip(lp.iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let vocab = Vocabulary::from_tokens(["a", "b"]);
        let cfg = ModelConfig { d_model: 16, n_heads: 2, ffn_dim: 32, n_layers_enc: 1, n_layers_dec: 1, ..ModelConfig::default() };
        let m = Model::new(cfg, vocab).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let loaded = Model::load(dir.path()).unwrap();
        assert_eq!(loaded.config(), m.config());
        assert_eq!(loaded.vocab(), m.vocab());
        let a = m.params().var("embed").unwrap().to_vec2::<f32>().unwrap();
        let b = loaded.params().var("embed").unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(a, b);

        let meta = std::fs::read_to_string(dir.path().join("config.json")).unwrap();
        std::fs::write(dir.path().join("config.json"), meta.replace("\"format_version\": 1", "\"format_version\": 9")).unwrap();
        assert!(matches!(Model::load(dir.path()), Err(Error::Checkpoint { .. })));
    }
}
