//! Pretraining, joint training, back-translation and curriculum sampling.

pub mod backtranslate;
pub mod curriculum;
pub mod joint;
pub mod pretrain;
pub mod synth;

pub use backtranslate::{back_translate, reverse_text_pair, BackTranslation, LengthControlledTranslator, ReverseModel};
pub use curriculum::{curriculum_ratios, sample_epoch, CurriculumSchedule};
pub use joint::{train_joint, validate, EpochMetrics, Streams, TrainOptions, Trainer};
pub use pretrain::{denoising_pretrain, NoiseSpec, TextLine};
pub use synth::{generate_synthetic_corpus, gold_count, SyntheticCorpus};
