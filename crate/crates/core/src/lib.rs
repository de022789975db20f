//! Mixtures of soft cloze prompts for extracting relational knowledge from a
//! masked language model.
//!
//! The crate bundles everything needed to run the method end to end at desk
//! scale: a synthetic world with known facts ([`world`]), a small masked
//! transformer pretrained on it ([`lm`]), hard and soft prompts ([`prompts`]),
//! the mixture model and its trainers ([`mixture`]), dataset splits
//! ([`datasets`]) and ranking metrics plus significance tests ([`eval`]).

pub mod checkpoint;
pub mod datasets;
pub mod error;
pub mod eval;
pub mod lm;
pub mod mixture;
pub mod optim;
pub mod prompts;
pub mod vocab;
pub mod world;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use lm::{EmbeddingSequence, LayerPerturbations, LmConfig, MaskedLm};
pub use mixture::{MixtureModel, TrainConfig, TuneMode, WeightingMode};
pub use prompts::{HardPrompt, PromptSet, PromptSource, SoftPrompt};
pub use vocab::Vocabulary;
