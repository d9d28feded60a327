//! A bicameral language model at desk scale.
//!
//! A decoder-only transformer (the language component) is pretrained and then
//! frozen. A parallel supervisor stack reads the output of every language
//! attention module and predicts one or more supervision scores for every
//! prefix of the sequence, in the same forward pass that produces the next
//! token. [`reward`] holds a brute-force verifier for the split-objective
//! argument that motivates keeping the objectives on separate parameters.

pub mod checkpoint;
pub mod data;
pub mod doppel;
pub mod error;
pub mod generation;
pub mod gradcheck;
pub mod graph;
pub mod language;
pub mod nn;
pub mod optim;
pub mod reward;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use checkpoint::Checkpoint;
pub use data::{SupervisedSequence, SyntheticTaskSpec, TaskKind};
pub use doppel::{DoppelConfig, DoppelgangerModel};
pub use error::{Error, Result};
pub use generation::{GenerationEvent, GenerationSession, SamplerConfig, Strategy};
pub use graph::{Graph, Var};
pub use language::{LMConfig, LanguageModel, LayerTaps};
pub use optim::{Adam, AdamConfig};
pub use tensor::Tensor;
pub use tokenizer::Alphabet;
pub use training::{BicameralModel, DoppelTrainConfig, EpochLog, Metrics, PretrainConfig};
