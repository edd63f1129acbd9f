//! Objective-centric multi-task training.
//!
//! A run is composed from [`objectives::Objective`]s (each owning its data,
//! encoding, loss and evaluation state) and a [`schedules::Schedule`] that
//! decides which objective supplies the next batch. All objectives train one
//! [`lang_module::LangModule`]: a shared encoder-decoder body plus one head
//! per objective, with parameters merged by name and value.

pub mod error;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};

pub mod batch;
pub mod data;
pub mod model;
pub mod lang_module;
pub mod evaluation;
pub mod checkpoint;
pub mod objectives;
pub mod schedules;
pub mod trainer;
pub mod experiment;

pub use batch::Batch;
pub use checkpoint::{load_head_checkpoint, save_head_checkpoint, StandaloneModel};
pub use data::{DomainId, TextPairSource, Vocab};
pub use evaluation::{Evaluator, Metric, Split};
pub use experiment::{run_experiment, run_grid, ExperimentConfig, ResultsRow};
pub use lang_module::{LangModule, MergeReport};
pub use model::{Head, HeadKind, ModelConfig, Transformer};
pub use objectives::{Objective, ObjectiveKind, ReverseTranslator};
pub use schedules::{SamplingStrategy, Schedule};
pub use tensor::{Parameter, Tensor};
pub use trainer::{train, TrainingArguments};
