//! Multi-sense word embeddings with attention-based sense selection.
//!
//! Each word carries one global vector, `K` sense vectors and `K`
//! disambiguation vectors. A context embedding attends over the
//! disambiguation vectors to pick a sense posterior, which mixes the sense
//! scores in a negative-sampling objective. Training can additionally be
//! regularized towards sense posteriors fitted on a contextual teacher's
//! vectors.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the common choices.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod scalar;
pub mod teacher;
pub mod train;

pub use corpus::{
    tokenize, tokenize_paragraphs, ContextWindow, Corpus, NegativeSampler, VocabMode, Vocabulary,
    WindowPosition, WordId,
};
pub use error::{Error, ErrorKind, Result};
pub use model::{IterContext, SenseModelParams, SensePosterior};
pub use scalar::Scalar;
pub use teacher::{PosteriorStore, RecordStore, TeacherRecord, TeacherSenseParams};
pub use train::{KdDirection, TrainConfig, TrainContext, Trainer};

pub type SenseModel = SenseModelParams<f32>;
pub type SenseModelF64 = SenseModelParams<f64>;
pub type TeacherModel = TeacherSenseParams<f32>;
pub type TeacherModelF64 = TeacherSenseParams<f64>;
pub type SenseTrainer = Trainer<f32>;
pub type SenseTrainerF64 = Trainer<f64>;
