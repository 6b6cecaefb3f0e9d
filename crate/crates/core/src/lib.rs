//! Interpretable prototypical classification head over frozen token embeddings.
//!
//! A sample is a `T×D` matrix of token embeddings. The head pools tokens with
//! a learned attention, measures the pooled encoding against `N` class-assigned
//! prototypes, and classifies from the resulting similarity vector with a
//! bias-free linear layer. Training mixes cross-entropy with cohesion and
//! separation terms; the `interpret` and `faithfulness` modules explain a
//! trained head through its prototypes.

pub mod cli;
pub mod config;
pub mod datastore;
pub mod error;
pub mod faithfulness;
pub mod gradcheck;
pub mod interpret;
pub mod loss;
pub mod model;
pub mod numerics;
pub mod report;
pub mod synth;
pub mod trainer;

pub use config::{SimActivation, TrainConfig};
pub use datastore::{Dataset, Target, TaskMode, TokenEmbeddingSample};
pub use error::{Error, Result};
pub use model::{forward, init_params, ForwardTrace, HeadParameters};
