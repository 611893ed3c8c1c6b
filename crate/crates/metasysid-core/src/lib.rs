//! In-context learning for system identification.
//!
//! A meta-model (a Transformer) is trained on an endless stream of synthetic
//! datasets, each produced by a freshly sampled dynamical system driven by
//! white noise. Given a context of input/output samples from an unseen
//! system, the trained meta-model predicts that system's behaviour directly:
//! one-step-ahead with a decoder-only architecture, multi-step simulation
//! with an encoder-decoder architecture. No system-specific model is ever
//! fitted.
//!
//! Module map:
//! - [`sysgen`]: random stable LTI and Wiener-Hammerstein system sampling and
//!   simulation.
//! - [`datastream`]: deterministic, seeded batch generation from the system
//!   priors.
//! - [`nncore`]: tensors, Transformer building blocks with hand-derived
//!   backward passes, AdamW.
//! - [`metamodel`]: the two meta-model architectures and their losses.
//! - [`trainer`]: stochastic meta-training loop, checkpoints, warm starts.
//! - [`eval`]: test-ensemble evaluation, noise sweeps, distribution-shift
//!   studies.
//! - [`baseline`]: classical per-dataset identification baselines (ARX least
//!   squares, Markov-parameter + Ho-Kalman realization).

pub mod baseline;
pub mod datastream;
pub mod eval;
pub mod metamodel;
pub mod nncore;
pub mod seeds;
pub mod sysgen;
pub mod trainer;

pub use datastream::{SequenceBatch, StreamConfig, SystemClass};
pub use eval::EvalReport;
pub use metamodel::{
    DecoderOnlyConfig, DecoderOnlyModel, EncoderDecoderConfig, EncoderDecoderModel, ModelSpec,
};
pub use nncore::{AdamW, AdamWConfig, ParamStore, Tensor};
pub use sysgen::{EigenRegion, LtiSystem, MlpNonlinearity, WhSystem};
pub use trainer::{Checkpoint, TrainConfig};
