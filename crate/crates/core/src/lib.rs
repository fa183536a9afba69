//! Semantic phrase translation model.
//!
//! Source and target phrases are embedded as bag-of-words vectors, projected
//! into a shared low-dimensional space by a small tanh network, and scored
//! by the similarity of their projections. The summed similarity over a
//! candidate's phrase derivation becomes one extra feature of a log-linear
//! translation model. The network is trained by batch L-BFGS to maximize
//! the expected sentence BLEU of N-best lists, using closed-form gradients,
//! and the learned feature is then used to rerank N-best lists.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix it to `f64`, which is what the CLI uses by default.

pub mod bleu;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod gradcheck;
pub mod lbfgs;
pub mod matrix;
pub mod model;
pub mod objective;
pub mod rerank;
pub mod scalar;
pub mod synth;
pub mod textio;
pub mod trainer;

pub use corpus::{LambdaVector, NBestEntry, Phrase, PhrasePair, TrainingSample, Vocabulary};
pub use error::{Error, Result};
pub use model::{Arch, SimMode};
pub use scalar::Scalar;

pub type Matrix = matrix::Matrix<f64>;
pub type ModelParams = model::ModelParams<f64>;
pub type ForwardTrace = model::ForwardTrace<f64>;
pub type GradientAccumulator = objective::GradientAccumulator<f64>;
pub type Objective = objective::Objective<f64>;
pub type LbfgsState = lbfgs::LbfgsState<f64>;

pub type Matrix32 = matrix::Matrix<f32>;
pub type ModelParams32 = model::ModelParams<f32>;
pub type Objective32 = objective::Objective<f32>;
