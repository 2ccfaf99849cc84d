//! Trajectory-guided dataset distillation.
//!
//! The crate pretrains expert trajectories of small ConvNets on a labeled
//! image set, then optimizes a handful of synthetic images per class so that
//! their embeddings match the real data under extractors drawn from every
//! stage of those trajectories, while experts from a nearby window of the same
//! trajectory keep the synthetic images classifiable. Everything runs on the
//! crate's own f64 autodiff engine in [`tensor`].
//!
//! Pipeline: [`trajectory::train_trajectory`] → [`distill::run`] →
//! [`eval::evaluate`].

pub mod augment;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod format;
pub mod models;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod trajectory;

pub use error::{Error, Result};
pub use tensor::{SgdState, Tape, Tensor, Var};
