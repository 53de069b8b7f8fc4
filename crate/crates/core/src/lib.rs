//! Simulator for vertical federated learning with secret-shared layer
//! masking.
//!
//! Passive parties train bottom models on their feature slices while the
//! active party holds labels and the top model. Selected bottom-model layers
//! are kept as additive shares between the owning passive party and the
//! active party, so the passive party cannot run a model-completion attack
//! on its own copy. Which layers to mask is decided every epoch by the active
//! party, which trains seed-matched shadow models on auxiliary data and
//! simulates the attack locally against a privacy budget.

pub mod attack;
pub mod audit;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod masking;
pub mod metrics;
pub mod nn;
pub mod party;
pub mod reference;
pub mod rng;
pub mod run;
pub mod secure_train;
pub mod select;
pub mod shadow;
pub mod share;
pub mod tensor;
pub mod transport;

pub use error::{Error, Result};
pub use tensor::DenseTensor;
