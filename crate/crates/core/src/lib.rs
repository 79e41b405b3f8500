//! Causally calibrated robust classifier heads.
//!
//! A two-stage recipe for training a classifier that leans on causal rather
//! than spurious input features:
//!
//! 1. [`train::train_stage1`] fits an encoder and a linear-softmax head with
//!    cross-entropy plus a DeCov penalty that decorrelates the features.
//! 2. The stage-1 model's mistakes define pseudo-groups whose inverse
//!    propensities weight each sample ([`ipw`]).
//! 3. [`train::train_stage2`] freezes the encoder and retrains the head on
//!    the weighted cross-entropy plus a penalty built from per-feature
//!    probability-of-necessity-and-sufficiency lower bounds ([`pns`]).
//!
//! [`datagen`] provides a synthetic benchmark with known group structure and
//! [`eval`] the worst-group metrics and occlusion attribution used to judge
//! the result. [`experiment`] strings everything together.

pub mod datagen;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod fvec;
pub mod ipw;
pub mod losses;
pub mod model;
pub mod optim;
pub mod pns;
mod serde_array;
pub mod train;
pub mod types;

pub use error::{Error, Result};
pub use types::{ClassifierHead, CounterfactualMask, FeatureMatrix, LabeledDataset, ObservationMask, RngSeed};
