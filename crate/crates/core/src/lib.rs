//! Group-robust knowledge distillation for small feedforward classifiers.
//!
//! The crate trains a student classifier from a frozen teacher while
//! reweighting domains of the training data by exponentiated gradient
//! ascent, so that under-represented groups are not sacrificed for the
//! majority. It also ships the two baselines it is compared with (a
//! group-robust student trained from scratch and vanilla distillation), a
//! synthetic benchmark with a spurious shortcut, and a CLI that runs the
//! multi-seed comparison.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod grad_check;
pub mod losses;
pub mod matrix;
pub mod mlp;
pub mod optim;
pub mod robust_weights;
pub mod train;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use mlp::{Activation, MlpParams, ParamGrads};
