//! Turn-level user satisfaction modelling for conversational agents.
//!
//! The crate bundles everything needed to train and evaluate satisfaction
//! predictors on multi-turn sessions:
//!
//! * [`autodiff`]: a small define-by-run reverse-mode AD engine over dense
//!   `f64` tensors, with a finite-difference gradient checker.
//! * [`data`]: sessions, a seeded synthetic corpus generator, context
//!   windows and skill-disjoint evaluation splits.
//! * [`model`]: shared turn encoder, GRU context summarizers, pooled
//!   session representation and MLP heads.
//! * [`train`]: supervised training, contrastive self-supervised
//!   pretraining, finetuning, and the gradient-alignment block coordinate
//!   descent trainer for few-shot transfer.
//! * [`metrics`]: AUC-ROC, AUC-PR and multi-seed aggregation.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use params::{Layer, LrTier, ParamKey, ParamSet, Role};
pub use tensor::Tensor;
