//! Multimodal generalization lab: modality-robust attention fusion,
//! cross-modal contrastive alignment and cross-modal prototypical training,
//! with the supervised and few-shot train/evaluate pipelines built on top.

// `!(x > 0.0)` comparisons deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataeng;
pub mod encoders;
pub mod episodic;
pub mod error;
pub mod fusion;
pub mod losses;
pub mod modality;
pub mod model;
pub mod numcore;
pub mod orchestrator;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use modality::{Modality, ModalityMask};
