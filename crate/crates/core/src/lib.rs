//! Probabilistic 3D segmentation from single digitally reconstructed
//! radiographs: phantoms, Siddon raytracing, 2D-to-3D U-Net and PhiSeg
//! models, training and Monte-Carlo evaluation.

// `!(x > 0.0)` is used on purpose to reject NaN along with the bound.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod drr;
pub mod error;
pub mod eval;
pub mod formats;
pub mod models;
pub mod phantom;
pub mod training;
pub mod volume;

pub use error::{Error, Result};
