//! Semi-supervised dual-agreement co-training for joint pixel-wise
//! segmentation and multi-label classification of single 2-D images.
//!
//! Two heterogeneous networks are trained together: a patch-attention
//! network that is the one used at inference, and a convolutional U-Net
//! partner with an exponential-moving-average teacher. The objective
//! combines supervised terms, cross-pseudo supervision, interpolation
//! consistency and a dual-agreement (KL plus entropy) term.

pub mod archive;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod teacher;
pub mod tensor;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
