//! Cascaded dual-U-Net segmentation with loss-weighted sampling, built on
//! a self-contained f64 tensor/autograd core.
//!
//! The crate covers the full desk-scale pipeline: synthetic multi-modal
//! tumor phantoms, region-partitioned sampled cross-entropy, joint
//! training of both U-Net stages with auxiliary supervision, mask-fused
//! prediction, and Dice/sensitivity/specificity reporting.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod lws;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use mask::{LabelMap, Mask};
pub use tensor::{Graph, ParamBinding, ParamSet, Tensor, Var};
