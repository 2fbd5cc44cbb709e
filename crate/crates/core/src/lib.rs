//! Multi-stream video recognition with learned intermediate representations.
//!
//! RGB clips feed three recognition towers: one on raw pixels, one on a
//! differentiable TV-L1 optical-flow layer ([`repflow`]), and one on the
//! logits of a per-frame segmentation network ([`towers`]). Features are
//! averaged after block 3 and a merged tower finishes the prediction. Five
//! weighted losses drive training ([`training`]) and the weights themselves
//! can be tuned by tournament evolution ([`evolution`]).

pub mod checkpoint;
pub mod error;
pub mod evolution;
pub mod experiment;
pub mod gradcheck;
pub mod params;
pub mod repflow;
pub mod synthdata;
pub mod tensor;
pub mod towers;
pub mod training;

pub use error::{Error, Result};
