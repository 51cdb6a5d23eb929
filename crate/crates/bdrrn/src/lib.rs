//! B-DRRN: a block-information-constrained recursive residual network for
//! compressed-video quality enhancement, with the surrounding toolkit —
//! partition parsing, mean-mask rendering, patch datasets, training, and
//! PSNR/BD-rate evaluation.

pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod partition;
pub mod plane;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
