//! Segment-wise recurrent forecasting with implicit segmentation, a residual
//! bypass around the recurrence, and selective state-space preprocessing.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod mamba;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorKind, Result};
