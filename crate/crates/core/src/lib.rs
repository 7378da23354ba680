//! Retrieval-augmented time-series forecasting at desk scale.
//!
//! The pipeline: cut sliding windows from source series, build an exact
//! top-k retrieval index over them, pretrain a small frozen backbone, then
//! train attention-based fusion modules that combine the backbone's query
//! representation with the retrieved windows, and evaluate the whole thing
//! zero-shot.

pub mod check;
pub mod checkpoint;
pub mod fusion;
pub mod efficiency;
pub mod error;
pub mod eval;
pub mod figures;
pub mod oracle;
pub mod retrieval;
pub mod series;
pub mod tape;
pub mod tensor;
pub mod toy;
pub mod train;

pub use error::{Result, XragError};
