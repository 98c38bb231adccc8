//! Gated recurrent flow propagation for semantic video segmentation.
//!
//! Per-frame class beliefs from a static backbone are fused over time by a
//! convolutional GRU whose hidden state is warped along optical flow and
//! whose reset gate measures how well the flow explains the new frame.
//!
//! Everything is differentiable through [`tape::Tape`], a small reverse-mode
//! automatic differentiation engine, and checked against central finite
//! differences by [`gradcheck`].

pub mod backbone;
pub mod checkpoint;
pub mod conv;
pub mod error;
pub mod eval;
pub mod flowdata;
pub mod gradcheck;
pub mod io;
pub mod labels;
pub mod optim;
pub mod pipeline;
pub mod stgru;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod warp;

pub use error::{GrfpError, Result};
pub use labels::{LabelMap, IGNORE};
pub use stgru::SegBelief;
pub use tensor::{Real, Tensor};
pub use warp::FlowField;
