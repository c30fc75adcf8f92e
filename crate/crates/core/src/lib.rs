//! Toy multimodal transformer with gradient-weighted attention relevance.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] and [`graph`]: dense `f64` tensors and a replayable
//!   reverse-mode computation record with gradient taps.
//! - [`compressor`]: adaptive average/max pooling over patch grids and the
//!   structural query-to-patch maps of pooling and linear projectors.
//! - [`model`]: a miniature encoder → projector → decoder pipeline on a
//!   synthetic grid-caption task, with tracing of attention and gradients.
//! - [`rgae`]: relevance propagation producing text-to-query,
//!   query-to-patch and text-to-patch maps.
//! - [`trace_io`], [`viz`], [`experiments`]: binary containers, heatmap
//!   rendering and the sweep drivers used by the CLI.

pub mod compressor;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod rgae;
pub mod tensor;
pub mod testing;
pub mod trace_io;
pub mod viz;

pub use error::{Error, Result};
pub use tensor::Tensor;
