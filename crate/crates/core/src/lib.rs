//! Cross-modal instance conditioning for frozen vision-language embeddings.
//!
//! Each video is turned into a conditioning vector by a small
//! spatio-temporal adapter; that vector is added to every frozen class-text
//! embedding, and the video is classified against the adapted rows. The
//! crate contains the differentiable tensor core, the embedding store, the
//! simulated frozen encoders, the adapter zoo, training, evaluation and the
//! `xmic` command-line tool.

pub mod adapters;
pub mod cli;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod parallel;
pub mod tensor;
pub mod training;

pub use error::{Result, XmicError};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
