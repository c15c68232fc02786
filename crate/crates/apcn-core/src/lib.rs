//! Active predictive coding networks: a two-level hierarchy in which a
//! top-level state/action pair generates, through hypernetworks, the weights
//! of bottom-level recurrent networks that actively sample an image through a
//! differentiable glimpse sensor. State networks learn by predictive coding,
//! action networks by dense-reward REINFORCE.
//!
//! Module map:
//! - [`autodiff`] — tape-based reverse-mode differentiation over dense tensors
//! - [`glimpse`] — differentiable bilinear glimpse sensor and downsampler
//! - [`nets`] — dense/recurrent layers, hypernetworks, generated-parameter layouts
//! - [`model`] — the two-level and single-level episode loops, traces, parse trees
//! - [`training`] — losses, dense rewards, baselines, penalties, the optimizer loop
//! - [`baselines`] — the random-glimpse baseline model
//! - [`data`] — IDX and Omniglot ingestion, transfer splits
//! - [`checkpoint`] — versioned binary parameter container
//! - [`render`] — PNG panel rendering of parses, hallucinations and compositions

pub mod autodiff;
pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod glimpse;
pub mod model;
pub mod nets;
pub mod render;
pub mod training;

pub use error::{Error, Result};
