//! Glass detection toolkit: label decoupling, evaluation metrics, a small
//! reverse-mode autodiff engine, the three-stream detection network, a
//! synthetic scene generator and the training loop tying them together.

pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod labelkit;
pub mod losses;
pub mod maps;
pub mod metrics;
pub mod network;
pub mod neural;
pub mod par;
pub mod trainer;

pub use error::{Error, Result};
pub use maps::{BinaryMask, DistanceMap, FloatMap, PredictionMap};
