//! Spiking temporal pathway for detecting AI-generated video.
//!
//! The pipeline turns frame residuals into sparse event grids, runs them
//! through a spiking gate network that scores temporal anomalies, and fuses
//! the result with clip-level embedding statistics. Everything is f64 and
//! deterministic: the same seed and config reproduce a run bit for bit.

pub mod config;
pub mod diffcore;
pub mod energy;
pub mod error;
pub mod events;
pub mod gatenet;
pub mod io;
pub mod metrics;
pub mod snn;
pub mod synthgen;
pub mod train;

pub use diffcore::{NodeId, ParamId, ParamStore, Parameter, SpikeMode, Tape, Tensor, VthRef};
pub use error::{Result, SgError};
pub use events::{Clip, EmbeddingSequence, EventConfig, EventTensor, Label};
