//! Online class-incremental learning with dynamic feature preservation,
//! per-class mixture models fitted through optimal-transport duality, and a
//! centroid-aware replay memory.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod oracle;
pub mod otmm;
pub mod preservation;
pub mod replay;

pub use error::{Error, Result};
