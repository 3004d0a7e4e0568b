//! IO, file formats, and the wall-clock benchmark harness around
//! `ffnf-core`: binary checkpoints, calibration sets, CSV export, plan
//! files, and a concurrent stage-execution benchmark with deterministic
//! reduction order.

pub mod bench;
pub mod calibration;
pub mod checkpoint;
pub mod csvio;
pub mod error;
pub mod planfile;

pub use error::{IoError, Result};
