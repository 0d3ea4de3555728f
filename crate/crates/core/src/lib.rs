//! Acoustic pseudorange localization toolkit.
//!
//! A constellation of speakers plays a staggered sequence of identical
//! chirps; a single-microphone receiver matched-filters its recording,
//! turns first-arrival sample numbers into pseudoranges and solves for its
//! position and clock bias. The same recording can carry a short command
//! chirp that is classified by matched filtering.

pub mod commander;
pub mod config;
pub mod detector;
pub mod error;
pub mod pipeline;
pub mod report;
pub mod signal;
pub mod simulator;
pub mod solver;
pub mod wav;

pub use error::{Error, Result};
