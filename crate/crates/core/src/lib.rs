//! Trace-driven simulator for serving models with early-exit ramps.
//!
//! Ramp signals (error score and predicted label per feasible ramp site)
//! are recorded once per request; every exit configuration, tuning policy
//! and serving scenario is then replayed from those traces.

pub mod controller;
pub mod error;
pub mod exit;
pub mod generative;
pub mod graph;
pub mod ramps;
pub mod sim;
pub mod stats;
pub mod trace;
pub mod tuner;

pub use error::{Error, Result};
