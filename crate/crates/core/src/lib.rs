//! Personalized heartbeat concept learning for hydraulic bed-sensor
//! ballistocardiograms.
//!
//! The crate learns a target "heartbeat" concept from bag-labeled BCG
//! sub-segments with the eFUMI expectation-maximization algorithm, then
//! uses the concept for ACE-based beat detection, cross-transducer vote
//! confirmation, sliding-window heart-rate estimation and ROC evaluation.
//! A seeded synthetic generator supplies ground-truthed recordings.
//!
//! Module map:
//!
//! * [`model`] shared domain types and the objective functions
//! * [`em`] the EM fit (E-step, M-steps, pruning, convergence)
//! * [`signal`] band-pass filter, peak picking, instances and bags
//! * [`detector`] background statistics, ACE scoring, voting, heart rate
//! * [`evaluation`] ROC analysis and rate error statistics
//! * [`synth`] synthetic multi-transducer recordings
//! * [`io`], [`config`], [`commands`] file formats and the CLI drivers

pub mod commands;
pub mod config;
pub mod detector;
pub mod em;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod model;
pub mod parallel;
pub mod signal;
pub mod synth;

pub use error::{Error, Result};
