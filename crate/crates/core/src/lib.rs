//! Counting and auditing of VVPAT slips.
//!
//! The crate covers the whole counting-day path for paper audit trails:
//!
//! * [`registry`], [`augment`] and [`dataset`] build the party-symbol corpus
//!   and the augmented labelled dataset derived from it;
//! * [`classifier`] turns slip images into features and labels them with a
//!   calibrated confidence;
//! * [`tally`] counts a per-EVM batch, queues doubtful slips for humans,
//!   reconciles against EVM totals and flags timestamp rate anomalies;
//! * [`sim`] estimates counting-day makespan at state or national scale;
//! * [`service`] exposes live adjudication over HTTP, backed by [`journal`];
//! * [`cli`] is the command-line front end used by the `vvpat` binary.

pub mod augment;
pub mod bench;
pub mod classifier;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod fixtures;
pub mod journal;
pub mod raster;
pub mod registry;
pub mod service;
pub mod sim;
pub mod tally;

pub use error::{Error, Result};
pub use registry::PartyId;
