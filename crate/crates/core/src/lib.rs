//! Continuous-time Bayesian persuasion as a linear-quadratic ergodic game
//! under partial observation.
//!
//! The Receiver filters a hidden Ornstein–Uhlenbeck-type state with a
//! Kalman–Bucy filter and controls it optimally; the Sender picks the
//! precision of the observation device. The crate solves the Receiver's
//! problem, its stationary law, mean-field equilibria and the Sender's
//! device choice, and ships the two reference applications.

pub mod algebra;
pub mod cli;
pub mod error;
pub mod linalg;
pub mod mfg;
pub mod model;
pub mod output;
pub mod receiver;
pub mod scenarios;
pub mod sender;
pub mod sim;
pub mod stationary;

pub use error::{Error, Result};
