//! Adaptive transmission-mode selection for a bidirectional half-duplex
//! relay network with buffers at the relay, under Rayleigh block fading.
//!
//! Modules, bottom up: [`channel`] draws gains and computes capacities,
//! [`queues`] applies a mode to the relay buffers, [`policy`] calibrates and
//! runs the optimal selection rule, [`baselines`] holds the reference
//! protocols and [`engine`] runs slot-by-slot simulations and sweeps.

pub mod baselines;
pub mod channel;
pub mod cli;
pub mod engine;
pub mod error;
pub mod policy;
pub mod queues;
pub mod rng;

pub use error::{Error, Result};
