//! Evolutionary reinforcement learning over a two-scale policy: one shared
//! nonlinear state encoder plus one linear policy matrix per agent.

pub mod checkpoint;
pub mod config;
pub mod env;
pub mod error;
pub mod evolution;
pub mod harness;
pub mod nn;
pub mod policy;
pub mod reinforcement;
pub mod value;

pub use error::{Error, Result};
