//! Optimal control and simulation of hydrogen/natural-gas blends in pipeline networks.

pub mod dynamics;
pub mod error;
pub mod network;
pub mod nlp;
pub mod ocp;
pub mod scenario;
pub mod simulator;
pub mod sparse;
pub mod validation;
pub mod workflow;

pub use error::{Error, Result, Stage};
