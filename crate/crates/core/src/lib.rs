//! Majorization-minimization deep predictive coding networks.

pub mod baselines;
pub mod cause;
pub mod error;
pub mod hierarchy;
pub mod learn;
pub mod majorizer;
pub mod metrics;
pub mod model;
pub mod par;
pub mod state;
pub mod tensor;

pub use error::{DpcnError, Result};
