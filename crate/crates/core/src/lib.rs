//! Dual-attention channel estimation for massive MIMO-OFDM downlinks, with
//! classical baselines, a channel simulator and an experiment harness.

pub mod baselines;
pub mod chansim;
pub mod complexity;
pub mod ctensor;
pub mod dacen;
pub mod domainxform;
pub mod error;
pub mod harness;
pub mod tensor;
pub mod training;
pub mod transfer;

pub use error::{Error, Result};
