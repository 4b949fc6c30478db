//! Online detection of mid-episode behavior switches of a collaborating
//! agent in a small shared workspace: simulator, belief tracker, baselines,
//! training and evaluation.

pub mod autodiff;
pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod detector;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod selftest;
pub mod sim;
pub mod train;
pub mod uatom;

pub use error::{Error, Result};
