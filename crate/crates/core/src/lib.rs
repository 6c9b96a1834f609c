//! Joint-embedding predictive representation learning for pixel-based
//! reinforcement learning on CartPole.

pub mod cartpole;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod harness;
pub mod nn;
pub mod objective;
pub mod observation;
pub mod optim;
pub mod ppo;
pub mod predictor;
pub mod telemetry;
pub mod vit;

pub use error::{Error, Result};
