//! Active event perception loop: a deterministic 2D environment, a
//! predictive perception stack whose errors drive both an intrinsic-reward
//! DQN controller and streaming event segmentation, plus evaluation metrics
//! and an orchestration harness.

pub mod checkpoint;
pub mod config;
pub mod controller;
pub mod env;
pub mod error;
pub mod eval;
pub mod events;
pub mod harness;
mod nn;
pub mod perception;
pub mod trace;

pub use error::{Error, Result};
