//! Multi-objective reinforcement learning for sequence generation.
//!
//! A from-scratch PPO stack (KL-shaped rewards against a frozen reference
//! policy, GAE, clipped surrogate) driven by four aggregation strategies for
//! multi-dimensional rewards:
//!
//! - **min**: reward each episode with its currently worst quality dimension;
//! - **pro**: one PPO loss per dimension, conflicting gradients projected
//!   apart before they are summed;
//! - **sum-r** / **sum-l**: the naive baselines that add rewards or losses.
//!
//! Everything runs on a synthetic summarization task ([`toyenv`]) scored by
//! four programmatic dimension scorers ([`rewards`]).

pub mod error;
pub mod harness;
pub mod mdo;
pub mod policy;
pub mod ppo;
pub mod rewards;
pub mod rng;
pub mod toyenv;

pub use error::{Error, Result};
