//! Domain-randomized teacher training and multi-teacher policy distillation
//! on cart-pole and Furuta-pendulum swing-up tasks.

pub mod baselines;
pub mod distill;
pub mod domain;
pub mod envs;
pub mod error;
pub mod eval;
pub mod net;
pub mod ppo;
pub mod seed;

pub use error::{Error, Result};
