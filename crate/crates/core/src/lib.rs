//! Real-time hybrid control of a simulated Furuta pendulum.
//!
//! The stack, bottom-up: [`pendulum`] (analytic prior and simulated plant),
//! [`neural`] (MLP, backprop, Adam), [`model`] (residual-physics and
//! data-driven dynamics, replay buffers), [`agent`] (TD3 actor-critic and
//! imagination rollouts), [`planner`] (CEM with the hybrid objective),
//! [`delayrt`] (delay-MDP observations, action buffer and d-step loop) and
//! [`harness`] (configuration, training orchestration and experiments).

pub mod agent;
pub mod delayrt;
pub mod error;
pub mod harness;
pub mod model;
pub mod neural;
pub mod parallel;
pub mod pendulum;
pub mod planner;

pub use error::{Error, Result};
