//! Cooperative edge-cache placement: network and QoE model, demand
//! generation and forecasting, learning-automata Q-learning, baselines, and
//! the experiment harness that ties them together.

pub mod agents;
pub mod automata;
pub mod baselines;
pub mod demand;
pub mod error;
pub mod harness;
pub mod netmodel;
pub mod predictor;

pub use error::{Error, Result};
