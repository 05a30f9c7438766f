//! Learners map an interaction history to a policy. The simulators only see
//! them through [`Learner`]: ask for the current action distribution,
//! deliver a transition, repeat.

pub mod ppo;
pub mod tabular;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Action, ActionProbs, Observation, NUM_ACTIONS};
use crate::nn::NnError;

pub use ppo::{EpochBuffer, PpoConfig, PpoLearner, UpdateStats};
pub use tabular::{
    epsilon_greedy, mc_return, optimal_q, q_update, EpsSoftPolicy, FixedPolicy,
    MonteCarloEvaluator, QTable, TabularQ,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LearnerError {
    #[error("non-finite loss during update: {0}")]
    NonFiniteLoss(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// One delivered step of experience.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Experience {
    pub x: Observation,
    pub a: Action,
    pub r: f64,
    pub x_next: Observation,
    pub done: bool,
}

pub trait Policy {
    /// Full action distribution at `x`.
    fn action_probs(&self, x: &Observation) -> ActionProbs;
}

pub trait Learner: Policy + Send {
    fn observe(&mut self, experience: &Experience) -> Result<(), LearnerError>;

    /// Action values at `x`, for learners that keep them.
    fn q_values(&self, _x: &Observation) -> Option<ActionProbs> {
        None
    }

    /// Named internal statistic (for example `mc_value` or `train_return`).
    fn statistic(&self, _name: &str) -> Option<f64> {
        None
    }
}

/// Draw an action from a distribution by inverse CDF.
pub fn sample_action<R: Rng + ?Sized>(probs: &ActionProbs, rng: &mut R) -> Action {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > 0.0 {
            last = i;
            acc += p;
            if u < acc {
                return Action::ALL[i];
            }
        }
    }
    Action::ALL[last]
}

pub fn is_distribution(probs: &ActionProbs) -> bool {
    probs.iter().all(|p| *p >= 0.0) && (probs.iter().sum::<f64>() - 1.0).abs() <= 1e-9
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UniformPolicy;

impl Policy for UniformPolicy {
    fn action_probs(&self, _x: &Observation) -> ActionProbs {
        [1.0 / NUM_ACTIONS as f64; NUM_ACTIONS]
    }
}

impl<P: Policy + ?Sized> Policy for &P {
    fn action_probs(&self, x: &Observation) -> ActionProbs {
        (**self).action_probs(x)
    }
}

impl<P: Policy + ?Sized> Policy for Box<P> {
    fn action_probs(&self, x: &Observation) -> ActionProbs {
        (**self).action_probs(x)
    }
}
