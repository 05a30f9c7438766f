use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{Experience, Learner, LearnerError, Policy};
use crate::env::{
    oracle_decode, Action, ActionProbs, EmissionSpec, GridWorld, LatentState, Observation,
    NUM_ACTIONS, NUM_STATES,
};

/// Action values keyed by observation; missing rows read as zero.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct QTable {
    rows: HashMap<u64, ActionProbs>,
}

impl QTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn row(&self, key: u64) -> ActionProbs {
        self.rows.get(&key).copied().unwrap_or([0.0; NUM_ACTIONS])
    }

    pub fn get(&self, key: u64, a: Action) -> f64 {
        self.row(key)[a.index()]
    }

    pub fn set(&mut self, key: u64, a: Action, value: f64) {
        self.rows.entry(key).or_insert([0.0; NUM_ACTIONS])[a.index()] = value;
    }

    pub fn max_value(&self, key: u64) -> f64 {
        self.row(key).iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Number of materialised rows.
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// `Q(x,a) += alpha * (r + gamma * (1 - done) * max Q(x',·) - Q(x,a))`.
#[allow(clippy::too_many_arguments)]
pub fn q_update(
    table: &mut QTable,
    x: u64,
    a: Action,
    r: f64,
    x_next: u64,
    done: bool,
    alpha: f64,
    gamma: f64,
) {
    let bootstrap = if done { 0.0 } else { gamma * table.max_value(x_next) };
    let q = table.get(x, a);
    table.set(x, a, q + alpha * (r + bootstrap - q));
}

/// `epsilon / |A|` everywhere plus `1 - epsilon` split evenly over the argmax set.
pub fn epsilon_greedy(values: &ActionProbs, epsilon: f64) -> ActionProbs {
    let best = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let n_best = values.iter().filter(|v| **v == best).count() as f64;
    let mut probs = [epsilon / NUM_ACTIONS as f64; NUM_ACTIONS];
    for (p, v) in probs.iter_mut().zip(values) {
        if *v == best {
            *p += (1.0 - epsilon) / n_best;
        }
    }
    probs
}

/// Discounted return `sum_t gamma^t r_t`.
pub fn mc_return(rewards: &[f64], gamma: f64) -> f64 {
    rewards.iter().rev().fold(0.0, |acc, r| r + gamma * acc)
}

/// Optimal action values of the latent grid by value iteration.
pub fn optimal_q(gamma: f64) -> Vec<ActionProbs> {
    let mut q = vec![[0.0; NUM_ACTIONS]; NUM_STATES];
    loop {
        let v: Vec<f64> = q
            .iter()
            .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let mut delta: f64 = 0.0;
        for s in 0..NUM_STATES {
            let latent = LatentState::new(s).unwrap();
            if latent.is_goal() {
                continue;
            }
            for a in Action::ALL {
                let next = latent.successor(a);
                let (r, done) = GridWorld::arrival(next);
                let target = r + if done { 0.0 } else { gamma * v[next.index()] };
                delta = delta.max((target - q[s][a.index()]).abs());
                q[s][a.index()] = target;
            }
        }
        if delta < 1e-13 {
            return q;
        }
    }
}

/// ε-greedy over optimal latent values, applied to observations through
/// the oracle decoder. Undecodable observations get the uniform policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsSoftPolicy {
    pub q_star: Vec<ActionProbs>,
    pub epsilon: f64,
    pub emission: EmissionSpec,
}

impl EpsSoftPolicy {
    pub fn new(q_star: Vec<ActionProbs>, epsilon: f64, emission: EmissionSpec) -> Self {
        Self {
            q_star,
            epsilon,
            emission,
        }
    }
}

impl Policy for EpsSoftPolicy {
    fn action_probs(&self, x: &Observation) -> ActionProbs {
        match oracle_decode(x, &self.emission) {
            Ok((s, _)) => epsilon_greedy(&self.q_star[s.index()], self.epsilon),
            Err(_) => [1.0 / NUM_ACTIONS as f64; NUM_ACTIONS],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FixedPolicy {
    Uniform,
    EpsSoft(EpsSoftPolicy),
}

impl Policy for FixedPolicy {
    fn action_probs(&self, x: &Observation) -> ActionProbs {
        match self {
            FixedPolicy::Uniform => [1.0 / NUM_ACTIONS as f64; NUM_ACTIONS],
            FixedPolicy::EpsSoft(p) => p.action_probs(x),
        }
    }
}

/// Tabular Q-learning with a constant ε-greedy behavior.
#[derive(Debug, Clone)]
pub struct TabularQ {
    pub table: QTable,
    pub alpha: f64,
    pub gamma: f64,
    pub epsilon: f64,
}

impl TabularQ {
    pub fn new(alpha: f64, gamma: f64, epsilon: f64) -> Self {
        Self {
            table: QTable::new(),
            alpha,
            gamma,
            epsilon,
        }
    }
}

impl Policy for TabularQ {
    fn action_probs(&self, x: &Observation) -> ActionProbs {
        epsilon_greedy(&self.table.row(x.identity_key()), self.epsilon)
    }
}

impl Learner for TabularQ {
    fn observe(&mut self, e: &Experience) -> Result<(), LearnerError> {
        q_update(
            &mut self.table,
            e.x.identity_key(),
            e.a,
            e.r,
            e.x_next.identity_key(),
            e.done,
            self.alpha,
            self.gamma,
        );
        Ok(())
    }

    fn q_values(&self, x: &Observation) -> Option<ActionProbs> {
        Some(self.table.row(x.identity_key()))
    }
}

/// Every-episode Monte-Carlo estimate of a fixed policy's value from the start.
#[derive(Debug, Clone)]
pub struct MonteCarloEvaluator {
    pub target: FixedPolicy,
    pub gamma: f64,
    pub returns: Vec<f64>,
    current: Vec<f64>,
}

impl MonteCarloEvaluator {
    pub fn new(target: FixedPolicy, gamma: f64) -> Self {
        Self {
            target,
            gamma,
            returns: Vec::new(),
            current: Vec::new(),
        }
    }

    /// Mean completed-episode return, `None` before the first episode ends.
    pub fn value_estimate(&self) -> Option<f64> {
        (!self.returns.is_empty())
            .then(|| self.returns.iter().sum::<f64>() / self.returns.len() as f64)
    }
}

impl Policy for MonteCarloEvaluator {
    fn action_probs(&self, x: &Observation) -> ActionProbs {
        self.target.action_probs(x)
    }
}

impl Learner for MonteCarloEvaluator {
    fn observe(&mut self, e: &Experience) -> Result<(), LearnerError> {
        self.current.push(e.r);
        if e.done {
            self.returns.push(mc_return(&self.current, self.gamma));
            self.current.clear();
        }
        Ok(())
    }

    fn statistic(&self, name: &str) -> Option<f64> {
        match name {
            "mc_value" => self.value_estimate(),
            "mc_episodes" => Some(self.returns.len() as f64),
            _ => None,
        }
    }
}
