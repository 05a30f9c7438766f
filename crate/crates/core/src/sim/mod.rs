//! Simulators that feed a learner either the real environment or a history
//! assembled from logged data.
//!
//! Every strategy is a [`TransitionSource`]: it hands out episode starts and,
//! given the current observation and the learner's current policy, the next
//! transition (or a reason to stop). [`drive`] runs the shared loop: deliver
//! to the learner, record g-statistics on schedule, stop at the horizon.

pub mod exo;
pub mod model;
pub mod replay;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::LatentEncoder;
use crate::env::{Action, ActionProbs, EnvError, GridWorld, Observation, NUM_ACTIONS};
use crate::eval::{g_start_value, g_validation_return, EvalError};
use crate::learners::{sample_action, Experience, Learner, LearnerError};

pub use exo::{run_exo_psrs, CounterOracles, ExoOracles};
pub use model::{fit_mle_model, run_model_based, MleModel, ModelSpace};
pub use replay::{run_psrs, run_qbe, PsrsMode};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("support violation: target puts mass on action {action} that the behavior policy never takes")]
    SupportViolation { action: usize },
    #[error("exogenous oracles are inconsistent with the data: {0}")]
    OracleInconsistent(String),
    #[error("model has no estimates")]
    EmptyModel,
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// What to do when the target policy puts mass where the behavior has none.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupportPolicy {
    /// Treat the bound as infinite, so the candidate is rejected.
    #[default]
    RejectAlways,
    Abort,
}

/// Probability of accepting a logged candidate with action `a`:
/// `pi(a) / (M * pi_b(a))` with `M = max_a' pi(a') / pi_b(a')`.
pub fn accept_probability(
    target: &ActionProbs,
    behavior: &ActionProbs,
    a: Action,
    support: SupportPolicy,
) -> Result<f64, SimError> {
    let mut m: f64 = 0.0;
    for i in 0..NUM_ACTIONS {
        if target[i] > 0.0 {
            if behavior[i] <= 0.0 {
                return match support {
                    SupportPolicy::RejectAlways => Ok(0.0),
                    SupportPolicy::Abort => Err(SimError::SupportViolation { action: i }),
                };
            }
            m = m.max(target[i] / behavior[i]);
        }
    }
    let i = a.index();
    if behavior[i] <= 0.0 || m == 0.0 {
        return Ok(0.0);
    }
    Ok((target[i] / (m * behavior[i])).min(1.0))
}

/// How observations are grouped into replay queues.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KeyFn {
    /// Each distinct observation is its own key.
    Identity,
    /// Group by a latent-state encoder.
    Latent { encoder: LatentEncoder },
}

impl KeyFn {
    pub fn key(&self, x: &Observation) -> u64 {
        match self {
            KeyFn::Identity => x.identity_key(),
            KeyFn::Latent { encoder } => encoder.encode(x) as u64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    /// The queue for the current key ran dry.
    QueueExhausted,
    /// An episode ended and no episode starts were left.
    InitExhausted,
    ReachedHorizon,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcceptanceStats {
    pub accepted: u64,
    pub rejected: u64,
}

/// One delivered step and the dataset row it came from, if any.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeliveredStep {
    pub experience: Experience,
    pub source: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationResult {
    pub strategy: String,
    /// Number of transitions delivered to the learner.
    pub length: u64,
    pub termination: TerminationReason,
    pub acceptance: Option<AcceptanceStats>,
    pub episodes_completed: u64,
    /// Episodes cut at the step cap (real environment and model rollouts).
    pub capped_episodes: u64,
    /// Model rollouts that hit an unseen (key, action) pair.
    pub model_fallbacks: u64,
    /// g-statistic name to `(t, value)` samples, `t` in cadence units.
    pub curves: BTreeMap<String, Vec<(u64, f64)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub history: Option<Vec<DeliveredStep>>,
}

/// A g-statistic evaluated on the learner during a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GStat {
    /// Mean `max_a Q` over the listed start observations.
    StartValue { starts: Vec<Observation> },
    /// Mean return of the current policy over fresh real-environment episodes.
    /// The rollout seed depends only on `seed` and `t`, so strategies
    /// sharing a seed are validated on identical episodes.
    ValidationReturn {
        world: GridWorld,
        n_rollouts: u32,
        seed: u64,
    },
    /// A statistic the learner reports about itself.
    Intrinsic { name: String },
}

impl GStat {
    pub fn name(&self) -> String {
        match self {
            GStat::StartValue { .. } => "start_value".into(),
            GStat::ValidationReturn { .. } => "validation_return".into(),
            GStat::Intrinsic { name } => name.clone(),
        }
    }

    fn evaluate(&self, learner: &dyn Learner, t: u64) -> Result<Option<f64>, SimError> {
        Ok(match self {
            GStat::StartValue { starts } => Some(g_start_value(learner, starts)),
            GStat::ValidationReturn {
                world,
                n_rollouts,
                seed,
            } => {
                let s = derive_seed(*seed, t);
                Some(g_validation_return(learner, world, *n_rollouts, s)?.mean_return)
            }
            GStat::Intrinsic { name } => learner.statistic(name),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cadence {
    /// Sample every `every` delivered steps; `t` counts steps.
    Steps { every: u64 },
    /// Sample at each epoch boundary; `t` counts epochs.
    Epochs { epoch_size: u64 },
}

impl Cadence {
    fn unit(&self) -> u64 {
        match *self {
            Cadence::Steps { .. } => 1,
            Cadence::Epochs { epoch_size } => epoch_size.max(1),
        }
    }

    fn interval(&self) -> u64 {
        match *self {
            Cadence::Steps { every } => every.max(1),
            Cadence::Epochs { epoch_size } => epoch_size.max(1),
        }
    }
}

/// Run-level settings shared by all strategies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub strategy: String,
    /// Maximum number of delivered steps.
    pub max_steps: u64,
    pub seed: u64,
    pub cadence: Cadence,
    pub stats: Vec<GStat>,
    #[serde(default)]
    pub keep_history: bool,
    #[serde(default)]
    pub support: SupportPolicy,
}

/// The next transition a source delivers, or why it cannot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Draw {
    Step {
        a: Action,
        r: f64,
        x_next: Observation,
        done: bool,
        /// Episode cut at the step cap without reaching a terminal state.
        capped: bool,
        source: Option<usize>,
    },
    Stop(TerminationReason),
}

pub trait TransitionSource {
    /// First observation of a new episode, or `None` when none remain.
    fn reset(&mut self) -> Option<Observation>;

    fn next(&mut self, x: &Observation, learner: &dyn Learner) -> Result<Draw, SimError>;

    fn acceptance(&self) -> Option<AcceptanceStats> {
        None
    }

    fn model_fallbacks(&self) -> u64 {
        0
    }
}

/// SplitMix64 mixing of a base seed with a stream index.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn record(
    spec: &RunSpec,
    learner: &dyn Learner,
    steps: u64,
    curves: &mut BTreeMap<String, Vec<(u64, f64)>>,
) -> Result<(), SimError> {
    let t = steps / spec.cadence.unit();
    for stat in &spec.stats {
        if let Some(v) = stat.evaluate(learner, t)? {
            curves.entry(stat.name()).or_default().push((t, v));
        }
    }
    Ok(())
}

/// Shared interaction loop.
pub fn drive(
    spec: &RunSpec,
    source: &mut dyn TransitionSource,
    learner: &mut dyn Learner,
) -> Result<SimulationResult, SimError> {
    let mut curves = BTreeMap::new();
    let mut history = spec.keep_history.then(Vec::new);
    let mut steps = 0u64;
    let mut episodes = 0u64;
    let mut capped = 0u64;
    record(spec, learner, 0, &mut curves)?;

    let mut current = source.reset();
    let termination = loop {
        let Some(x) = current else {
            break TerminationReason::InitExhausted;
        };
        if steps >= spec.max_steps {
            break TerminationReason::ReachedHorizon;
        }
        match source.next(&x, learner)? {
            Draw::Stop(reason) => break reason,
            Draw::Step {
                a,
                r,
                x_next,
                done,
                capped: cut,
                source: src,
            } => {
                let experience = Experience {
                    x,
                    a,
                    r,
                    x_next,
                    done,
                };
                learner.observe(&experience)?;
                if let Some(h) = history.as_mut() {
                    h.push(DeliveredStep {
                        experience,
                        source: src,
                    });
                }
                steps += 1;
                if steps % spec.cadence.interval() == 0 {
                    record(spec, learner, steps, &mut curves)?;
                }
                if done || cut {
                    episodes += done as u64;
                    capped += cut as u64;
                    if steps >= spec.max_steps {
                        break TerminationReason::ReachedHorizon;
                    }
                    current = source.reset();
                } else {
                    current = Some(x_next);
                }
            }
        }
    };
    Ok(SimulationResult {
        strategy: spec.strategy.clone(),
        length: steps,
        termination,
        acceptance: source.acceptance(),
        episodes_completed: episodes,
        capped_episodes: capped,
        model_fallbacks: source.model_fallbacks(),
        curves,
        history,
    })
}

/// The real environment as a transition source.
pub struct RealSource {
    world: GridWorld,
    rng: ChaCha8Rng,
    state: Option<crate::env::EnvState>,
}

impl RealSource {
    pub fn new(world: GridWorld, seed: u64) -> Self {
        Self {
            world,
            rng: ChaCha8Rng::seed_from_u64(seed),
            state: None,
        }
    }
}

impl TransitionSource for RealSource {
    fn reset(&mut self) -> Option<Observation> {
        let (s, x) = self.world.reset(&mut self.rng);
        self.state = Some(s);
        Some(x)
    }

    fn next(&mut self, x: &Observation, learner: &dyn Learner) -> Result<Draw, SimError> {
        let _ = x;
        let state = self.state.expect("reset before stepping");
        let probs = learner.action_probs(x);
        let a = sample_action(&probs, &mut self.rng);
        let out = self.world.step(&state, a, &mut self.rng)?;
        self.state = Some(out.state);
        Ok(Draw::Step {
            a,
            r: out.reward,
            x_next: out.observation,
            done: out.done,
            capped: out.capped,
            source: None,
        })
    }
}

/// Online interaction with the real environment for `spec.max_steps` steps.
pub fn run_real(
    world: &GridWorld,
    learner: &mut dyn Learner,
    spec: &RunSpec,
) -> Result<SimulationResult, SimError> {
    let mut source = RealSource::new(world.clone(), derive_seed(spec.seed, 1));
    drive(spec, &mut source, learner)
}
