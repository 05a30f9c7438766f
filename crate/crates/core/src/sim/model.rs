//! Count-based maximum-likelihood transition models used as simulators.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{derive_seed, drive, Draw, RunSpec, SimError, SimulationResult, TransitionSource};
use crate::data::LoggedDataset;
use crate::env::{
    emit, oracle_decode, Action, EmissionSpec, GridWorld, LatentState, Observation, STEP_REWARD,
};
use crate::learners::{sample_action, Learner};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSpace {
    /// Keys are discrete observation ids.
    Observation,
    /// Keys are true latent cells; observations are re-emitted uniformly.
    Latent,
}

/// `p(key' | key, a)` as successor counts, plus the start-key distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MleModel {
    pub space: ModelSpace,
    pub emission: EmissionSpec,
    pub episode_cap: u32,
    /// `(key, action)` to `(key', count)` in key order.
    pub counts: BTreeMap<(u64, usize), Vec<(u64, u64)>>,
    pub starts: Vec<(u64, u64)>,
}

impl MleModel {
    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Estimated `p(key' | key, a)`, `None` for unseen pairs.
    pub fn probability(&self, key: u64, a: Action, next: u64) -> Option<f64> {
        let row = self.counts.get(&(key, a.index()))?;
        let total: u64 = row.iter().map(|(_, c)| c).sum();
        let hit = row.iter().find(|(k, _)| *k == next).map_or(0, |(_, c)| *c);
        Some(hit as f64 / total as f64)
    }

    fn key(&self, x: &Observation) -> Result<u64, SimError> {
        match self.space {
            ModelSpace::Observation => Ok(x.identity_key()),
            ModelSpace::Latent => Ok(oracle_decode(x, &self.emission)?.0.index() as u64),
        }
    }

    fn observation<R: Rng + ?Sized>(&self, key: u64, rng: &mut R) -> Result<Observation, SimError> {
        match self.space {
            ModelSpace::Observation => Ok(Observation::DiscreteId(key)),
            ModelSpace::Latent => {
                let latent = LatentState::new(key as usize)?;
                let counter = match self.emission {
                    EmissionSpec::Counter { modulus } => Some(rng.random_range(0..modulus)),
                    _ => None,
                };
                Ok(emit(latent, counter, &self.emission, rng)?)
            }
        }
    }
}

fn weighted_pick<R: Rng + ?Sized>(row: &[(u64, u64)], rng: &mut R) -> u64 {
    let total: u64 = row.iter().map(|(_, c)| c).sum();
    let mut u = rng.random_range(0..total);
    for (k, c) in row {
        if u < *c {
            return *k;
        }
        u -= c;
    }
    row.last().unwrap().0
}

/// Fit successor counts in the chosen space. Observation-space models
/// require a discrete emission.
pub fn fit_mle_model(data: &LoggedDataset, space: ModelSpace) -> Result<MleModel, SimError> {
    let world = &data.meta.env;
    let mut model = MleModel {
        space,
        emission: world.emission,
        episode_cap: world.episode_cap,
        counts: BTreeMap::new(),
        starts: Vec::new(),
    };
    let mut counts: BTreeMap<(u64, usize), BTreeMap<u64, u64>> = BTreeMap::new();
    let mut starts: BTreeMap<u64, u64> = BTreeMap::new();
    for t in &data.transitions {
        let k = model.key(&t.x)?;
        let k2 = model.key(&t.x_next)?;
        *counts.entry((k, t.a.index())).or_default().entry(k2).or_default() += 1;
        if t.is_episode_start() {
            *starts.entry(k).or_default() += 1;
        }
    }
    model.counts = counts
        .into_iter()
        .map(|(k, row)| (k, row.into_iter().collect()))
        .collect();
    model.starts = starts.into_iter().collect();
    Ok(model)
}

struct ModelSource<'a> {
    model: &'a MleModel,
    rng: ChaCha8Rng,
    steps_in_episode: u32,
    fallbacks: u64,
}

impl TransitionSource for ModelSource<'_> {
    fn reset(&mut self) -> Option<Observation> {
        self.steps_in_episode = 0;
        if self.model.starts.is_empty() {
            return None;
        }
        let k = weighted_pick(&self.model.starts, &mut self.rng);
        self.model.observation(k, &mut self.rng).ok()
    }

    fn next(&mut self, x: &Observation, learner: &dyn Learner) -> Result<Draw, SimError> {
        let a = sample_action(&learner.action_probs(x), &mut self.rng);
        let key = self.model.key(x)?;
        self.steps_in_episode += 1;
        let capped = self.steps_in_episode >= self.model.episode_cap;
        let Some(row) = self.model.counts.get(&(key, a.index())) else {
            self.fallbacks += 1;
            return Ok(Draw::Step {
                a,
                r: STEP_REWARD,
                x_next: *x,
                done: false,
                capped,
                source: None,
            });
        };
        let next = weighted_pick(row, &mut self.rng);
        let x_next = self.model.observation(next, &mut self.rng)?;
        let (latent, _) = oracle_decode(&x_next, &self.model.emission)?;
        let (r, done) = GridWorld::arrival(latent);
        Ok(Draw::Step {
            a,
            r,
            x_next,
            done,
            capped: capped && !done,
            source: None,
        })
    }

    fn model_fallbacks(&self) -> u64 {
        self.fallbacks
    }
}

/// Roll the learner out in the fitted model; never stops before the horizon.
pub fn run_model_based(
    model: &MleModel,
    learner: &mut dyn Learner,
    spec: &RunSpec,
) -> Result<SimulationResult, SimError> {
    if model.is_empty() {
        return Err(SimError::EmptyModel);
    }
    let mut source = ModelSource {
        model,
        rng: ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 6)),
        steps_in_episode: 0,
        fallbacks: 0,
    };
    drive(spec, &mut source, learner)
}
