//! Rejection-sampling replay for observations with an exogenous component.
//!
//! The endogenous part `z` is replayed from per-`z` queues with rejection
//! sampling; the exogenous successor `c'` is popped from a queue of logged
//! `c -> c'` moves for the current `c`. The next observation and reward are
//! rebuilt from `(z', c')` with the oracles.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    accept_probability, derive_seed, drive, AcceptanceStats, Draw, RunSpec, SimError,
    SimulationResult, SupportPolicy, TerminationReason, TransitionSource,
};
use crate::data::{episode_starts, LoggedDataset, QueueIndex, RandomizedQueue};
use crate::env::{counter_observation, oracle_decode, EmissionSpec, GridWorld, LatentState, Observation};
use crate::learners::Learner;

/// Split/merge/reward oracles for an observation `x = merge(z, c)`.
pub trait ExoOracles {
    fn split(&self, x: &Observation) -> Option<(u64, u64)>;
    fn merge(&self, z: u64, c: u64) -> Observation;
    /// Reward and terminal flag on arriving at `(z, c)`.
    fn reward(&self, z: u64, c: u64) -> (f64, bool);
}

/// Oracles for the counter emission: `z` is the grid cell, `c` the counter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CounterOracles {
    pub emission: EmissionSpec,
}

impl ExoOracles for CounterOracles {
    fn split(&self, x: &Observation) -> Option<(u64, u64)> {
        let (s, c) = oracle_decode(x, &self.emission).ok()?;
        Some((s.index() as u64, c? as u64))
    }

    fn merge(&self, z: u64, c: u64) -> Observation {
        counter_observation(LatentState::new(z as usize).expect("valid cell"), c as u32)
    }

    fn reward(&self, z: u64, _c: u64) -> (f64, bool) {
        GridWorld::arrival(LatentState::new(z as usize).expect("valid cell"))
    }
}

struct ExoSource<'a, O: ExoOracles> {
    data: &'a LoggedDataset,
    oracles: &'a O,
    zqueues: QueueIndex<u64>,
    cqueues: BTreeMap<u64, RandomizedQueue>,
    /// `c'` of each dataset row, looked up through the `cqueues` indices.
    c_next: Vec<u64>,
    z_next: Vec<u64>,
    rng: ChaCha8Rng,
    stats: AcceptanceStats,
    support: SupportPolicy,
}

impl<'a, O: ExoOracles> ExoSource<'a, O> {
    fn new(data: &'a LoggedDataset, oracles: &'a O, seed: u64, support: SupportPolicy) -> Result<Self, SimError> {
        let mut z = Vec::with_capacity(data.len());
        let mut c = Vec::with_capacity(data.len());
        let mut z_next = Vec::with_capacity(data.len());
        let mut c_next = Vec::with_capacity(data.len());
        for (i, t) in data.transitions.iter().enumerate() {
            let bad = |what: &str| SimError::OracleInconsistent(format!("row {i}: {what}"));
            let (zi, ci) = oracles.split(&t.x).ok_or_else(|| bad("cannot split x"))?;
            let (zn, cn) = oracles.split(&t.x_next).ok_or_else(|| bad("cannot split x'"))?;
            if oracles.merge(zi, ci) != t.x || oracles.merge(zn, cn) != t.x_next {
                return Err(bad("merge(split(x)) != x"));
            }
            z.push(zi);
            c.push(ci);
            z_next.push(zn);
            c_next.push(cn);
        }
        let zqueues = QueueIndex::build(
            z.iter().enumerate().map(|(i, k)| (*k, i)),
            episode_starts(data),
            derive_seed(seed, 3),
        );
        let cindex: QueueIndex<u64> = QueueIndex::build(
            c.iter().enumerate().map(|(i, k)| (*k, i)),
            Vec::new(),
            derive_seed(seed, 5),
        );
        Ok(Self {
            data,
            oracles,
            zqueues,
            cqueues: cindex.queues,
            c_next,
            z_next,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, 4)),
            stats: AcceptanceStats::default(),
            support,
        })
    }
}

impl<O: ExoOracles> TransitionSource for ExoSource<'_, O> {
    fn reset(&mut self) -> Option<Observation> {
        self.zqueues
            .init_queue
            .pop()
            .map(|i| self.data.transitions[i].x)
    }

    fn next(&mut self, x: &Observation, learner: &dyn Learner) -> Result<Draw, SimError> {
        let (z, c) = self
            .oracles
            .split(x)
            .ok_or_else(|| SimError::OracleInconsistent("cannot split current observation".into()))?;
        let probs = learner.action_probs(x);
        loop {
            let Some(i) = self.zqueues.pop(&z) else {
                return Ok(Draw::Stop(TerminationReason::QueueExhausted));
            };
            let t = &self.data.transitions[i];
            let p = accept_probability(&probs, &t.behavior_probs, t.a, self.support)?;
            let u: f64 = self.rng.random();
            if u > p || p == 0.0 {
                self.stats.rejected += 1;
                continue;
            }
            self.stats.accepted += 1;
            let Some(j) = self.cqueues.get_mut(&c).and_then(RandomizedQueue::pop) else {
                return Ok(Draw::Stop(TerminationReason::QueueExhausted));
            };
            let z_next = self.z_next[i];
            let c_next = self.c_next[j];
            let (r, done) = self.oracles.reward(z_next, c_next);
            return Ok(Draw::Step {
                a: t.a,
                r,
                x_next: self.oracles.merge(z_next, c_next),
                done,
                capped: false,
                source: Some(i),
            });
        }
    }

    fn acceptance(&self) -> Option<AcceptanceStats> {
        Some(self.stats)
    }
}

/// Exogenous-aware rejection-sampling replay.
pub fn run_exo_psrs<O: ExoOracles>(
    data: &LoggedDataset,
    learner: &mut dyn Learner,
    oracles: &O,
    spec: &RunSpec,
) -> Result<SimulationResult, SimError> {
    let mut source = ExoSource::new(data, oracles, spec.seed, spec.support)?;
    drive(spec, &mut source, learner)
}
