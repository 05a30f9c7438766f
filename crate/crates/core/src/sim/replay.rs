//! Queue-based replay of logged transitions: per-state rejection sampling,
//! its ablations, and the per-(state, action) queue evaluator.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    accept_probability, derive_seed, drive, AcceptanceStats, Draw, KeyFn, RunSpec,
    SimError, SimulationResult, TerminationReason, TransitionSource,
};
use crate::data::{build_queues, episode_starts, LoggedDataset, QueueIndex, RandomizedQueue};
use crate::env::Observation;
use crate::learners::{sample_action, Learner};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsrsMode {
    /// Per-key queues with rejection sampling.
    Full,
    /// Per-key queues, every candidate accepted.
    ObsOnly,
    /// One global queue with rejection sampling.
    ActOnly,
    /// One global queue, every candidate accepted.
    Random,
}

impl PsrsMode {
    fn per_key(self) -> bool {
        matches!(self, PsrsMode::Full | PsrsMode::ObsOnly)
    }

    fn rejects(self) -> bool {
        matches!(self, PsrsMode::Full | PsrsMode::ActOnly)
    }
}

pub struct PsrsSource<'a> {
    data: &'a LoggedDataset,
    key_fn: &'a KeyFn,
    mode: PsrsMode,
    queues: QueueIndex<u64>,
    global: RandomizedQueue,
    rng: ChaCha8Rng,
    stats: AcceptanceStats,
    support: super::SupportPolicy,
}

impl<'a> PsrsSource<'a> {
    pub fn new(
        data: &'a LoggedDataset,
        key_fn: &'a KeyFn,
        mode: PsrsMode,
        seed: u64,
        support: super::SupportPolicy,
    ) -> Self {
        let mut queue_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2));
        let (queues, global) = if mode.per_key() {
            (
                build_queues(data, |x| key_fn.key(x), derive_seed(seed, 3)),
                RandomizedQueue::default(),
            )
        } else {
            (
                QueueIndex::build(std::iter::empty(), episode_starts(data), derive_seed(seed, 3)),
                RandomizedQueue::new((0..data.len()).collect(), &mut queue_rng),
            )
        };
        Self {
            data,
            key_fn,
            mode,
            queues,
            global,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, 4)),
            stats: AcceptanceStats::default(),
            support,
        }
    }
}

impl TransitionSource for PsrsSource<'_> {
    fn reset(&mut self) -> Option<Observation> {
        self.queues
            .init_queue
            .pop()
            .map(|i| self.data.transitions[i].x)
    }

    fn next(&mut self, x: &Observation, learner: &dyn Learner) -> Result<Draw, SimError> {
        let key = self.key_fn.key(x);
        let probs = learner.action_probs(x);
        loop {
            let candidate = if self.mode.per_key() {
                self.queues.pop(&key)
            } else {
                self.global.pop()
            };
            let Some(i) = candidate else {
                return Ok(Draw::Stop(TerminationReason::QueueExhausted));
            };
            let t = &self.data.transitions[i];
            if self.mode.rejects() {
                let p = accept_probability(&probs, &t.behavior_probs, t.a, self.support)?;
                let u: f64 = self.rng.random();
                if u > p || p == 0.0 {
                    self.stats.rejected += 1;
                    continue;
                }
            }
            self.stats.accepted += 1;
            return Ok(Draw::Step {
                a: t.a,
                r: t.r,
                x_next: t.x_next,
                done: t.done,
                capped: false,
                source: Some(i),
            });
        }
    }

    fn acceptance(&self) -> Option<AcceptanceStats> {
        Some(self.stats)
    }
}

/// Per-state rejection sampling (or one of its ablations).
pub fn run_psrs(
    data: &LoggedDataset,
    learner: &mut dyn Learner,
    key_fn: &KeyFn,
    mode: PsrsMode,
    spec: &RunSpec,
) -> Result<SimulationResult, SimError> {
    let mut source = PsrsSource::new(data, key_fn, mode, spec.seed, spec.support);
    drive(spec, &mut source, learner)
}

pub struct QbeSource<'a> {
    data: &'a LoggedDataset,
    key_fn: &'a KeyFn,
    queues: BTreeMap<(u64, usize), RandomizedQueue>,
    init_queue: RandomizedQueue,
    rng: ChaCha8Rng,
}

impl<'a> QbeSource<'a> {
    pub fn new(data: &'a LoggedDataset, key_fn: &'a KeyFn, seed: u64) -> Self {
        let index = QueueIndex::build(
            data.transitions
                .iter()
                .enumerate()
                .map(|(i, t)| ((key_fn.key(&t.x), t.a.index()), i)),
            episode_starts(data),
            derive_seed(seed, 3),
        );
        Self {
            data,
            key_fn,
            queues: index.queues,
            init_queue: index.init_queue,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, 4)),
        }
    }
}

impl TransitionSource for QbeSource<'_> {
    fn reset(&mut self) -> Option<Observation> {
        self.init_queue.pop().map(|i| self.data.transitions[i].x)
    }

    fn next(&mut self, x: &Observation, learner: &dyn Learner) -> Result<Draw, SimError> {
        let a = sample_action(&learner.action_probs(x), &mut self.rng);
        let key = (self.key_fn.key(x), a.index());
        let Some(i) = self.queues.get_mut(&key).and_then(RandomizedQueue::pop) else {
            return Ok(Draw::Stop(TerminationReason::QueueExhausted));
        };
        let t = &self.data.transitions[i];
        Ok(Draw::Step {
            a: t.a,
            r: t.r,
            x_next: t.x_next,
            done: t.done,
            capped: false,
            source: Some(i),
        })
    }
}

/// Queue-based evaluator: pop from the queue of the (key, sampled action) pair.
pub fn run_qbe(
    data: &LoggedDataset,
    learner: &mut dyn Learner,
    key_fn: &KeyFn,
    spec: &RunSpec,
) -> Result<SimulationResult, SimError> {
    let mut source = QbeSource::new(data, key_fn, spec.seed);
    drive(spec, &mut source, learner)
}
