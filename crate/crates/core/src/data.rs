//! Logged datasets: collection under a behavior policy, splitting,
//! randomized per-key queues, and a line-delimited JSON file format.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{oracle_decode, Action, ActionProbs, GridWorld, Observation};
use crate::learners::{sample_action, Policy};

/// Version written into every dataset header.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset schema version {found} is not supported (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },
    #[error("corrupt dataset file at line {line}: {reason}")]
    Corrupt { line: usize, reason: String },
    #[error("invalid behavior distribution at transition {index}: {reason}")]
    InvalidBehavior { index: usize, reason: String },
    #[error("split fraction must lie strictly between 0 and 1, got {0}")]
    BadFraction(f64),
    #[error("environment error: {0}")]
    Env(#[from] crate::env::EnvError),
}

/// One logged step, including the full behavior distribution it was drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoggedTransition {
    pub x: Observation,
    pub a: Action,
    pub r: f64,
    pub x_next: Observation,
    pub done: bool,
    pub behavior_probs: ActionProbs,
    pub episode_id: u64,
    pub step_in_episode: u32,
    /// Ground-truth cell of `x`, for diagnostics only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_latent: Option<u8>,
}

impl LoggedTransition {
    pub fn is_episode_start(&self) -> bool {
        self.step_in_episode == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub schema_version: u32,
    pub env: GridWorld,
    pub behavior: String,
    pub seed: u64,
    pub episodes: u64,
    pub transitions: u64,
    /// Episodes aborted by the episode cap before reaching the goal.
    pub capped_episodes: u64,
    /// The final episode was cut short by a transition budget.
    #[serde(default)]
    pub truncated_final_episode: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoggedDataset {
    pub meta: DatasetMeta,
    pub transitions: Vec<LoggedTransition>,
}

impl LoggedDataset {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Check the behavior distributions recorded with each step.
    pub fn validate(&self) -> Result<(), DataError> {
        for (index, t) in self.transitions.iter().enumerate() {
            let sum: f64 = t.behavior_probs.iter().sum();
            let bad = |reason: String| DataError::InvalidBehavior { index, reason };
            if t.behavior_probs.iter().any(|p| !(*p >= 0.0)) {
                return Err(bad(format!("negative or NaN entry in {:?}", t.behavior_probs)));
            }
            if (sum - 1.0).abs() > 1e-9 {
                return Err(bad(format!("probabilities sum to {sum}")));
            }
            if t.behavior_probs[t.a.index()] <= 0.0 {
                return Err(bad(format!("logged action {:?} has zero probability", t.a)));
            }
        }
        Ok(())
    }

    fn subset(&self, indices: &[usize]) -> LoggedDataset {
        let transitions: Vec<_> = indices.iter().map(|&i| self.transitions[i].clone()).collect();
        let mut meta = self.meta.clone();
        meta.transitions = transitions.len() as u64;
        meta.episodes = transitions.iter().filter(|t| t.is_episode_start()).count() as u64;
        LoggedDataset { meta, transitions }
    }
}

/// How much data to collect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollectBudget {
    Episodes(u64),
    /// Stop after exactly this many transitions; the last episode may be cut.
    Transitions(u64),
}

/// Roll the behavior policy in the real environment and log every step.
pub fn collect(
    world: &GridWorld,
    behavior: &dyn Policy,
    behavior_name: &str,
    budget: CollectBudget,
    seed: u64,
) -> Result<LoggedDataset, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut transitions = Vec::new();
    let mut episodes = 0u64;
    let mut capped_episodes = 0u64;
    let mut truncated_final_episode = false;

    let more_episodes = |episodes: u64, n: usize| match budget {
        CollectBudget::Episodes(e) => episodes < e,
        CollectBudget::Transitions(t) => (n as u64) < t,
    };

    'episodes: while more_episodes(episodes, transitions.len()) {
        let (mut state, mut x) = world.reset(&mut rng);
        let episode_id = episodes;
        episodes += 1;
        let mut step = 0u32;
        loop {
            if let CollectBudget::Transitions(t) = budget {
                if transitions.len() as u64 >= t {
                    truncated_final_episode = true;
                    break 'episodes;
                }
            }
            let probs = behavior.action_probs(&x);
            let a = sample_action(&probs, &mut rng);
            let out = world.step(&state, a, &mut rng)?;
            let oracle_latent = oracle_decode(&x, &world.emission)
                .ok()
                .map(|(s, _)| s.index() as u8);
            transitions.push(LoggedTransition {
                x,
                a,
                r: out.reward,
                x_next: out.observation,
                done: out.done,
                behavior_probs: probs,
                episode_id,
                step_in_episode: step,
                oracle_latent,
            });
            step += 1;
            if out.done {
                break;
            }
            if out.capped {
                capped_episodes += 1;
                break;
            }
            state = out.state;
            x = out.observation;
        }
    }

    let meta = DatasetMeta {
        schema_version: SCHEMA_VERSION,
        env: *world,
        behavior: behavior_name.to_string(),
        seed,
        episodes,
        transitions: transitions.len() as u64,
        capped_episodes,
        truncated_final_episode,
    };
    Ok(LoggedDataset { meta, transitions })
}

/// Random transition-level partition into `(train, validation)`, with
/// `round(fraction * n)` transitions in train.
pub fn split(
    dataset: &LoggedDataset,
    fraction: f64,
    seed: u64,
) -> Result<(LoggedDataset, LoggedDataset), DataError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DataError::BadFraction(fraction));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (fraction * dataset.len() as f64).round() as usize;
    let (train, val) = order.split_at(n_train);
    let mut train = train.to_vec();
    let mut val = val.to_vec();
    train.sort_unstable();
    val.sort_unstable();
    Ok((dataset.subset(&train), dataset.subset(&val)))
}

/// A shuffled queue of dataset indices; each element can be popped once.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RandomizedQueue {
    items: Vec<usize>,
    cursor: usize,
}

impl RandomizedQueue {
    pub fn new(mut items: Vec<usize>, rng: &mut ChaCha8Rng) -> Self {
        items.shuffle(rng);
        Self { items, cursor: 0 }
    }

    pub fn pop(&mut self) -> Option<usize> {
        let item = self.items.get(self.cursor).copied();
        if item.is_some() {
            self.cursor += 1;
        }
        item
    }

    pub fn remaining(&self) -> usize {
        self.items.len() - self.cursor
    }

    pub fn is_empty(&self) -> bool {
        self.remaining() == 0
    }

    /// Total number of elements the queue was built with.
    pub fn capacity(&self) -> usize {
        self.items.len()
    }

    pub fn items(&self) -> &[usize] {
        &self.items
    }
}

/// Per-key randomized queues over a dataset plus the queue of episode starts.
#[derive(Debug, Clone)]
pub struct QueueIndex<K: Ord> {
    pub queues: BTreeMap<K, RandomizedQueue>,
    /// Indices of transitions whose `x` is a starting observation.
    pub init_queue: RandomizedQueue,
}

impl<K: Ord + Clone> QueueIndex<K> {
    /// Group `items` by key (iteration in item order), shuffle each group
    /// with a stream derived from `seed`, and shuffle the starts.
    pub fn build<I>(items: I, starts: Vec<usize>, seed: u64) -> Self
    where
        I: IntoIterator<Item = (K, usize)>,
    {
        let mut groups: BTreeMap<K, Vec<usize>> = BTreeMap::new();
        for (key, i) in items {
            groups.entry(key).or_default().push(i);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let init_queue = RandomizedQueue::new(starts, &mut rng);
        let queues = groups
            .into_iter()
            .map(|(k, v)| (k, RandomizedQueue::new(v, &mut rng)))
            .collect();
        Self { queues, init_queue }
    }

    /// Pop from the queue for `key`; a missing queue counts as empty.
    pub fn pop(&mut self, key: &K) -> Option<usize> {
        self.queues.get_mut(key).and_then(RandomizedQueue::pop)
    }

    pub fn is_empty(&self, key: &K) -> bool {
        self.queues.get(key).is_none_or(RandomizedQueue::is_empty)
    }

    pub fn total_len(&self) -> usize {
        self.queues.values().map(RandomizedQueue::capacity).sum()
    }
}

/// Indices of transitions that start an episode.
pub fn episode_starts(dataset: &LoggedDataset) -> Vec<usize> {
    dataset
        .transitions
        .iter()
        .enumerate()
        .filter(|(_, t)| t.is_episode_start())
        .map(|(i, _)| i)
        .collect()
}

/// Group every transition by `key_fn(x)`.
pub fn build_queues<F>(dataset: &LoggedDataset, key_fn: F, seed: u64) -> QueueIndex<u64>
where
    F: Fn(&Observation) -> u64,
{
    QueueIndex::build(
        dataset
            .transitions
            .iter()
            .enumerate()
            .map(|(i, t)| (key_fn(&t.x), i)),
        episode_starts(dataset),
        seed,
    )
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    meta: DatasetMeta,
}

/// Write a header line followed by one JSON record per transition.
pub fn save(dataset: &LoggedDataset, path: &Path) -> Result<(), DataError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut out = BufWriter::new(File::create(path)?);
    let header = Header {
        schema_version: SCHEMA_VERSION,
        meta: dataset.meta.clone(),
    };
    serde_json::to_writer(&mut out, &header).map_err(std::io::Error::from)?;
    out.write_all(b"\n")?;
    for t in &dataset.transitions {
        serde_json::to_writer(&mut out, t).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<LoggedDataset, DataError> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let corrupt = |line: usize, reason: String| DataError::Corrupt { line, reason };

    let header_line = lines
        .next()
        .ok_or_else(|| corrupt(1, "missing header".into()))??;
    let header: serde_json::Value =
        serde_json::from_str(&header_line).map_err(|e| corrupt(1, e.to_string()))?;
    let found = header
        .get("schema_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| corrupt(1, "header has no schema_version".into()))? as u32;
    if found != SCHEMA_VERSION {
        return Err(DataError::SchemaVersion {
            found,
            expected: SCHEMA_VERSION,
        });
    }
    let header: Header = serde_json::from_value(header).map_err(|e| corrupt(1, e.to_string()))?;

    let mut transitions = Vec::with_capacity(header.meta.transitions as usize);
    for (i, line) in lines.enumerate() {
        let line = line?;
        let t: LoggedTransition =
            serde_json::from_str(&line).map_err(|e| corrupt(i + 2, e.to_string()))?;
        transitions.push(t);
    }
    if transitions.len() as u64 != header.meta.transitions {
        return Err(corrupt(
            transitions.len() + 1,
            format!(
                "header announces {} transitions, file holds {}",
                header.meta.transitions,
                transitions.len()
            ),
        ));
    }
    Ok(LoggedDataset {
        meta: header.meta,
        transitions,
    })
}
