//! Learning-curve statistics, multi-run aggregation, fidelity and efficiency.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{GridWorld, Observation};
use crate::learners::{sample_action, Learner, Policy};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("no rollouts requested")]
    NoRollouts,
    #[error("curve sets share no grid points up to the horizon")]
    EmptyOverlap,
    #[error("no runs to summarise")]
    NoRuns,
}

/// One g-statistic over one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningCurve {
    pub run_id: String,
    pub strategy: String,
    pub g_name: String,
    /// `(t, value)` with strictly increasing `t`.
    pub points: Vec<(u64, f64)>,
}

impl LearningCurve {
    pub fn last_t(&self) -> Option<u64> {
        self.points.last().map(|p| p.0)
    }
}

/// Curves of one strategy and one g-statistic across runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSet {
    pub strategy: String,
    pub curves: Vec<LearningCurve>,
}

/// Pointwise mean over the runs that have a sample at each `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateCurve {
    pub t: Vec<u64>,
    pub mean: Vec<f64>,
    /// Population standard deviation across the alive runs.
    pub std: Vec<f64>,
    pub n_alive: Vec<usize>,
}

impl AggregateCurve {
    pub fn value_at(&self, t: u64) -> Option<f64> {
        self.t.binary_search(&t).ok().map(|i| self.mean[i])
    }
}

/// Keep only grid points where at least `alive_floor` runs contribute.
pub fn aggregate(curves: &[LearningCurve], alive_floor: usize) -> AggregateCurve {
    let mut acc: BTreeMap<u64, (usize, f64, f64)> = BTreeMap::new();
    for c in curves {
        for &(t, v) in &c.points {
            let e = acc.entry(t).or_insert((0, 0.0, 0.0));
            e.0 += 1;
            e.1 += v;
            e.2 += v * v;
        }
    }
    let mut out = AggregateCurve {
        t: Vec::new(),
        mean: Vec::new(),
        std: Vec::new(),
        n_alive: Vec::new(),
    };
    for (t, (n, s, ss)) in acc {
        if n < alive_floor.max(1) {
            continue;
        }
        let mean = s / n as f64;
        out.t.push(t);
        out.mean.push(mean);
        out.std.push((ss / n as f64 - mean * mean).max(0.0).sqrt());
        out.n_alive.push(n);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub strategy: String,
    pub rmse: f64,
    pub mae: f64,
    pub max_abs: f64,
    /// Last grid point included.
    pub horizon: u64,
    pub grid_points: usize,
    pub n_sim: usize,
    pub n_real: usize,
}

/// Errors between the mean curves on the grid points both aggregates define
/// at or below `horizon` (all shared points when `None`).
pub fn fidelity_rmse(
    sim: &CurveSet,
    real: &CurveSet,
    horizon: Option<u64>,
    alive_floor: usize,
) -> Result<FidelityReport, EvalError> {
    let a = aggregate(&sim.curves, alive_floor);
    let b = aggregate(&real.curves, alive_floor);
    let diffs: Vec<(u64, f64)> = a
        .t
        .iter()
        .zip(&a.mean)
        .filter(|(t, _)| horizon.is_none_or(|h| **t <= h))
        .filter_map(|(t, m)| b.value_at(*t).map(|r| (*t, m - r)))
        .collect();
    if diffs.is_empty() {
        return Err(EvalError::EmptyOverlap);
    }
    let n = diffs.len() as f64;
    Ok(FidelityReport {
        strategy: sim.strategy.clone(),
        rmse: (diffs.iter().map(|(_, d)| d * d).sum::<f64>() / n).sqrt(),
        mae: diffs.iter().map(|(_, d)| d.abs()).sum::<f64>() / n,
        max_abs: diffs.iter().map(|(_, d)| d.abs()).fold(0.0, f64::max),
        horizon: diffs.last().unwrap().0,
        grid_points: diffs.len(),
        n_sim: sim.curves.len(),
        n_real: real.curves.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthUnit {
    Steps,
    Epochs { epoch_size: u64 },
}

impl LengthUnit {
    pub fn convert(&self, steps: u64) -> u64 {
        match *self {
            LengthUnit::Steps => steps,
            LengthUnit::Epochs { epoch_size } => steps / epoch_size.max(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub strategy: String,
    pub median: f64,
    pub lengths: Vec<u64>,
    pub unit: LengthUnit,
}

/// Median of a non-empty sample (mean of the two middle values for even sizes).
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { (v[m - 1] + v[m]) / 2.0 })
}

/// Median simulation length, with lengths given in steps.
pub fn efficiency(
    strategy: &str,
    lengths_in_steps: &[u64],
    unit: LengthUnit,
) -> Result<EfficiencyReport, EvalError> {
    let lengths: Vec<u64> = lengths_in_steps.iter().map(|l| unit.convert(*l)).collect();
    let as_f: Vec<f64> = lengths.iter().map(|l| *l as f64).collect();
    Ok(EfficiencyReport {
        strategy: strategy.to_string(),
        median: median(&as_f).ok_or(EvalError::NoRuns)?,
        lengths,
        unit,
    })
}

/// Mean over the start observations of `max_a Q(x, a)`; zero for learners
/// without action values.
pub fn g_start_value(learner: &dyn Learner, starts: &[Observation]) -> f64 {
    if starts.is_empty() {
        return 0.0;
    }
    let total: f64 = starts
        .iter()
        .map(|x| {
            learner
                .q_values(x)
                .map(|q| q.iter().copied().fold(f64::NEG_INFINITY, f64::max))
                .unwrap_or(0.0)
        })
        .sum();
    total / starts.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationOutcome {
    pub mean_return: f64,
    /// Episodes cut at the environment's step cap.
    pub capped: u32,
}

/// Mean undiscounted return of `policy` over fresh real episodes.
pub fn g_validation_return(
    policy: &dyn Policy,
    world: &GridWorld,
    n_rollouts: u32,
    seed: u64,
) -> Result<ValidationOutcome, EvalError> {
    if n_rollouts == 0 {
        return Err(EvalError::NoRollouts);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let mut capped = 0;
    for _ in 0..n_rollouts {
        let (mut s, mut x) = world.reset(&mut rng);
        loop {
            let a = sample_action(&policy.action_probs(&x), &mut rng);
            let out = world.step(&s, a, &mut rng).expect("live episode");
            total += out.reward;
            if out.done || out.capped {
                capped += out.capped as u32;
                break;
            }
            s = out.state;
            x = out.observation;
        }
    }
    Ok(ValidationOutcome {
        mean_return: total / n_rollouts as f64,
        capped,
    })
}
