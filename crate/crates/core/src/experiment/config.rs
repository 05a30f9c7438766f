use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ExperimentError;
use crate::data::CollectBudget;
use crate::encoder::{EncoderHyperparams, SearchGrid};
use crate::env::{EmissionSpec, GridWorld, DEFAULT_EPISODE_CAP};
use crate::features::Featurizer;
use crate::learners::{
    optimal_q, EpsSoftPolicy, FixedPolicy, Learner, MonteCarloEvaluator, PpoConfig, PpoLearner,
    TabularQ,
};
use crate::sim::{derive_seed, Cadence, SupportPolicy};

/// One simulation strategy. Declaration order is the report row order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "real")]
    Real,
    #[serde(rename = "psrs-oracle")]
    PsrsOracle,
    #[serde(rename = "psrs-encoder")]
    PsrsEncoder,
    #[serde(rename = "obs-only")]
    ObsOnly,
    #[serde(rename = "act-only")]
    ActOnly,
    #[serde(rename = "random")]
    Random,
    #[serde(rename = "psrs-obs")]
    PsrsObs,
    #[serde(rename = "qbe-obs")]
    QbeObs,
    #[serde(rename = "qbe-oracle")]
    QbeOracle,
    #[serde(rename = "qbe-encoder")]
    QbeEncoder,
    #[serde(rename = "exo-psrs")]
    ExoPsrs,
    #[serde(rename = "model-obs")]
    ModelObs,
    #[serde(rename = "model-latent")]
    ModelLatent,
}

impl Strategy {
    pub const ALL: [Strategy; 13] = [
        Strategy::Real,
        Strategy::PsrsOracle,
        Strategy::PsrsEncoder,
        Strategy::ObsOnly,
        Strategy::ActOnly,
        Strategy::Random,
        Strategy::PsrsObs,
        Strategy::QbeObs,
        Strategy::QbeOracle,
        Strategy::QbeEncoder,
        Strategy::ExoPsrs,
        Strategy::ModelObs,
        Strategy::ModelLatent,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Strategy::Real => "real",
            Strategy::PsrsOracle => "psrs-oracle",
            Strategy::PsrsEncoder => "psrs-encoder",
            Strategy::ObsOnly => "obs-only",
            Strategy::ActOnly => "act-only",
            Strategy::Random => "random",
            Strategy::PsrsObs => "psrs-obs",
            Strategy::QbeObs => "qbe-obs",
            Strategy::QbeOracle => "qbe-oracle",
            Strategy::QbeEncoder => "qbe-encoder",
            Strategy::ExoPsrs => "exo-psrs",
            Strategy::ModelObs => "model-obs",
            Strategy::ModelLatent => "model-latent",
        }
    }

    /// Whether the strategy replays or models the logged dataset.
    pub fn needs_dataset(self) -> bool {
        self != Strategy::Real
    }

    pub fn needs_learned_encoder(self) -> bool {
        matches!(self, Strategy::PsrsEncoder | Strategy::QbeEncoder)
    }

    pub fn needs_discrete_observations(self) -> bool {
        matches!(self, Strategy::PsrsObs | Strategy::QbeObs | Strategy::ModelObs)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Strategy {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.tag() == s)
            .ok_or_else(|| ExperimentError::Config(format!("unknown strategy tag {s:?}")))
    }
}

/// A fixed policy described without its (derived) value table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicySpec {
    Uniform,
    /// ε-greedy over the optimal Q-function at discount `gamma`.
    EpsSoft { epsilon: f64, gamma: f64 },
}

impl PolicySpec {
    pub fn build(&self, emission: EmissionSpec) -> FixedPolicy {
        match *self {
            PolicySpec::Uniform => FixedPolicy::Uniform,
            PolicySpec::EpsSoft { epsilon, gamma } => {
                FixedPolicy::EpsSoft(EpsSoftPolicy::new(optimal_q(gamma), epsilon, emission))
            }
        }
    }

    pub fn describe(&self) -> String {
        match self {
            PolicySpec::Uniform => "uniform".into(),
            PolicySpec::EpsSoft { epsilon, gamma } => format!("eps_soft(epsilon={epsilon}, gamma={gamma})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LearnerSpec {
    QLearning { alpha: f64, gamma: f64, epsilon: f64 },
    McEval { target: PolicySpec, gamma: f64 },
    Ppo(PpoConfig),
}

impl LearnerSpec {
    /// A fresh learner; `seed` only matters for learners with random init.
    pub fn build(&self, emission: EmissionSpec, seed: u64) -> Result<Box<dyn Learner>, ExperimentError> {
        Ok(match self {
            LearnerSpec::QLearning { alpha, gamma, epsilon } => Box::new(TabularQ::new(*alpha, *gamma, *epsilon)),
            LearnerSpec::McEval { target, gamma } => {
                Box::new(MonteCarloEvaluator::new(target.build(emission), *gamma))
            }
            LearnerSpec::Ppo(cfg) => Box::new(PpoLearner::new(cfg.clone(), derive_seed(seed, 7))?),
        })
    }

    pub fn cadence(&self, sample_every: u64) -> Cadence {
        match self {
            LearnerSpec::Ppo(cfg) => Cadence::Epochs {
                epoch_size: cfg.epoch_size as u64,
            },
            _ => Cadence::Steps { every: sample_every },
        }
    }

    /// Steps per horizon unit.
    pub fn steps_per_unit(&self) -> u64 {
        match self {
            LearnerSpec::Ppo(cfg) => cfg.epoch_size.max(1) as u64,
            _ => 1,
        }
    }

    fn intrinsic_stats(&self) -> &'static [&'static str] {
        match self {
            LearnerSpec::QLearning { .. } => &[],
            LearnerSpec::McEval { .. } => &["mc_value", "mc_episodes"],
            LearnerSpec::Ppo(_) => &["train_return", "epochs"],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub emission: EmissionSpec,
    pub episode_cap: u32,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            emission: EmissionSpec::NoiseBits { k: 4 },
            episode_cap: DEFAULT_EPISODE_CAP,
        }
    }
}

impl EnvConfig {
    pub fn world(&self) -> GridWorld {
        GridWorld::new(self.emission).with_episode_cap(self.episode_cap)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub budget: CollectBudget,
    pub seed: u64,
    pub behavior: PolicySpec,
    /// Defaults to `<out>/dataset.jsonl`.
    pub path: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            budget: CollectBudget::Episodes(1000),
            seed: 0,
            behavior: PolicySpec::Uniform,
            path: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderSource {
    /// Decode observations with the ground-truth emission.
    Oracle,
    /// Train (or load) a contrastive encoder.
    Learned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub source: EncoderSource,
    /// Defaults to `<out>/encoder.json`.
    pub checkpoint: Option<PathBuf>,
    pub hyper: EncoderHyperparams,
    pub split_fraction: f64,
    pub split_seed: u64,
    pub init_seed: u64,
    /// When present, train every grid point and keep the best.
    pub search: Option<SearchGrid>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            source: EncoderSource::Oracle,
            checkpoint: None,
            hyper: EncoderHyperparams::default(),
            split_fraction: 0.5,
            split_seed: 0,
            init_seed: 0,
            search: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationConfig {
    pub strategies: Vec<Strategy>,
    /// Run length cap in cadence units (steps, or epochs for PPO).
    pub horizon: u64,
    pub n_seeds: u32,
    /// Base seed; run `i` uses `derive_seed(seed, i)` for every strategy.
    pub seed: u64,
    /// Parallel workers.
    pub jobs: usize,
    /// Step-cadence sampling interval for non-epoch learners.
    pub sample_every: u64,
    pub support: SupportPolicy,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            strategies: vec![Strategy::Real, Strategy::PsrsObs, Strategy::PsrsOracle],
            horizon: 100_000,
            n_seeds: 100,
            seed: 0,
            jobs: 1,
            sample_every: 100,
            support: SupportPolicy::RejectAlways,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluationConfig {
    /// g-statistics recorded during runs.
    pub stats: Vec<String>,
    /// Statistic used for fidelity; defaults to the first of `stats`.
    pub primary: Option<String>,
    pub validation_rollouts: u32,
    /// Minimum number of live runs for a mean-curve point.
    pub alive_floor: usize,
    /// Cap on the fidelity grid, in cadence units.
    pub fidelity_horizon: Option<u64>,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            stats: vec!["start_value".into()],
            primary: None,
            validation_rollouts: 10,
            alive_floor: 1,
            fidelity_horizon: None,
        }
    }
}

impl EvaluationConfig {
    pub fn primary_stat(&self) -> &str {
        self.primary
            .as_deref()
            .or(self.stats.first().map(String::as_str))
            .unwrap_or("start_value")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    pub out_dir: PathBuf,
    pub env: EnvConfig,
    pub dataset: DatasetConfig,
    pub encoder: EncoderConfig,
    pub learner: LearnerSpec,
    pub simulation: SimulationConfig,
    pub evaluation: EvaluationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "discrete-noise".into(),
            out_dir: PathBuf::from("runs/discrete-noise"),
            env: EnvConfig::default(),
            dataset: DatasetConfig::default(),
            encoder: EncoderConfig::default(),
            learner: LearnerSpec::QLearning {
                alpha: 0.5,
                gamma: 0.95,
                epsilon: 0.9,
            },
            simulation: SimulationConfig::default(),
            evaluation: EvaluationConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ExperimentError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path).map_err(super::io_err(path))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String, ExperimentError> {
        toml::to_string_pretty(self).map_err(|e| ExperimentError::Serde(e.to_string()))
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.dataset
            .path
            .clone()
            .unwrap_or_else(|| self.out_dir.join("dataset.jsonl"))
    }

    pub fn encoder_path(&self) -> PathBuf {
        self.encoder
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.out_dir.join("encoder.json"))
    }

    /// SHA-256 over the settings that influence results (worker count and
    /// output location excluded).
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.simulation.jobs = 1;
        canonical.out_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Every run length in steps.
    pub fn max_steps(&self) -> u64 {
        self.simulation
            .horizon
            .saturating_mul(self.learner.steps_per_unit())
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        let sim = &self.simulation;
        if sim.n_seeds == 0 {
            return bad("simulation.n_seeds must be at least 1".into());
        }
        if sim.strategies.is_empty() {
            return bad("simulation.strategies is empty".into());
        }
        if sim.strategies.iter().collect::<BTreeSet<_>>().len() != sim.strategies.len() {
            return bad("simulation.strategies lists a strategy twice".into());
        }
        if sim.horizon == 0 {
            return bad("simulation.horizon must be positive".into());
        }
        if !(self.encoder.split_fraction > 0.0 && self.encoder.split_fraction < 1.0) {
            return bad("encoder.split_fraction must lie in (0, 1)".into());
        }
        let emission = self.env.emission;
        for s in &sim.strategies {
            if s.needs_discrete_observations() && !emission.is_discrete() {
                return bad(format!("strategy {s} needs discrete observations"));
            }
            if *s == Strategy::ExoPsrs && !emission.has_counter() {
                return bad("exo-psrs needs the counter emission".into());
            }
            if s.needs_learned_encoder() && self.encoder.source != EncoderSource::Learned {
                return bad(format!("strategy {s} needs encoder.source = \"learned\""));
            }
        }
        if let LearnerSpec::Ppo(cfg) = &self.learner {
            if cfg.epoch_size == 0 {
                return bad("learner.epoch_size must be positive".into());
            }
            match (cfg.featurizer, emission.is_discrete()) {
                (Featurizer::Coordinates, true) => {
                    return bad("ppo on discrete observations needs a one_hot featurizer".into())
                }
                (Featurizer::OneHot { .. }, false) => {
                    return bad("ppo on continuous observations needs the coordinates featurizer".into())
                }
                _ => {}
            }
        }
        if self.evaluation.stats.is_empty() {
            return bad("evaluation.stats is empty".into());
        }
        for name in &self.evaluation.stats {
            match name.as_str() {
                "start_value" => {
                    if !emission.is_discrete() {
                        return bad("start_value needs discrete observations".into());
                    }
                    if !matches!(self.learner, LearnerSpec::QLearning { .. }) {
                        return bad("start_value needs a learner with a Q-table".into());
                    }
                }
                "validation_return" => {
                    if self.evaluation.validation_rollouts == 0 {
                        return bad("evaluation.validation_rollouts must be positive".into());
                    }
                }
                other if self.learner.intrinsic_stats().contains(&other) => {}
                other => return bad(format!("statistic {other:?} is not available for this learner")),
            }
        }
        if !self.evaluation.stats.iter().any(|s| s == self.evaluation.primary_stat()) {
            return bad("evaluation.primary must be one of evaluation.stats".into());
        }
        Ok(())
    }
}
