use std::collections::BTreeSet;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{EncoderSource, ExperimentConfig, Strategy};
use super::{io_err, ExperimentError};
use crate::data::{self, collect, split, LoggedDataset};
use crate::encoder::{
    abstraction_report, labeled_observations, search_hyperparameters, train_encoder,
    AbstractionReport, EncoderModel, LatentEncoder, TrainingReport,
};
use crate::env::{GridWorld, Observation};
use crate::sim::{
    derive_seed, fit_mle_model, run_exo_psrs, run_model_based, run_psrs, run_qbe, run_real,
    CounterOracles, GStat, KeyFn, MleModel, ModelSpace, PsrsMode, RunSpec, SimulationResult,
};

/// `<strategy>-s<index>` with a zero-padded index.
pub fn run_id(strategy: Strategy, index: u32) -> String {
    format!("{}-s{index:03}", strategy.tag())
}

/// One line of `manifest.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ManifestEntry {
    /// Written before a sweep starts, listing every planned run.
    Sweep {
        config_hash: String,
        version: String,
        name: String,
        started_unix: u64,
        runs: Vec<PlannedRun>,
    },
    Artifact {
        config_hash: String,
        version: String,
        name: String,
        path: PathBuf,
        wall_ms: u64,
    },
    Run {
        config_hash: String,
        run_id: String,
        strategy: Strategy,
        seed_index: u32,
        seed: u64,
        ok: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        curve_path: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        result_path: Option<PathBuf>,
        wall_ms: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedRun {
    pub run_id: String,
    pub seed: u64,
}

/// Contents of `results/<run_id>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub strategy: Strategy,
    pub seed_index: u32,
    pub seed: u64,
    pub config_hash: String,
    pub result: SimulationResult,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub planned: usize,
    pub executed: usize,
    pub skipped: usize,
    pub failed: Vec<(String, String)>,
}

fn version() -> String {
    env!("CARGO_PKG_VERSION").to_string()
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

fn manifest_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("manifest.jsonl")
}

fn append_manifest(path: &Path, entry: &ManifestEntry) -> Result<(), ExperimentError> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    let line = serde_json::to_string(entry).map_err(|e| ExperimentError::Serde(e.to_string()))?;
    writeln!(f, "{line}").map_err(io_err(path))
}

/// Parse `manifest.jsonl`; a missing file is an empty manifest and
/// unparsable lines (for example a write cut short) are skipped.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, ExperimentError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(e) => out.push(e),
            Err(e) => log::warn!("{}:{}: skipping unreadable manifest line: {e}", path.display(), i + 1),
        }
    }
    Ok(out)
}

fn create_dir(path: &Path) -> Result<(), ExperimentError> {
    std::fs::create_dir_all(path).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ExperimentError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| ExperimentError::Serde(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(io_err(path))
}

/// Roll the configured behavior policy and write the dataset.
pub fn cmd_collect(cfg: &ExperimentConfig) -> Result<PathBuf, ExperimentError> {
    cfg.validate()?;
    create_dir(&cfg.out_dir)?;
    let start = Instant::now();
    let world = cfg.env.world();
    let behavior = cfg.dataset.behavior.build(world.emission);
    let dataset = collect(
        &world,
        &behavior,
        &cfg.dataset.behavior.describe(),
        cfg.dataset.budget,
        cfg.dataset.seed,
    )?;
    let path = cfg.dataset_path();
    data::save(&dataset, &path)?;
    log::info!("collected {} transitions in {} episodes", dataset.len(), dataset.meta.episodes);
    append_manifest(
        &manifest_path(cfg),
        &ManifestEntry::Artifact {
            config_hash: cfg.hash(),
            version: version(),
            name: "dataset".into(),
            path: path.clone(),
            wall_ms: start.elapsed().as_millis() as u64,
        },
    )?;
    Ok(path)
}

fn load_dataset(cfg: &ExperimentConfig) -> Result<LoggedDataset, ExperimentError> {
    let path = cfg.dataset_path();
    if !path.exists() {
        return Err(ExperimentError::MissingInput {
            path,
            hint: "run `collect` first".into(),
        });
    }
    let dataset = data::load(&path)?;
    if dataset.meta.env.emission != cfg.env.emission {
        return Err(ExperimentError::Config(format!(
            "dataset {} was collected with a different emission",
            path.display()
        )));
    }
    Ok(dataset)
}

/// Contents of `encoder_report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderArtifacts {
    /// One report per trained candidate; `selected` indexes the winner.
    pub training: Vec<TrainingReport>,
    pub selected: usize,
    /// Comparison with the true cells on the validation split.
    pub abstraction: Option<AbstractionReport>,
}

/// Split the dataset, train (or search) the encoder and write the
/// checkpoint plus its report.
pub fn cmd_train_encoder(cfg: &ExperimentConfig) -> Result<(PathBuf, EncoderArtifacts), ExperimentError> {
    cfg.validate()?;
    if cfg.encoder.source != EncoderSource::Learned {
        return Err(ExperimentError::Config(
            "train-encoder needs encoder.source = \"learned\"".into(),
        ));
    }
    let start = Instant::now();
    let dataset = load_dataset(cfg)?;
    let (train, validation) = split(&dataset, cfg.encoder.split_fraction, cfg.encoder.split_seed)?;
    let (model, training) = match &cfg.encoder.search {
        Some(grid) => search_hyperparameters(&train, &validation, &cfg.encoder.hyper, grid)?,
        None => {
            let (m, r) = train_encoder(&train, &validation, &cfg.encoder.hyper, cfg.encoder.init_seed)?;
            (m, vec![r])
        }
    };
    let selected = training
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.best_validation_loss.total_cmp(&b.1.best_validation_loss))
        .map_or(0, |(i, _)| i);
    let latent_dim = model.latent_dim();
    let encoder = LatentEncoder::Learned(Box::new(model));
    let abstraction = labeled_observations(&validation)
        .ok()
        .map(|samples| abstraction_report(&encoder, latent_dim, samples));
    let LatentEncoder::Learned(model) = encoder else {
        unreachable!()
    };

    let path = cfg.encoder_path();
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    create_dir(&cfg.out_dir)?;
    write_json(&path, &model)?;
    let artifacts = EncoderArtifacts {
        training,
        selected,
        abstraction,
    };
    write_json(&cfg.out_dir.join("encoder_report.json"), &artifacts)?;
    append_manifest(
        &manifest_path(cfg),
        &ManifestEntry::Artifact {
            config_hash: cfg.hash(),
            version: version(),
            name: "encoder".into(),
            path: path.clone(),
            wall_ms: start.elapsed().as_millis() as u64,
        },
    )?;
    Ok((path, artifacts))
}

fn load_encoder(cfg: &ExperimentConfig) -> Result<EncoderModel, ExperimentError> {
    let path = cfg.encoder_path();
    let text = std::fs::read_to_string(&path).map_err(|_| ExperimentError::MissingInput {
        path: path.clone(),
        hint: "run `train-encoder` first or set encoder.checkpoint".into(),
    })?;
    serde_json::from_str(&text).map_err(|e| ExperimentError::Serde(format!("{}: {e}", path.display())))
}

/// Everything a sweep needs, loaded once and shared by all runs.
pub struct PreparedSweep {
    pub cfg: ExperimentConfig,
    pub world: GridWorld,
    pub dataset: Option<LoggedDataset>,
    pub learned: Option<LatentEncoder>,
    oracle: LatentEncoder,
    obs_model: Option<MleModel>,
    latent_model: Option<MleModel>,
}

impl PreparedSweep {
    /// Load the dataset and encoder the configured strategies require.
    pub fn load(cfg: &ExperimentConfig) -> Result<Self, ExperimentError> {
        cfg.validate()?;
        let needs_data = cfg.simulation.strategies.iter().any(|s| s.needs_dataset());
        let dataset = if needs_data { Some(load_dataset(cfg)?) } else { None };
        let learned = if needs_data && cfg.encoder.source == EncoderSource::Learned {
            Some(load_encoder(cfg)?)
        } else {
            None
        };
        Self::from_parts(cfg.clone(), dataset, learned)
    }

    /// Build from in-memory inputs.
    pub fn from_parts(
        cfg: ExperimentConfig,
        dataset: Option<LoggedDataset>,
        learned: Option<EncoderModel>,
    ) -> Result<Self, ExperimentError> {
        cfg.validate()?;
        let strategies = &cfg.simulation.strategies;
        if strategies.iter().any(|s| s.needs_dataset()) && dataset.is_none() {
            return Err(ExperimentError::Config("replay strategies need a dataset".into()));
        }
        if strategies.iter().any(|s| s.needs_learned_encoder()) && learned.is_none() {
            return Err(ExperimentError::Config("encoder strategies need a trained encoder".into()));
        }
        let fit = |space| -> Result<Option<MleModel>, ExperimentError> {
            Ok(match &dataset {
                Some(d) => Some(fit_mle_model(d, space)?),
                None => None,
            })
        };
        let obs_model = if strategies.contains(&Strategy::ModelObs) { fit(ModelSpace::Observation)? } else { None };
        let latent_model = if strategies.contains(&Strategy::ModelLatent) { fit(ModelSpace::Latent)? } else { None };
        Ok(Self {
            world: cfg.env.world(),
            oracle: LatentEncoder::Oracle {
                emission: cfg.env.emission,
            },
            learned: learned.map(|m| LatentEncoder::Learned(Box::new(m))),
            dataset,
            obs_model,
            latent_model,
            cfg,
        })
    }

    /// Seed shared by every strategy's run `index`.
    pub fn run_seed(&self, index: u32) -> u64 {
        derive_seed(self.cfg.simulation.seed, index as u64)
    }

    fn stats(&self, run_seed: u64) -> Vec<GStat> {
        let emission = self.cfg.env.emission;
        self.cfg
            .evaluation
            .stats
            .iter()
            .map(|name| match name.as_str() {
                "start_value" => GStat::StartValue {
                    starts: emission
                        .start_observation_ids()
                        .unwrap_or_default()
                        .into_iter()
                        .map(Observation::DiscreteId)
                        .collect(),
                },
                "validation_return" => GStat::ValidationReturn {
                    world: self.world,
                    n_rollouts: self.cfg.evaluation.validation_rollouts,
                    seed: derive_seed(run_seed, 99),
                },
                other => GStat::Intrinsic { name: other.into() },
            })
            .collect()
    }

    /// Key used by the baselines: the learned encoder when there is one.
    fn baseline_key(&self) -> KeyFn {
        KeyFn::Latent {
            encoder: self.learned.clone().unwrap_or_else(|| self.oracle.clone()),
        }
    }

    /// Execute run `index` of `strategy` without touching the filesystem.
    pub fn run(&self, strategy: Strategy, index: u32, keep_history: bool) -> Result<SimulationResult, ExperimentError> {
        let seed = self.run_seed(index);
        let spec = RunSpec {
            strategy: strategy.tag().into(),
            max_steps: self.cfg.max_steps(),
            seed,
            cadence: self.cfg.learner.cadence(self.cfg.simulation.sample_every),
            stats: self.stats(seed),
            keep_history,
            support: self.cfg.simulation.support,
        };
        let mut learner = self.cfg.learner.build(self.cfg.env.emission, seed)?;
        let learner = learner.as_mut();
        let oracle = || KeyFn::Latent {
            encoder: self.oracle.clone(),
        };
        let learned = || KeyFn::Latent {
            encoder: self.learned.clone().expect("checked in from_parts"),
        };
        let data = || self.dataset.as_ref().expect("checked in from_parts");
        let result = match strategy {
            Strategy::Real => run_real(&self.world, learner, &spec)?,
            Strategy::PsrsObs => run_psrs(data(), learner, &KeyFn::Identity, PsrsMode::Full, &spec)?,
            Strategy::PsrsOracle => run_psrs(data(), learner, &oracle(), PsrsMode::Full, &spec)?,
            Strategy::PsrsEncoder => run_psrs(data(), learner, &learned(), PsrsMode::Full, &spec)?,
            Strategy::QbeObs => run_qbe(data(), learner, &KeyFn::Identity, &spec)?,
            Strategy::QbeOracle => run_qbe(data(), learner, &oracle(), &spec)?,
            Strategy::QbeEncoder => run_qbe(data(), learner, &learned(), &spec)?,
            Strategy::ObsOnly => run_psrs(data(), learner, &self.baseline_key(), PsrsMode::ObsOnly, &spec)?,
            Strategy::ActOnly => run_psrs(data(), learner, &self.baseline_key(), PsrsMode::ActOnly, &spec)?,
            Strategy::Random => run_psrs(data(), learner, &self.baseline_key(), PsrsMode::Random, &spec)?,
            Strategy::ExoPsrs => run_exo_psrs(
                data(),
                learner,
                &CounterOracles {
                    emission: self.cfg.env.emission,
                },
                &spec,
            )?,
            Strategy::ModelObs => run_model_based(self.obs_model.as_ref().expect("fitted"), learner, &spec)?,
            Strategy::ModelLatent => run_model_based(self.latent_model.as_ref().expect("fitted"), learner, &spec)?,
        };
        Ok(result)
    }
}

/// Serializes all sweep output through one lock.
struct SweepWriter {
    curves_dir: PathBuf,
    results_dir: PathBuf,
    manifest: BufWriter<File>,
    manifest_path: PathBuf,
}

impl SweepWriter {
    fn append(&mut self, entry: &ManifestEntry) -> Result<(), ExperimentError> {
        let line = serde_json::to_string(entry).map_err(|e| ExperimentError::Serde(e.to_string()))?;
        writeln!(self.manifest, "{line}")
            .and_then(|_| self.manifest.flush())
            .map_err(io_err(&self.manifest_path))
    }

    fn write_run(&mut self, record: &RunRecord, wall_ms: u64, hash: &str) -> Result<(), ExperimentError> {
        let curve_path = self.curves_dir.join(format!("{}.csv", record.run_id));
        let result_path = self.results_dir.join(format!("{}.json", record.run_id));
        write_curve_csv(&curve_path, record)?;
        write_json(&result_path, record)?;
        self.append(&ManifestEntry::Run {
            config_hash: hash.into(),
            run_id: record.run_id.clone(),
            strategy: record.strategy,
            seed_index: record.seed_index,
            seed: record.seed,
            ok: true,
            error: None,
            curve_path: Some(curve_path),
            result_path: Some(result_path),
            wall_ms,
        })
    }
}

/// `run_id,strategy,t,g_name,g_value`, ordered by statistic name then `t`.
fn write_curve_csv(path: &Path, record: &RunRecord) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["run_id", "strategy", "t", "g_name", "g_value"])?;
    for (name, points) in &record.result.curves {
        for (t, v) in points {
            w.write_record([
                record.run_id.as_str(),
                record.strategy.tag(),
                &t.to_string(),
                name.as_str(),
                &v.to_string(),
            ])?;
        }
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Run every strategy and seed not already completed under the same
/// config hash, in parallel up to `simulation.jobs` workers.
pub fn cmd_simulate(cfg: &ExperimentConfig) -> Result<SweepSummary, ExperimentError> {
    let prepared = PreparedSweep::load(cfg)?;
    let hash = cfg.hash();
    let curves_dir = cfg.out_dir.join("curves");
    let results_dir = cfg.out_dir.join("results");
    create_dir(&curves_dir)?;
    create_dir(&results_dir)?;
    let manifest_path = manifest_path(cfg);

    let done: BTreeSet<String> = read_manifest(&manifest_path)?
        .into_iter()
        .filter_map(|e| match e {
            ManifestEntry::Run {
                config_hash,
                run_id,
                ok: true,
                result_path: Some(p),
                ..
            } if config_hash == hash && p.exists() => Some(run_id),
            _ => None,
        })
        .collect();

    let mut planned = Vec::new();
    for &strategy in &cfg.simulation.strategies {
        for index in 0..cfg.simulation.n_seeds {
            planned.push((strategy, index, run_id(strategy, index), prepared.run_seed(index)));
        }
    }
    let pending: Vec<_> = planned.iter().filter(|p| !done.contains(&p.2)).cloned().collect();

    let manifest = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&manifest_path)
        .map_err(io_err(&manifest_path))?;
    let writer = Mutex::new(SweepWriter {
        curves_dir,
        results_dir,
        manifest: BufWriter::new(manifest),
        manifest_path: manifest_path.clone(),
    });
    writer.lock().expect("writer lock").append(&ManifestEntry::Sweep {
        config_hash: hash.clone(),
        version: version(),
        name: cfg.name.clone(),
        started_unix: unix_now(),
        runs: planned
            .iter()
            .map(|p| PlannedRun {
                run_id: p.2.clone(),
                seed: p.3,
            })
            .collect(),
    })?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.simulation.jobs.max(1))
        .build()
        .map_err(|e| ExperimentError::Config(format!("thread pool: {e}")))?;
    let outcomes: Vec<Result<(), (String, String)>> = pool.install(|| {
        pending
            .par_iter()
            .map(|(strategy, index, id, seed)| {
                let start = Instant::now();
                let outcome = prepared.run(*strategy, *index, false).and_then(|result| {
                    log::info!("{id}: {} steps, {:?}", result.length, result.termination);
                    let record = RunRecord {
                        run_id: id.clone(),
                        strategy: *strategy,
                        seed_index: *index,
                        seed: *seed,
                        config_hash: hash.clone(),
                        result,
                    };
                    let wall = start.elapsed().as_millis() as u64;
                    writer.lock().expect("writer lock").write_run(&record, wall, &hash)
                });
                outcome.map_err(|e| {
                    log::error!("{id} failed: {e}");
                    let entry = ManifestEntry::Run {
                        config_hash: hash.clone(),
                        run_id: id.clone(),
                        strategy: *strategy,
                        seed_index: *index,
                        seed: *seed,
                        ok: false,
                        error: Some(e.to_string()),
                        curve_path: None,
                        result_path: None,
                        wall_ms: start.elapsed().as_millis() as u64,
                    };
                    if let Err(w) = writer.lock().expect("writer lock").append(&entry) {
                        log::error!("could not record failure of {id}: {w}");
                    }
                    (id.clone(), e.to_string())
                })
            })
            .collect()
    });

    let failed: Vec<_> = outcomes.into_iter().filter_map(Result::err).collect();
    Ok(SweepSummary {
        planned: planned.len(),
        executed: pending.len() - failed.len(),
        skipped: planned.len() - pending.len(),
        failed,
    })
}
