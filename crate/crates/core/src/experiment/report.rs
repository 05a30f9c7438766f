use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, LearnerSpec, Strategy};
use super::runner::RunRecord;
use super::{io_err, ExperimentError};
use crate::eval::{efficiency, fidelity_rmse, CurveSet, EfficiencyReport, FidelityReport, LearningCurve, LengthUnit};
use crate::sim::TerminationReason;

/// Per-strategy evaluation of one statistic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: Strategy,
    pub n_runs: usize,
    /// `None` for the real environment, which never runs out of data.
    pub efficiency: Option<EfficiencyReport>,
    /// `None` for the real environment (zero by definition) or when no
    /// real runs overlap.
    pub fidelity: Option<FidelityReport>,
    pub terminations: BTreeMap<TerminationReason, usize>,
    pub failed_runs: usize,
}

impl StrategySummary {
    pub fn rmse(&self) -> Option<f64> {
        if self.strategy == Strategy::Real {
            Some(0.0)
        } else {
            self.fidelity.as_ref().map(|f| f.rmse)
        }
    }
}

/// Contents of `evaluation.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub name: String,
    pub config_hash: String,
    pub statistic: String,
    pub unit: LengthUnit,
    /// Horizon of the run configuration, in `unit`.
    pub horizon: u64,
    pub strategies: Vec<StrategySummary>,
}

impl Evaluation {
    pub fn get(&self, strategy: Strategy) -> Option<&StrategySummary> {
        self.strategies.iter().find(|s| s.strategy == strategy)
    }
}

fn sorted_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>, ExperimentError> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == ext))
        .collect();
    out.sort();
    Ok(out)
}

/// Read every `curves/*.csv` into one curve per (run, statistic).
pub fn load_curves(dir: &Path) -> Result<Vec<LearningCurve>, ExperimentError> {
    #[derive(Deserialize)]
    struct Row {
        run_id: String,
        strategy: String,
        t: u64,
        g_name: String,
        g_value: f64,
    }
    let mut curves: BTreeMap<(String, String), LearningCurve> = BTreeMap::new();
    for path in sorted_files(dir, "csv")? {
        let mut reader = csv::Reader::from_path(&path)?;
        for row in reader.deserialize() {
            let row: Row = row?;
            curves
                .entry((row.run_id.clone(), row.g_name.clone()))
                .or_insert_with(|| LearningCurve {
                    run_id: row.run_id,
                    strategy: row.strategy,
                    g_name: row.g_name,
                    points: Vec::new(),
                })
                .points
                .push((row.t, row.g_value));
        }
    }
    Ok(curves.into_values().collect())
}

fn load_records(dir: &Path, hash: &str) -> Result<Vec<RunRecord>, ExperimentError> {
    let mut out = Vec::new();
    for path in sorted_files(dir, "json")? {
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        let record: RunRecord =
            serde_json::from_str(&text).map_err(|e| ExperimentError::Serde(format!("{}: {e}", path.display())))?;
        if record.config_hash == hash {
            out.push(record);
        } else {
            log::warn!("{} belongs to another configuration; ignored", path.display());
        }
    }
    Ok(out)
}

fn failed_runs(cfg: &ExperimentConfig, hash: &str) -> Result<BTreeMap<Strategy, usize>, ExperimentError> {
    use super::runner::{read_manifest, ManifestEntry};
    let mut ok = std::collections::BTreeSet::new();
    let mut bad = std::collections::BTreeSet::new();
    for e in read_manifest(&cfg.out_dir.join("manifest.jsonl"))? {
        if let ManifestEntry::Run {
            config_hash,
            run_id,
            strategy,
            ok: success,
            ..
        } = e
        {
            if config_hash == hash {
                if success {
                    ok.insert(run_id);
                } else {
                    bad.insert((strategy, run_id));
                }
            }
        }
    }
    let mut out = BTreeMap::new();
    for (s, id) in bad {
        if !ok.contains(&id) {
            *out.entry(s).or_default() += 1;
        }
    }
    Ok(out)
}

fn unit_for(cfg: &ExperimentConfig) -> LengthUnit {
    match &cfg.learner {
        LearnerSpec::Ppo(p) => LengthUnit::Epochs {
            epoch_size: p.epoch_size as u64,
        },
        _ => LengthUnit::Steps,
    }
}

/// Compute fidelity and efficiency for every strategy with results and
/// write `evaluation.json` and `summary.csv`.
pub fn cmd_evaluate(cfg: &ExperimentConfig) -> Result<Evaluation, ExperimentError> {
    cfg.validate()?;
    let hash = cfg.hash();
    let records = load_records(&cfg.out_dir.join("results"), &hash)?;
    let current: std::collections::BTreeSet<&str> = records.iter().map(|r| r.run_id.as_str()).collect();
    let statistic = cfg.evaluation.primary_stat().to_string();
    let curves: Vec<LearningCurve> = load_curves(&cfg.out_dir.join("curves"))?
        .into_iter()
        .filter(|c| c.g_name == statistic && current.contains(c.run_id.as_str()))
        .collect();
    let failed = failed_runs(cfg, &hash)?;
    let evaluation = evaluate_records(cfg, &records, &curves, &failed)?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(io_err(&cfg.out_dir))?;
    let path = cfg.out_dir.join("evaluation.json");
    let text = serde_json::to_string_pretty(&evaluation).map_err(|e| ExperimentError::Serde(e.to_string()))?;
    std::fs::write(&path, text + "\n").map_err(io_err(&path))?;
    write_summary_csv(&cfg.out_dir.join("summary.csv"), &evaluation)?;
    Ok(evaluation)
}

fn evaluate_records(
    cfg: &ExperimentConfig,
    records: &[RunRecord],
    curves: &[LearningCurve],
    failed: &BTreeMap<Strategy, usize>,
) -> Result<Evaluation, ExperimentError> {
    let unit = unit_for(cfg);
    let by_strategy = |s: Strategy| CurveSet {
        strategy: s.tag().into(),
        curves: curves.iter().filter(|c| c.strategy == s.tag()).cloned().collect(),
    };
    let real = by_strategy(Strategy::Real);
    let mut strategies: Vec<Strategy> = records.iter().map(|r| r.strategy).collect();
    strategies.sort();
    strategies.dedup();

    let mut out = Vec::new();
    for s in strategies {
        let runs: Vec<&RunRecord> = records.iter().filter(|r| r.strategy == s).collect();
        let mut terminations = BTreeMap::new();
        for r in &runs {
            *terminations.entry(r.result.termination).or_default() += 1;
        }
        let lengths: Vec<u64> = runs.iter().map(|r| r.result.length).collect();
        let (eff, fid) = if s == Strategy::Real {
            (None, None)
        } else {
            let set = by_strategy(s);
            let fid = if real.curves.is_empty() || set.curves.is_empty() {
                None
            } else {
                fidelity_rmse(&set, &real, cfg.evaluation.fidelity_horizon, cfg.evaluation.alive_floor).ok()
            };
            (Some(efficiency(s.tag(), &lengths, unit)?), fid)
        };
        out.push(StrategySummary {
            strategy: s,
            n_runs: runs.len(),
            efficiency: eff,
            fidelity: fid,
            terminations,
            failed_runs: failed.get(&s).copied().unwrap_or(0),
        });
    }
    Ok(Evaluation {
        name: cfg.name.clone(),
        config_hash: cfg.hash(),
        statistic: cfg.evaluation.primary_stat().into(),
        unit,
        horizon: cfg.simulation.horizon,
        strategies: out,
    })
}

fn termination_text(t: &BTreeMap<TerminationReason, usize>) -> String {
    t.iter()
        .map(|(k, v)| {
            let name = match k {
                TerminationReason::QueueExhausted => "queue_exhausted",
                TerminationReason::InitExhausted => "init_exhausted",
                TerminationReason::ReachedHorizon => "reached_horizon",
            };
            format!("{name}:{v}")
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn unit_name(unit: LengthUnit) -> &'static str {
    match unit {
        LengthUnit::Steps => "steps",
        LengthUnit::Epochs { .. } => "epochs",
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.4}"))
}

fn write_summary_csv(path: &Path, ev: &Evaluation) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "strategy",
        "n_runs",
        "failed_runs",
        "efficiency_median",
        "efficiency_unit",
        "fidelity_rmse",
        "fidelity_mae",
        "fidelity_max_abs",
        "fidelity_horizon",
        "terminations",
    ])?;
    for s in &ev.strategies {
        let eff = s.efficiency.as_ref().map_or_else(|| "inf".into(), |e| e.median.to_string());
        let f = s.fidelity.as_ref();
        let real = s.strategy == Strategy::Real;
        let num = |v: Option<f64>| if real { "0".to_string() } else { v.map_or_else(String::new, |x| x.to_string()) };
        w.write_record([
            s.strategy.tag().to_string(),
            s.n_runs.to_string(),
            s.failed_runs.to_string(),
            eff,
            unit_name(ev.unit).to_string(),
            num(f.map(|f| f.rmse)),
            num(f.map(|f| f.mae)),
            num(f.map(|f| f.max_abs)),
            f.map_or_else(String::new, |f| f.horizon.to_string()),
            termination_text(&s.terminations),
        ])?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Fixed-width text table of an evaluation.
pub fn render_report(ev: &Evaluation) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{} ({}; efficiency in {}, horizon {})",
        ev.name,
        ev.statistic,
        unit_name(ev.unit),
        ev.horizon
    );
    if ev.strategies.is_empty() {
        out.push_str("no runs\n");
        return out;
    }
    let _ = writeln!(
        out,
        "{:<14} {:>6} {:>12} {:>10} {:>10}  terminations",
        "strategy", "runs", "efficiency", "rmse", "max_abs"
    );
    for s in &ev.strategies {
        let eff = s.efficiency.as_ref().map_or_else(|| "inf".into(), |e| format!("{}", e.median));
        let max_abs = if s.strategy == Strategy::Real {
            Some(0.0)
        } else {
            s.fidelity.as_ref().map(|f| f.max_abs)
        };
        let mut runs = s.n_runs.to_string();
        if s.failed_runs > 0 {
            runs = format!("{runs}+{}F", s.failed_runs);
        }
        let _ = writeln!(
            out,
            "{:<14} {:>6} {:>12} {:>10} {:>10}  {}",
            s.strategy.tag(),
            runs,
            eff,
            fmt_opt(s.rmse()),
            fmt_opt(max_abs),
            termination_text(&s.terminations)
        );
    }
    out
}

/// Render `evaluation.json` as a table and write `report.txt`. An empty or
/// missing results directory yields a "no runs" report.
pub fn cmd_report(cfg: &ExperimentConfig) -> Result<String, ExperimentError> {
    let results = cfg.out_dir.join("results");
    let has_results = sorted_files(&results, "json")?.iter().next().is_some();
    let text = if !has_results {
        format!("{}: no runs in {}\n", cfg.name, results.display())
    } else {
        let path = cfg.out_dir.join("evaluation.json");
        let body = std::fs::read_to_string(&path).map_err(|_| ExperimentError::MissingInput {
            path: path.clone(),
            hint: "run `evaluate` first".into(),
        })?;
        let ev: Evaluation =
            serde_json::from_str(&body).map_err(|e| ExperimentError::Serde(format!("{}: {e}", path.display())))?;
        render_report(&ev)
    };
    std::fs::create_dir_all(&cfg.out_dir).map_err(io_err(&cfg.out_dir))?;
    let out = cfg.out_dir.join("report.txt");
    std::fs::write(&out, &text).map_err(io_err(&out))?;
    Ok(text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::CollectBudget;
    use crate::experiment::{cmd_collect, cmd_simulate};

    fn cfg(dir: &Path) -> ExperimentConfig {
        let mut c = ExperimentConfig {
            out_dir: dir.to_path_buf(),
            ..ExperimentConfig::default()
        };
        c.env.emission = crate::env::EmissionSpec::NoiseBits { k: 1 };
        c.dataset.budget = CollectBudget::Episodes(40);
        c.simulation.n_seeds = 4;
        c.simulation.horizon = 3000;
        c.simulation.strategies = vec![Strategy::PsrsObs, Strategy::Random, Strategy::Real, Strategy::PsrsOracle];
        c
    }

    #[test]
    fn empty_results_give_a_no_runs_report() {
        let dir = tempfile::tempdir().unwrap();
        let text = cmd_report(&cfg(dir.path())).unwrap();
        assert!(text.contains("no runs"), "{text}");
        let ev = cmd_evaluate(&cfg(dir.path())).unwrap();
        assert!(ev.strategies.is_empty());
        assert!(render_report(&ev).contains("no runs"));
    }

    #[test]
    fn report_requires_evaluation_once_runs_exist() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg(dir.path());
        cmd_collect(&c).unwrap();
        cmd_simulate(&c).unwrap();
        assert!(matches!(cmd_report(&c), Err(ExperimentError::MissingInput { .. })));
    }

    #[test]
    fn evaluation_rows_follow_report_order_and_real_is_reference() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg(dir.path());
        cmd_collect(&c).unwrap();
        cmd_simulate(&c).unwrap();
        let ev = cmd_evaluate(&c).unwrap();
        let order: Vec<_> = ev.strategies.iter().map(|s| s.strategy).collect();
        assert_eq!(order, [Strategy::Real, Strategy::PsrsOracle, Strategy::Random, Strategy::PsrsObs]);
        let real = ev.get(Strategy::Real).unwrap();
        assert!(real.efficiency.is_none());
        assert_eq!(real.rmse(), Some(0.0));
        assert_eq!(real.n_runs, 4);
        let random = ev.get(Strategy::Random).unwrap();
        assert!(random.fidelity.as_ref().unwrap().rmse >= 0.0);
        assert_eq!(random.efficiency.as_ref().unwrap().lengths.len(), 4);

        let text = cmd_report(&c).unwrap();
        let rows: Vec<&str> = text.lines().skip(2).map(|l| l.split_whitespace().next().unwrap()).collect();
        assert_eq!(rows, ["real", "psrs-oracle", "random", "psrs-obs"]);
        assert!(text.lines().nth(2).unwrap().contains("inf"));

        let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        let real_row = summary.lines().nth(1).unwrap();
        assert!(real_row.starts_with("real,4,0,inf,steps,0,0,0,"), "{real_row}");
    }

    #[test]
    fn curves_round_trip_through_csv() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg(dir.path());
        cmd_collect(&c).unwrap();
        cmd_simulate(&c).unwrap();
        let curves = load_curves(&dir.path().join("curves")).unwrap();
        assert_eq!(curves.len(), 16);
        for curve in &curves {
            let text = std::fs::read_to_string(dir.path().join("results").join(format!("{}.json", curve.run_id))).unwrap();
            let record: RunRecord = serde_json::from_str(&text).unwrap();
            assert_eq!(&record.result.curves[&curve.g_name], &curve.points);
        }
    }
}
