use std::path::PathBuf;

use super::config::*;
use super::ExperimentError;
use crate::data::CollectBudget;
use crate::encoder::EncoderHyperparams;
use crate::env::EmissionSpec;
use crate::learners::PpoConfig;

pub const PRESET_NAMES: [&str; 7] = [
    "discrete-noise",
    "setting1",
    "setting2",
    "counter",
    "counter-desk",
    "continuous",
    "continuous-desk",
];

fn q_learning() -> LearnerSpec {
    LearnerSpec::QLearning {
        alpha: 0.5,
        gamma: 0.95,
        epsilon: 0.9,
    }
}

fn base(name: &str) -> ExperimentConfig {
    ExperimentConfig {
        name: name.into(),
        out_dir: PathBuf::from("runs").join(name),
        ..ExperimentConfig::default()
    }
}

fn mc_eval(name: &str, target: PolicySpec, horizon: u64) -> ExperimentConfig {
    let mut c = base(name);
    c.learner = LearnerSpec::McEval { target, gamma: 0.99 };
    c.simulation.horizon = horizon;
    c.simulation.sample_every = 1000;
    c.evaluation.stats = vec!["mc_value".into(), "mc_episodes".into()];
    c
}

fn counter(name: &str, n_seeds: u32) -> ExperimentConfig {
    let mut c = base(name);
    c.env.emission = EmissionSpec::Counter { modulus: 32 };
    c.learner = q_learning();
    c.simulation.strategies = vec![
        Strategy::Real,
        Strategy::ModelObs,
        Strategy::ModelLatent,
        Strategy::PsrsObs,
        Strategy::PsrsOracle,
        Strategy::ExoPsrs,
    ];
    c.simulation.n_seeds = n_seeds;
    c
}

fn continuous(name: &str, transitions: u64, epoch_size: usize, epochs: u64) -> ExperimentConfig {
    let mut c = base(name);
    c.env.emission = EmissionSpec::Continuous2D { noise_width: 0.2 };
    c.dataset.budget = CollectBudget::Transitions(transitions);
    c.encoder.source = EncoderSource::Learned;
    c.encoder.hyper = EncoderHyperparams::default();
    c.learner = LearnerSpec::Ppo(PpoConfig {
        epoch_size,
        ..PpoConfig::default()
    });
    c.simulation.strategies = vec![
        Strategy::Real,
        Strategy::PsrsOracle,
        Strategy::PsrsEncoder,
        Strategy::ObsOnly,
        Strategy::ActOnly,
        Strategy::Random,
    ];
    c.simulation.horizon = epochs;
    c.simulation.n_seeds = 10;
    c.evaluation.stats = vec!["validation_return".into(), "train_return".into()];
    c
}

/// A named built-in configuration.
pub fn preset(name: &str) -> Result<ExperimentConfig, ExperimentError> {
    let cfg = match name {
        // Q-learning on noise-bit observations, keyed by observation or cell.
        "discrete-noise" => base(name),
        // MC evaluation of the logging policy; every candidate is accepted.
        "setting1" => mc_eval(name, PolicySpec::Uniform, 150_000),
        "setting2" => mc_eval(
            name,
            PolicySpec::EpsSoft {
                epsilon: 0.2,
                gamma: 0.99,
            },
            20_000,
        ),
        "counter" => counter(name, 100),
        "counter-desk" => counter(name, 10),
        "continuous" => continuous(name, 1_000_000, 5000, 50),
        "continuous-desk" => {
            let mut c = continuous(name, 200_000, 1000, 20);
            c.encoder.hyper.epochs = 60;
            c
        }
        other => {
            return Err(ExperimentError::Config(format!(
                "unknown preset {other:?}; available: {}",
                PRESET_NAMES.join(", ")
            )))
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_is_valid_and_round_trips() {
        for name in PRESET_NAMES {
            let cfg = preset(name).unwrap();
            assert_eq!(cfg.name, name);
            let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
            assert_eq!(back, cfg, "{name}");
        }
        assert!(preset("nope").is_err());
    }

    #[test]
    fn presets_carry_the_experiment_settings() {
        let c = preset("counter").unwrap();
        assert_eq!(c.env.emission, EmissionSpec::Counter { modulus: 32 });
        assert_eq!(c.dataset.budget, CollectBudget::Episodes(1000));
        let c = preset("continuous").unwrap();
        assert_eq!(c.dataset.budget, CollectBudget::Transitions(1_000_000));
        assert_eq!(c.max_steps(), 50 * 5000);
        assert_eq!(c.simulation.strategies[0], Strategy::Real);
    }
}
