//! Clipped-surrogate policy gradient with a separate value network.
//!
//! The learner collects `epoch_size` delivered steps, then runs full-batch
//! actor iterations (stopping early when the approximate KL grows past
//! `1.5 * target_kl`) followed by full-batch critic regression.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Experience, Learner, LearnerError, Policy};
use crate::env::{ActionProbs, Observation, NUM_ACTIONS};
use crate::features::Featurizer;
use crate::nn::{log_softmax, softmax, Activation, Adam, Mlp, MlpSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub hidden: Vec<usize>,
    pub gamma: f64,
    pub clip_ratio: f64,
    pub pi_lr: f64,
    pub vf_lr: f64,
    pub train_pi_iters: usize,
    pub train_v_iters: usize,
    pub target_kl: f64,
    pub entropy_coef: f64,
    pub normalize_advantages: bool,
    pub epoch_size: usize,
    pub featurizer: Featurizer,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32, 32],
            gamma: 0.99,
            clip_ratio: 0.2,
            pi_lr: 3e-4,
            vf_lr: 1e-3,
            train_pi_iters: 80,
            train_v_iters: 80,
            target_kl: 0.01,
            entropy_coef: 0.0,
            normalize_advantages: true,
            epoch_size: 5000,
            featurizer: Featurizer::Coordinates,
        }
    }
}

/// On-policy steps of the current epoch.
#[derive(Debug, Clone, Default)]
pub struct EpochBuffer {
    pub features: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub logp: Vec<f64>,
    pub values: Vec<f64>,
    pub returns: Vec<f64>,
    pub advantages: Vec<f64>,
    path_start: usize,
}

impl EpochBuffer {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn push(&mut self, features: Vec<f64>, action: usize, reward: f64, logp: f64, value: f64) {
        self.features.push(features);
        self.actions.push(action);
        self.rewards.push(reward);
        self.logp.push(logp);
        self.values.push(value);
    }

    /// Close the current path, bootstrapping its tail with `last_value`
    /// (zero for a terminal state).
    pub fn finish_path(&mut self, last_value: f64, gamma: f64) {
        let end = self.len();
        let mut rtg = vec![0.0; end - self.path_start];
        let mut acc = last_value;
        for i in (self.path_start..end).rev() {
            acc = self.rewards[i] + gamma * acc;
            rtg[i - self.path_start] = acc;
        }
        for (k, ret) in rtg.into_iter().enumerate() {
            self.advantages.push(ret - self.values[self.path_start + k]);
            self.returns.push(ret);
        }
        self.path_start = end;
    }

    pub fn clear(&mut self) {
        *self = Self::default();
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub pi_loss: f64,
    pub v_loss: f64,
    pub approx_kl: f64,
    pub entropy: f64,
    pub pi_iters: usize,
}

#[derive(Debug, Clone)]
pub struct PpoLearner {
    pub config: PpoConfig,
    pub actor: Mlp,
    pub critic: Mlp,
    pi_opt: Adam,
    v_opt: Adam,
    buffer: EpochBuffer,
    epochs: u64,
    episode_return: f64,
    epoch_episode_returns: Vec<f64>,
    last_train_return: Option<f64>,
    last_stats: Option<UpdateStats>,
}

impl PpoLearner {
    pub fn new(config: PpoConfig, seed: u64) -> Result<Self, LearnerError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = config.featurizer.dim();
        let widths = |out: usize| {
            let mut w = vec![input];
            w.extend(&config.hidden);
            w.push(out);
            w
        };
        let actor = Mlp::new_fan_in_uniform(MlpSpec::new(widths(NUM_ACTIONS), Activation::Relu)?, &mut rng);
        let critic = Mlp::new_fan_in_uniform(MlpSpec::new(widths(1), Activation::Relu)?, &mut rng);
        Ok(Self {
            pi_opt: Adam::new(actor.params.len()),
            v_opt: Adam::new(critic.params.len()),
            actor,
            critic,
            config,
            buffer: EpochBuffer::default(),
            epochs: 0,
            episode_return: 0.0,
            epoch_episode_returns: Vec::new(),
            last_train_return: None,
            last_stats: None,
        })
    }

    pub fn epochs_completed(&self) -> u64 {
        self.epochs
    }

    pub fn last_update(&self) -> Option<UpdateStats> {
        self.last_stats
    }

    fn logits(&self, features: &[f64]) -> Vec<f64> {
        self.actor
            .predict(features)
            .expect("featurizer dimension matches actor input")
    }

    fn value(&self, features: &[f64]) -> f64 {
        self.critic
            .predict(features)
            .expect("featurizer dimension matches critic input")[0]
    }

    /// Run one update on a finished buffer.
    pub fn epoch_update(&mut self, buffer: &EpochBuffer) -> Result<UpdateStats, LearnerError> {
        let n = buffer.len();
        if n == 0 || buffer.advantages.len() != n {
            return Ok(UpdateStats::default());
        }
        let mut adv = buffer.advantages.clone();
        if self.config.normalize_advantages {
            let mean = adv.iter().sum::<f64>() / n as f64;
            let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64;
            let std = var.sqrt();
            if std > 0.0 {
                adv.iter_mut().for_each(|a| *a = (*a - mean) / std);
            }
        }
        let batch = SurrogateBatch {
            features: &buffer.features,
            actions: &buffer.actions,
            logp_old: &buffer.logp,
            advantages: &adv,
            clip_ratio: self.config.clip_ratio,
            entropy_coef: self.config.entropy_coef,
        };

        let mut stats = UpdateStats::default();
        let mut grad = vec![0.0; self.actor.params.len()];
        for it in 0..self.config.train_pi_iters {
            let eval = batch.evaluate(&self.actor, Some(&mut grad))?;
            if it == 0 {
                stats.pi_loss = eval.loss;
                stats.entropy = eval.entropy;
            }
            stats.approx_kl = eval.approx_kl;
            if eval.approx_kl > 1.5 * self.config.target_kl {
                break;
            }
            self.pi_opt.step(&mut self.actor.params, &grad, self.config.pi_lr)?;
            stats.pi_iters = it + 1;
        }

        let mut grad = vec![0.0; self.critic.params.len()];
        for it in 0..self.config.train_v_iters {
            let loss = value_loss(&self.critic, &buffer.features, &buffer.returns, Some(&mut grad))?;
            if it == 0 {
                stats.v_loss = loss;
            }
            self.v_opt.step(&mut self.critic.params, &grad, self.config.vf_lr)?;
        }
        Ok(stats)
    }
}

impl Policy for PpoLearner {
    fn action_probs(&self, x: &Observation) -> ActionProbs {
        let p = softmax(&self.logits(&self.config.featurizer.features(x)));
        let mut out = [0.0; NUM_ACTIONS];
        out.copy_from_slice(&p);
        out
    }
}

impl Learner for PpoLearner {
    fn observe(&mut self, e: &Experience) -> Result<(), LearnerError> {
        let features = self.config.featurizer.features(&e.x);
        let logp = log_softmax(&self.logits(&features))[e.a.index()];
        let value = self.value(&features);
        self.buffer.push(features, e.a.index(), e.r, logp, value);
        self.episode_return += e.r;
        if e.done {
            self.buffer.finish_path(0.0, self.config.gamma);
            self.epoch_episode_returns.push(self.episode_return);
            self.episode_return = 0.0;
        }
        if self.buffer.len() >= self.config.epoch_size {
            if !e.done {
                let tail = self.value(&self.config.featurizer.features(&e.x_next));
                self.buffer.finish_path(tail, self.config.gamma);
            }
            let buffer = std::mem::take(&mut self.buffer);
            self.last_stats = Some(self.epoch_update(&buffer)?);
            self.epochs += 1;
            if !self.epoch_episode_returns.is_empty() {
                let r = &self.epoch_episode_returns;
                self.last_train_return = Some(r.iter().sum::<f64>() / r.len() as f64);
            }
            self.epoch_episode_returns.clear();
        }
        Ok(())
    }

    fn statistic(&self, name: &str) -> Option<f64> {
        match name {
            "train_return" => self.last_train_return,
            "epochs" => Some(self.epochs as f64),
            _ => None,
        }
    }
}

pub(crate) struct SurrogateBatch<'a> {
    pub features: &'a [Vec<f64>],
    pub actions: &'a [usize],
    pub logp_old: &'a [f64],
    pub advantages: &'a [f64],
    pub clip_ratio: f64,
    pub entropy_coef: f64,
}

pub(crate) struct SurrogateEval {
    pub loss: f64,
    pub approx_kl: f64,
    pub entropy: f64,
}

impl SurrogateBatch<'_> {
    /// Mean clipped-surrogate loss (minus the entropy bonus). When `grad` is
    /// given it is overwritten with the gradient w.r.t. the actor parameters.
    pub fn evaluate(&self, actor: &Mlp, mut grad: Option<&mut Vec<f64>>) -> Result<SurrogateEval, LearnerError> {
        let n = self.actions.len() as f64;
        if let Some(g) = grad.as_deref_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
        let (mut loss, mut kl, mut ent) = (0.0, 0.0, 0.0);
        let (lo, hi) = (1.0 - self.clip_ratio, 1.0 + self.clip_ratio);
        for i in 0..self.actions.len() {
            let (logits, cache) = actor.forward(&self.features[i])?;
            let logp = log_softmax(&logits);
            let p: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
            let a = self.actions[i];
            let adv = self.advantages[i];
            let ratio = (logp[a] - self.logp_old[i]).exp();
            let clipped = ratio.clamp(lo, hi);
            let entropy: f64 = -p.iter().zip(&logp).map(|(pj, lj)| pj * lj).sum::<f64>();
            loss -= (ratio * adv).min(clipped * adv) + self.entropy_coef * entropy;
            kl += self.logp_old[i] - logp[a];
            ent += entropy;

            if let Some(g) = grad.as_deref_mut() {
                let active = if adv >= 0.0 { ratio <= hi } else { ratio >= lo };
                let d_logp = if active { -ratio * adv / n } else { 0.0 };
                let mut d_logits: Vec<f64> = p.iter().map(|pj| -d_logp * pj).collect();
                d_logits[a] += d_logp;
                if self.entropy_coef != 0.0 {
                    for j in 0..p.len() {
                        d_logits[j] += self.entropy_coef * p[j] * (logp[j] + entropy) / n;
                    }
                }
                actor.backward(&cache, &d_logits, g)?;
            }
        }
        let loss = loss / n;
        if !loss.is_finite() {
            return Err(LearnerError::NonFiniteLoss(format!("policy loss {loss}")));
        }
        Ok(SurrogateEval {
            loss,
            approx_kl: kl / n,
            entropy: ent / n,
        })
    }
}

/// Mean squared error of the critic against `returns`; optionally writes
/// its gradient into `grad`.
pub(crate) fn value_loss(
    critic: &Mlp,
    features: &[Vec<f64>],
    returns: &[f64],
    mut grad: Option<&mut Vec<f64>>,
) -> Result<f64, LearnerError> {
    let n = returns.len() as f64;
    if let Some(g) = grad.as_deref_mut() {
        g.iter_mut().for_each(|v| *v = 0.0);
    }
    let mut loss = 0.0;
    for (f, ret) in features.iter().zip(returns) {
        let (out, cache) = critic.forward(f)?;
        let diff = out[0] - ret;
        loss += diff * diff;
        if let Some(g) = grad.as_deref_mut() {
            critic.backward(&cache, &[2.0 * diff / n], g)?;
        }
    }
    let loss = loss / n;
    if !loss.is_finite() {
        return Err(LearnerError::NonFiniteLoss(format!("value loss {loss}")));
    }
    Ok(loss)
}
