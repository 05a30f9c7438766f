//! Discrete latent-state encoder learned by contrastive classification.
//!
//! A network `phi` maps an observation to `d` logits. Real transitions
//! `(x, a, x')` are contrasted with imposters whose `x'` comes from an
//! independent draw; both `phi(x)` and `phi(x')` pass through a Gumbel-softmax
//! bottleneck before a classifier predicts whether the triple is real.
//! At inference the latent is the argmax of `phi(x)`.

use std::collections::BTreeSet;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{LoggedDataset, LoggedTransition};
use crate::env::{oracle_decode, Action, EmissionSpec, Observation, NUM_ACTIONS, NUM_STATES};
use crate::features::Featurizer;
use crate::nn::gumbel::one_hot;
use crate::nn::{
    argmax, bce_with_logit, check_gradient, gumbel_noise, sigmoid, Activation, Adam,
    BottleneckMode, GradCheckReport, GumbelSoftmaxLayer, Mlp, MlpSpec, NnError,
};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("contrastive batch is empty or unbalanced ({0} vs {1})")]
    BadBatch(usize, usize),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("dataset lacks oracle latent labels")]
    MissingLabels,
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderHyperparams {
    pub latent_dim: usize,
    pub hidden: usize,
    pub classifier_hidden: usize,
    pub step_size: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub temperature: f64,
    /// Cap on validation transitions used for model selection.
    pub max_validation: usize,
    pub featurizer: Featurizer,
    pub seed: u64,
}

impl Default for EncoderHyperparams {
    fn default() -> Self {
        Self {
            latent_dim: 50,
            hidden: 64,
            classifier_hidden: 64,
            step_size: 1e-3,
            batch_size: 256,
            epochs: 20,
            temperature: 1.0,
            max_validation: 50_000,
            featurizer: Featurizer::Coordinates,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveExample {
    pub x: Observation,
    pub a: Action,
    pub x_next: Observation,
    pub label: bool,
}

/// `B` real examples from `batch_a` followed by `B` imposters that keep
/// `(x, a)` from `batch_a` and take `x'` from `batch_b`.
pub fn make_contrastive_batch(
    batch_a: &[&LoggedTransition],
    batch_b: &[&LoggedTransition],
) -> Result<Vec<ContrastiveExample>, EncoderError> {
    if batch_a.is_empty() || batch_a.len() != batch_b.len() {
        return Err(EncoderError::BadBatch(batch_a.len(), batch_b.len()));
    }
    let real = batch_a.iter().map(|t| ContrastiveExample {
        x: t.x,
        a: t.a,
        x_next: t.x_next,
        label: true,
    });
    let fake = batch_a.iter().zip(batch_b).map(|(t, u)| ContrastiveExample {
        x: t.x,
        a: t.a,
        x_next: u.x_next,
        label: false,
    });
    Ok(real.chain(fake).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderModel {
    pub phi: Mlp,
    pub classifier: Mlp,
    pub hyper: EncoderHyperparams,
}

/// Gradient accumulators for one model, plus the weight applied to each
/// example's contribution.
struct GradSink<'a> {
    phi: &'a mut [f64],
    classifier: &'a mut [f64],
    scale: f64,
}

impl EncoderModel {
    pub fn new(hyper: EncoderHyperparams, seed: u64) -> Result<Self, EncoderError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = hyper.latent_dim;
        let phi_spec = MlpSpec::new(
            vec![hyper.featurizer.dim(), hyper.hidden, d],
            Activation::LeakyRelu,
        )?;
        let cls_spec = MlpSpec::new(
            vec![2 * d + NUM_ACTIONS, hyper.classifier_hidden, 1],
            Activation::LeakyRelu,
        )?;
        let phi = Mlp::new(phi_spec, &mut rng);
        let mut classifier = Mlp::new(cls_spec, &mut rng);
        // An untrained classifier outputs logit 0, i.e. chance-level loss ln 2.
        classifier.zero_output_layer();
        Ok(Self {
            phi,
            classifier,
            hyper,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.hyper.latent_dim
    }

    pub fn logits(&self, x: &Observation) -> Vec<f64> {
        self.phi
            .predict(&self.hyper.featurizer.features(x))
            .expect("featurizer matches encoder input")
    }

    /// Latent index of `x`: argmax of the encoder logits.
    pub fn encode(&self, x: &Observation) -> usize {
        argmax(&self.logits(x))
    }

    /// Classifier probability that `(x, a, x')` is a real transition, using
    /// hard argmax bottlenecks.
    pub fn real_probability(&self, x: &Observation, a: Action, x_next: &Observation) -> f64 {
        let d = self.latent_dim();
        let mut input = one_hot(d, self.encode(x));
        input.extend(one_hot(NUM_ACTIONS, a.index()));
        input.extend(one_hot(d, self.encode(x_next)));
        sigmoid(self.classifier.predict(&input).expect("classifier input")[0])
    }

    /// Loss of one example for the given bottleneck layer and Gumbel noise
    /// (one vector per bottleneck). With a sink, `scale * d loss / d params`
    /// is added to its accumulators.
    fn example_loss(
        &self,
        ex: &ContrastiveExample,
        layer: &GumbelSoftmaxLayer,
        noise: (&[f64], &[f64]),
        sink: Option<&mut GradSink<'_>>,
    ) -> Result<f64, EncoderError> {
        let d = self.latent_dim();
        let f = &self.hyper.featurizer;
        let (lx, cx) = self.phi.forward(&f.features(&ex.x))?;
        let (ln, cn) = self.phi.forward(&f.features(&ex.x_next))?;
        let bx = layer.forward(&lx, noise.0);
        let bn = layer.forward(&ln, noise.1);
        let mut input = bx.output.clone();
        input.extend(one_hot(NUM_ACTIONS, ex.a.index()));
        input.extend(&bn.output);
        let (out, cc) = self.classifier.forward(&input)?;
        let y = if ex.label { 1.0 } else { 0.0 };
        let loss = bce_with_logit(out[0], y);
        if let Some(sink) = sink {
            let d_input =
                self.classifier
                    .backward(&cc, &[sink.scale * (sigmoid(out[0]) - y)], sink.classifier)?;
            let d_hx = layer.backward(&bx, &d_input[..d]);
            let d_hn = layer.backward(&bn, &d_input[d + NUM_ACTIONS..]);
            self.phi.backward(&cx, &d_hx, sink.phi)?;
            self.phi.backward(&cn, &d_hn, sink.phi)?;
        }
        Ok(loss)
    }

    /// Mean loss over `examples` with noise-free argmax bottlenecks.
    pub fn evaluation_loss(&self, examples: &[ContrastiveExample]) -> Result<f64, EncoderError> {
        let layer = GumbelSoftmaxLayer::new(1.0, BottleneckMode::Argmax);
        let mut total = 0.0;
        for ex in examples {
            total += self.example_loss(ex, &layer, (&[], &[]), None)?;
        }
        Ok(total / examples.len().max(1) as f64)
    }

    /// Compares the back-propagated gradient of the summed relaxed-bottleneck
    /// loss over `examples` with central differences of step `h`, holding the
    /// Gumbel noise fixed (drawn from `noise_seed`).
    pub fn gradient_check(
        &self,
        examples: &[ContrastiveExample],
        noise_seed: u64,
        h: f64,
    ) -> Result<GradCheckReport, EncoderError> {
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let d = self.latent_dim();
        let noise: Vec<(Vec<f64>, Vec<f64>)> = examples
            .iter()
            .map(|_| (gumbel_noise(d, &mut rng), gumbel_noise(d, &mut rng)))
            .collect();
        let layer = GumbelSoftmaxLayer::new(self.hyper.temperature, BottleneckMode::Relaxed);
        let n_phi = self.phi.params.len();
        let loss_and_grad = |m: &EncoderModel, want: bool| -> Result<(f64, Vec<f64>), EncoderError> {
            let mut loss = 0.0;
            let mut grad = vec![0.0; n_phi + m.classifier.params.len()];
            let (gp, gc) = grad.split_at_mut(n_phi);
            let mut sink = GradSink {
                phi: gp,
                classifier: gc,
                scale: 1.0,
            };
            for (ex, (nx, nn)) in examples.iter().zip(&noise) {
                let s = if want { Some(&mut sink) } else { None };
                loss += m.example_loss(ex, &layer, (nx, nn), s)?;
            }
            Ok((loss, grad))
        };
        let (_, analytic) = loss_and_grad(self, true)?;
        let mut params = self.phi.params.clone();
        params.extend(&self.classifier.params);
        let report = check_gradient(
            |p| {
                let mut probe = self.clone();
                probe.phi.params.copy_from_slice(&p[..n_phi]);
                probe.classifier.params.copy_from_slice(&p[n_phi..]);
                loss_and_grad(&probe, false).map(|(l, _)| l).unwrap_or(f64::NAN)
            },
            &params,
            &analytic,
            h,
        );
        Ok(report)
    }
}

/// An observation-to-latent map used to key replay queues.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LatentEncoder {
    /// The true latent state, read off the emission.
    Oracle { emission: EmissionSpec },
    Learned(Box<EncoderModel>),
    /// Everything maps to latent 0.
    Constant,
}

impl LatentEncoder {
    pub fn encode(&self, x: &Observation) -> usize {
        match self {
            LatentEncoder::Oracle { emission } => oracle_decode(x, emission)
                .map(|(s, _)| s.index())
                .unwrap_or(usize::MAX),
            LatentEncoder::Learned(m) => m.encode(x),
            LatentEncoder::Constant => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub hyper: EncoderHyperparams,
    pub init_seed: u64,
    /// Mean training loss per epoch.
    pub train_loss: Vec<f64>,
    /// Validation loss before training (index 0) and after each epoch.
    pub validation_loss: Vec<f64>,
    pub best_epoch: usize,
    pub best_validation_loss: f64,
    /// Distinct latents the selected model assigns to validation observations.
    pub used_latents: usize,
}

fn validation_examples(
    validation: &LoggedDataset,
    cap: usize,
    seed: u64,
) -> Result<Vec<ContrastiveExample>, EncoderError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_7a11d);
    let mut a: Vec<usize> = (0..validation.len()).collect();
    a.shuffle(&mut rng);
    a.truncate(cap);
    let mut b = a.clone();
    b.shuffle(&mut rng);
    let ta: Vec<_> = a.iter().map(|&i| &validation.transitions[i]).collect();
    let tb: Vec<_> = b.iter().map(|&i| &validation.transitions[i]).collect();
    make_contrastive_batch(&ta, &tb)
}

/// Number of distinct latents `model` assigns to the observations of `data`.
pub fn used_latents(model: &EncoderModel, data: &LoggedDataset) -> usize {
    data.transitions
        .iter()
        .flat_map(|t| [t.x, t.x_next])
        .map(|x| model.encode(&x))
        .collect::<BTreeSet<_>>()
        .len()
}

/// Train with straight-through bottlenecks and return the checkpoint with
/// the lowest validation loss (possibly the untrained one).
pub fn train_encoder(
    train: &LoggedDataset,
    validation: &LoggedDataset,
    hyper: &EncoderHyperparams,
    init_seed: u64,
) -> Result<(EncoderModel, TrainingReport), EncoderError> {
    if train.is_empty() || validation.is_empty() {
        return Err(EncoderError::BadBatch(train.len(), validation.len()));
    }
    let mut model = EncoderModel::new(hyper.clone(), init_seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ init_seed.rotate_left(17));
    let val = validation_examples(validation, hyper.max_validation, hyper.seed)?;
    let layer = GumbelSoftmaxLayer::new(hyper.temperature, BottleneckMode::StraightThrough);
    let mut opt_phi = Adam::new(model.phi.params.len());
    let mut opt_cls = Adam::new(model.classifier.params.len());

    let initial = model.evaluation_loss(&val)?;
    let mut report = TrainingReport {
        hyper: hyper.clone(),
        init_seed,
        train_loss: Vec::new(),
        validation_loss: vec![initial],
        best_epoch: 0,
        best_validation_loss: initial,
        used_latents: 0,
    };
    let mut best = model.clone();
    let b = hyper.batch_size.clamp(1, train.len());
    let d = hyper.latent_dim;

    for epoch in 1..=hyper.epochs {
        let mut perm_a: Vec<usize> = (0..train.len()).collect();
        let mut perm_b = perm_a.clone();
        perm_a.shuffle(&mut rng);
        perm_b.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for (ca, cb) in perm_a.chunks(b).zip(perm_b.chunks(b)) {
            let ta: Vec<_> = ca.iter().map(|&i| &train.transitions[i]).collect();
            let tb: Vec<_> = cb.iter().map(|&i| &train.transitions[i]).collect();
            let batch = make_contrastive_batch(&ta, &tb)?;
            let n = batch.len() as f64;
            let mut g_phi = vec![0.0; model.phi.params.len()];
            let mut g_cls = vec![0.0; model.classifier.params.len()];
            let mut batch_loss = 0.0;
            let mut sink = GradSink {
                phi: &mut g_phi,
                classifier: &mut g_cls,
                scale: 1.0 / n,
            };
            for ex in &batch {
                let nx = gumbel_noise(d, &mut rng);
                let nn = gumbel_noise(d, &mut rng);
                batch_loss += model.example_loss(ex, &layer, (&nx, &nn), Some(&mut sink))?;
            }
            if !batch_loss.is_finite() {
                return Err(EncoderError::Diverged(format!(
                    "epoch {epoch}: batch loss {batch_loss}"
                )));
            }
            opt_phi.step(&mut model.phi.params, &g_phi, hyper.step_size)?;
            opt_cls.step(&mut model.classifier.params, &g_cls, hyper.step_size)?;
            epoch_loss += batch_loss;
            seen += batch.len();
        }
        let v = model.evaluation_loss(&val)?;
        if !v.is_finite() {
            return Err(EncoderError::Diverged(format!("epoch {epoch}: validation loss {v}")));
        }
        report.train_loss.push(epoch_loss / seen as f64);
        report.validation_loss.push(v);
        info!("encoder epoch {epoch}: train {:.4} val {v:.4}", epoch_loss / seen as f64);
        if v < report.best_validation_loss {
            report.best_validation_loss = v;
            report.best_epoch = epoch;
            best = model.clone();
        }
    }
    report.used_latents = used_latents(&best, validation);
    Ok((best, report))
}

/// Grid of candidate settings for model selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchGrid {
    pub latent_dims: Vec<usize>,
    pub hidden: Vec<usize>,
    pub step_sizes: Vec<f64>,
    pub init_seeds: Vec<u64>,
}

impl Default for SearchGrid {
    fn default() -> Self {
        Self {
            latent_dims: vec![25, 50],
            hidden: vec![32, 64],
            step_sizes: vec![1e-3, 1e-4],
            init_seeds: vec![0, 1, 2],
        }
    }
}

/// Train every grid point and keep the lowest best-validation loss.
/// Returns the winner and all reports in grid order.
pub fn search_hyperparameters(
    train: &LoggedDataset,
    validation: &LoggedDataset,
    base: &EncoderHyperparams,
    grid: &SearchGrid,
) -> Result<(EncoderModel, Vec<TrainingReport>), EncoderError> {
    let mut best: Option<(EncoderModel, f64)> = None;
    let mut reports = Vec::new();
    for &d in &grid.latent_dims {
        for &h in &grid.hidden {
            for &lr in &grid.step_sizes {
                for &s in &grid.init_seeds {
                    let hyper = EncoderHyperparams {
                        latent_dim: d,
                        hidden: h,
                        step_size: lr,
                        ..base.clone()
                    };
                    let (m, r) = train_encoder(train, validation, &hyper, s)?;
                    if best.as_ref().is_none_or(|(_, l)| r.best_validation_loss < *l) {
                        best = Some((m, r.best_validation_loss));
                    }
                    reports.push(r);
                }
            }
        }
    }
    let (model, _) = best.ok_or(EncoderError::BadBatch(0, 0))?;
    Ok((model, reports))
}

/// Learned-latent by true-latent contingency table and summary scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbstractionReport {
    /// `confusion[z][s]` counts samples encoded as `z` whose true state is `s`.
    pub confusion: Vec<Vec<u64>>,
    /// Sample-weighted fraction of the majority true state within each latent.
    pub purity: f64,
    pub used_latents: usize,
    /// Fraction of observed true states that are the majority state of some latent.
    pub coverage: f64,
    pub samples: u64,
}

/// Compare an encoder against true labels. Latent indices at or above
/// `latent_dim` (for example undecodable observations) are ignored.
pub fn abstraction_report<I>(encoder: &LatentEncoder, latent_dim: usize, samples: I) -> AbstractionReport
where
    I: IntoIterator<Item = (Observation, usize)>,
{
    let mut confusion = vec![vec![0u64; NUM_STATES]; latent_dim];
    let mut total = 0u64;
    for (x, s) in samples {
        let z = encoder.encode(&x);
        if z < latent_dim && s < NUM_STATES {
            confusion[z][s] += 1;
            total += 1;
        }
    }
    let majority: u64 = confusion.iter().map(|row| *row.iter().max().unwrap()).sum();
    let used = confusion.iter().filter(|row| row.iter().any(|c| *c > 0)).count();
    let observed: BTreeSet<usize> = (0..NUM_STATES)
        .filter(|&s| confusion.iter().any(|row| row[s] > 0))
        .collect();
    let covered: BTreeSet<usize> = confusion
        .iter()
        .filter(|row| row.iter().any(|c| *c > 0))
        .map(|row| argmax(&row.iter().map(|c| *c as f64).collect::<Vec<_>>()))
        .collect();
    AbstractionReport {
        purity: if total == 0 { 0.0 } else { majority as f64 / total as f64 },
        used_latents: used,
        coverage: if observed.is_empty() {
            0.0
        } else {
            covered.len() as f64 / observed.len() as f64
        },
        samples: total,
        confusion,
    }
}

/// Labeled observations (`x` of each transition with its recorded latent).
pub fn labeled_observations(
    data: &LoggedDataset,
) -> Result<Vec<(Observation, usize)>, EncoderError> {
    data.transitions
        .iter()
        .map(|t| {
            t.oracle_latent
                .map(|s| (t.x, s as usize))
                .ok_or(EncoderError::MissingLabels)
        })
        .collect()
}
