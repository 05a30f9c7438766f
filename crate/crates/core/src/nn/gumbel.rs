use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{argmax, softmax, softmax_backward};

/// Standard Gumbel draws `-ln(-ln u)`, `u ~ U(0, 1)`.
pub fn gumbel_noise<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            -(-u.ln()).ln()
        })
        .collect()
}

/// `softmax((logits + noise) / temperature)`.
pub fn gumbel_softmax(logits: &[f64], noise: &[f64], temperature: f64) -> Vec<f64> {
    let z: Vec<f64> = logits
        .iter()
        .zip(noise)
        .map(|(l, g)| (l + g) / temperature)
        .collect();
    softmax(&z)
}

/// Relaxed one-hot sample on the simplex.
pub fn gumbel_sample<R: Rng + ?Sized>(logits: &[f64], temperature: f64, rng: &mut R) -> Vec<f64> {
    assert!(temperature > 0.0, "temperature must be positive");
    let noise = gumbel_noise(logits.len(), rng);
    gumbel_softmax(logits, &noise, temperature)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BottleneckMode {
    /// Hard one-hot forward, relaxed gradient.
    StraightThrough,
    /// Soft forward and gradient.
    Relaxed,
    /// Noise-free one-hot of the largest logit; no gradient.
    Argmax,
}

/// Output of a bottleneck forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BottleneckOutput {
    pub output: Vec<f64>,
    /// Relaxed sample the gradient flows through.
    pub soft: Vec<f64>,
    pub index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GumbelSoftmaxLayer {
    pub temperature: f64,
    pub mode: BottleneckMode,
}

impl GumbelSoftmaxLayer {
    pub fn new(temperature: f64, mode: BottleneckMode) -> Self {
        assert!(temperature > 0.0, "temperature must be positive");
        Self { temperature, mode }
    }

    /// Forward pass with explicit Gumbel `noise` (ignored in argmax mode).
    pub fn forward(&self, logits: &[f64], noise: &[f64]) -> BottleneckOutput {
        match self.mode {
            BottleneckMode::Argmax => {
                let index = argmax(logits);
                let output = one_hot(logits.len(), index);
                BottleneckOutput {
                    soft: output.clone(),
                    output,
                    index,
                }
            }
            BottleneckMode::StraightThrough | BottleneckMode::Relaxed => {
                let soft = gumbel_softmax(logits, noise, self.temperature);
                let index = argmax(&soft);
                let output = if self.mode == BottleneckMode::Relaxed {
                    soft.clone()
                } else {
                    one_hot(logits.len(), index)
                };
                BottleneckOutput { output, soft, index }
            }
        }
    }

    /// Gradient with respect to the logits.
    pub fn backward(&self, out: &BottleneckOutput, grad_output: &[f64]) -> Vec<f64> {
        match self.mode {
            BottleneckMode::Argmax => vec![0.0; grad_output.len()],
            _ => softmax_backward(&out.soft, grad_output, self.temperature),
        }
    }
}

pub fn one_hot(dim: usize, index: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[index] = 1.0;
    v
}
