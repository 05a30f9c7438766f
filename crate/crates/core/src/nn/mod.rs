//! A small reverse-mode core for the networks used here: multilayer
//! perceptrons, softmax and Gumbel-softmax bottlenecks, Adam, and a
//! finite-difference gradient checker.

pub mod adam;
pub mod gradcheck;
pub mod gumbel;
pub mod mlp;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adam::Adam;
pub use gradcheck::{check_gradient, GradCheckReport};
pub use gumbel::{gumbel_noise, gumbel_sample, BottleneckMode, GumbelSoftmaxLayer};
pub use mlp::{Activation, ForwardCache, Mlp, MlpSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid network spec: {0}")]
    BadSpec(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&l| l - lse).collect()
}

/// Vector-Jacobian product of `y = softmax(z / temperature)`.
pub fn softmax_backward(y: &[f64], grad_y: &[f64], temperature: f64) -> Vec<f64> {
    let dot: f64 = y.iter().zip(grad_y).map(|(a, b)| a * b).sum();
    y.iter()
        .zip(grad_y)
        .map(|(yi, gi)| yi * (gi - dot) / temperature)
        .collect()
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// `log(1 + exp(z))` without overflow.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of a logit against a 0/1 label.
pub fn bce_with_logit(logit: f64, label: f64) -> f64 {
    label * softplus(-logit) + (1.0 - label) * softplus(logit)
}

/// Version tag of the checkpoint format.
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint<M> {
    pub version: u32,
    pub model: M,
}

pub fn save_checkpoint<M: Serialize>(model: &M, path: &Path) -> Result<(), NnError> {
    let ckpt = Checkpoint {
        version: CHECKPOINT_VERSION,
        model,
    };
    let text = serde_json::to_string(&ckpt).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    }
    std::fs::write(path, text).map_err(|e| NnError::Checkpoint(e.to_string()))
}

pub fn load_checkpoint<M: for<'de> Deserialize<'de>>(path: &Path) -> Result<M, NnError> {
    let text = std::fs::read_to_string(path).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    let version = value.get("version").and_then(serde_json::Value::as_u64);
    if version != Some(CHECKPOINT_VERSION as u64) {
        return Err(NnError::Checkpoint(format!(
            "unsupported checkpoint version {version:?}"
        )));
    }
    let ckpt: Checkpoint<M> =
        serde_json::from_value(value).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    Ok(ckpt.model)
}
