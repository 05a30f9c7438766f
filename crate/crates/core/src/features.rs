//! Turning observations into network inputs.

use serde::{Deserialize, Serialize};

use crate::env::Observation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Featurizer {
    /// The two coordinates of a `Vec2` observation.
    Coordinates,
    /// One-hot over `size` discrete ids; out-of-range ids give all zeros.
    OneHot { size: usize },
}

impl Featurizer {
    pub fn dim(&self) -> usize {
        match *self {
            Featurizer::Coordinates => 2,
            Featurizer::OneHot { size } => size,
        }
    }

    pub fn features(&self, x: &Observation) -> Vec<f64> {
        match (*self, *x) {
            (Featurizer::Coordinates, Observation::Vec2(v)) => v.to_vec(),
            (Featurizer::Coordinates, Observation::DiscreteId(id)) => vec![id as f64, 0.0],
            (Featurizer::OneHot { size }, Observation::DiscreteId(id)) => {
                let mut v = vec![0.0; size];
                if (id as usize) < size {
                    v[id as usize] = 1.0;
                }
                v
            }
            (Featurizer::OneHot { size }, Observation::Vec2(_)) => vec![0.0; size],
        }
    }
}
