//! Offline learner simulation for block MDPs.
//!
//! A logged dataset of grid-world transitions is replayed to a learning
//! agent so that the agent's experience is distributed as if it were
//! interacting with the real environment. The crate provides the
//! environment, the data layer, tabular and policy-gradient learners, a
//! small neural-network toolkit, a contrastive latent encoder, the replay
//! simulators and the fidelity/efficiency metrics used to compare them.

pub mod data;
pub mod encoder;
pub mod env;
pub mod eval;
pub mod experiment;
pub mod features;
pub mod learners;
pub mod nn;
pub mod sim;
