//! Counterfactual dialogue-policy learning on embedding-vector dialogues.
//!
//! The pipeline estimates a user's latent trait vector from dialogue turns
//! ([`dppr`]), learns the state-transition mechanism with a bidirectional
//! conditional GAN ([`bicogan`]), rewrites every dialogue under alternative
//! persuader actions ([`counterfactual`]), scores dialogues with a terminal
//! reward model ([`reward`]) and learns a dueling double DQN over the
//! rewritten dialogues ([`d3qn`]). [`synthworld`] supplies a ground-truth
//! world with exact counterfactual oracles.

pub mod dataset;
pub mod dppr;
pub mod metrics;
pub mod bicogan;
pub mod counterfactual;
pub mod d3qn;
pub mod error;
pub mod nn;
pub mod report;
pub mod reward;
pub mod rng;
pub mod synthworld;

pub use error::{Error, Result};
