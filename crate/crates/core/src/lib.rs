//! Spatial public goods game on a periodic lattice with learning agents.
//!
//! The population plays overlapping five-player public goods games on an
//! `L x L` torus. Strategies are chosen by a shared PPO actor-critic trained
//! under a two-phase curriculum (a generous enhancement factor first, then the
//! target one), with tabular Q-learning and Fermi imitation as baselines and a
//! multi-trial statistics harness on top.

pub mod baselines;
pub mod curriculum;
pub mod error;
pub mod experiments;
pub mod game;
pub mod lattice;
pub mod nn;
pub mod ppo;
pub mod rng;
pub mod verify;

pub use error::{Error, Result};
pub use game::{InitScheme, PayoffField, Strategy, StrategyField};
pub use lattice::Lattice;
