//! Collision-inducing adversarial attacks on pedestrian trajectory
//! predictors.
//!
//! The crate bundles the shared data model and metrics ([`model`]), a
//! reverse-mode autodiff tape ([`autodiff`]), a small predictor zoo
//! ([`predictors`]), the attention-guided attack engine ([`attack`]),
//! dataset ingestion and synthetic scene generation ([`data_io`]), and the
//! experiment harnesses ([`experiments`]).

pub mod attack;
pub mod autodiff;
pub mod data_io;
pub mod error;
pub mod experiments;
pub mod model;
pub mod predictors;

pub use error::{Error, Result};
