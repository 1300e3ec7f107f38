//! Variational Bayes for Poisson and logistic generalized linear mixed models.

pub mod cli;
pub mod data_model;
pub mod diagnostics;
pub mod error;
pub mod linalg;
pub mod ncvmp;
pub mod quadrature;
pub mod stochastic;

pub use error::{GlmmError, Result};
