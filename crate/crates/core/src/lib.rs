//! Bayesian multiple-imputation engine for longitudinal clinical-trial
//! outcomes (continuous, binary, ordinal).
//!
//! The sampling core is a monotone data augmentation (MDA) scheme: the
//! repeated-measures normal model is factorized into sequential conditional
//! regressions whose conjugate normal-gamma posteriors are independent given
//! monotone data, so only intermittent missing values need to be imputed
//! inside the chain. Binary and ordinal outcomes are handled through a
//! parameter-expanded multivariate probit sampler on latent Gaussian
//! outcomes, and independence Metropolis-Hastings updates extend the Gibbs
//! scheme to non-conjugate priors. Dropout cells are imputed after
//! convergence under MAR, jump-to-reference, or copy-reference rules, and
//! per-imputation analyses are pooled with Rubin's rules.

pub mod data;
pub mod diag;
pub mod dist;
pub mod error;
pub mod imh;
pub mod impute;
pub mod mmrm;
pub mod mvp;
pub mod rng;
pub mod sim;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
