//! The monotone data augmentation sampler for the repeated-measures normal
//! model: conjugate prior decomposition, per-visit normal-gamma posteriors,
//! intermittent imputation, and a full-data-augmentation sampler kept as
//! both a feature and a cross-check.

mod chain;
mod fda;
mod prior;
mod seqreg;

pub use chain::{
    impute_intermittent, locf_fill, run_mda_chain, ChainConfig, MmrmChain, MmrmDraw,
    ParamSnapshot,
};
pub(crate) use chain::{conditional_normal, conditional_normal_draw, snapshot_indices};
pub use fda::{fda_posterior_sample, run_fda_chain};
pub use prior::{decompose_prior, symmetric_rank_of, MniwPrior, PriorDecomposition};
pub use seqreg::{
    mda_posterior, sample_seq_reg, visit_gram_matrices, NgPosteriorSet, SampleMode, SeqRegState,
};
