//! Parameter-expanded monotone-data sampler for binary and ordinal
//! outcomes: latent Gaussian outcomes thresholded by per-visit cutoffs,
//! with an expansion diagonal that converts correlation-matrix sampling
//! into ordinary covariance sampling.

mod sampler;
mod state;

pub use sampler::{
    apply_px_transform, cutoff_bounds, init_latent, mvp_gibbs_iteration, px_rescale_factors,
    run_mvp_chain, sample_cutoffs, sample_latent, CutoffStep, LatentInit, MvpChain, MvpDraw,
    MvpSampler,
};
pub use state::{CutoffNormalPrior, CutoffSet, MvpPrior, MvpState};
