//! State of the parameter-expanded multivariate probit sampler.
//!
//! Categorical outcomes are thresholded latent Gaussian outcomes. The
//! identified model restricts the latent covariance to a correlation matrix;
//! the sampler works on an expanded scale where visit `j` carries a free
//! variance `d_j`, and maps back by dividing out `sqrt(d_j)`.

use nalgebra::{DMatrix, DVector};

use crate::error::Error;
use crate::mmrm::SeqRegState;
use crate::Result;

/// Per-visit cutoffs on the expanded scale.
///
/// Stored as a `p x (K-1)` matrix whose first column is pinned at zero;
/// the implicit outer cutoffs are -inf and +inf. Category `k` (1-based)
/// corresponds to the latent interval `(c_{j,k-1}, c_{j,k}]`.
#[derive(Debug, Clone)]
pub struct CutoffSet {
    c: DMatrix<f64>,
    categories: usize,
}

impl CutoffSet {
    pub fn new(c: DMatrix<f64>, categories: usize) -> Result<Self> {
        if categories < 2 || c.ncols() != categories - 1 {
            return Err(Error::invalid("cutoff matrix must have K - 1 columns"));
        }
        let set = CutoffSet { c, categories };
        set.check_ordering()?;
        Ok(set)
    }

    /// Binary outcomes carry only the fixed zero cutoff.
    pub fn binary(p: usize) -> Self {
        CutoffSet {
            c: DMatrix::zeros(p, 1),
            categories: 2,
        }
    }

    fn check_ordering(&self) -> Result<()> {
        for j in 0..self.c.nrows() {
            if self.c[(j, 0)] != 0.0 {
                return Err(Error::invalid(format!(
                    "first cutoff must be fixed at zero (visit {})",
                    j + 1
                )));
            }
            for k in 1..self.c.ncols() {
                if !(self.c[(j, k)] > self.c[(j, k - 1)]) {
                    return Err(Error::invalid(format!(
                        "cutoffs must increase strictly (visit {}, index {})",
                        j + 1,
                        k + 1
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn n_visits(&self) -> usize {
        self.c.nrows()
    }

    pub fn categories(&self) -> usize {
        self.categories
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.c
    }

    /// Cutoff `c_{j,k}` for `k = 0..K` with the infinite ends included.
    pub fn value(&self, j: usize, k: usize) -> f64 {
        if k == 0 {
            f64::NEG_INFINITY
        } else if k >= self.categories {
            f64::INFINITY
        } else {
            self.c[(j, k - 1)]
        }
    }

    /// Open latent interval for category `k` (1-based) at visit `j`.
    pub fn interval(&self, j: usize, k: usize) -> (f64, f64) {
        (self.value(j, k - 1), self.value(j, k))
    }

    /// Category whose interval contains the latent value.
    pub fn categorize(&self, j: usize, y: f64) -> usize {
        let mut k = 1;
        while k < self.categories && y > self.value(j, k) {
            k += 1;
        }
        k
    }

    /// Set the sampled cutoffs `c_{j,2}..c_{j,K-1}` for one visit.
    pub(crate) fn set_free(&mut self, j: usize, values: &[f64]) {
        for (t, v) in values.iter().enumerate() {
            self.c[(j, t + 1)] = *v;
        }
    }

    /// Multiply one visit's cutoffs by a positive factor.
    pub(crate) fn scale_visit(&mut self, j: usize, factor: f64) {
        for k in 1..self.c.ncols() {
            self.c[(j, k)] *= factor;
        }
    }

    /// Restricted-scale cutoffs `c / sqrt(d_j)` rowwise.
    pub fn restricted(&self, diag: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(self.c.nrows(), self.c.ncols(), |j, k| {
            self.c[(j, k)] / diag[j].sqrt()
        })
    }
}

/// Full sampler state: expanded-scale regression parameters, cutoffs, the
/// latent monotone outcome matrix, and the expansion diagonal.
#[derive(Debug, Clone)]
pub struct MvpState {
    pub seq: SeqRegState,
    pub cutoffs: CutoffSet,
    /// `n x p`; cells beyond a subject's pattern are NaN and never read.
    pub latent: DMatrix<f64>,
    /// Diagonal of the expanded covariance, kept in lockstep with `seq`.
    pub diag: DVector<f64>,
}

impl MvpState {
    /// Restricted-scale coefficients: row `j` of the marginal coefficient
    /// matrix divided by `sqrt(d_j)`.
    pub fn alpha_restricted(&self) -> DMatrix<f64> {
        let alpha = self.seq.alpha();
        DMatrix::from_fn(alpha.nrows(), alpha.ncols(), |j, c| {
            alpha[(j, c)] / self.diag[j].sqrt()
        })
    }

    /// Identified correlation matrix.
    pub fn correlation(&self) -> DMatrix<f64> {
        let sigma = self.seq.sigma();
        let p = sigma.nrows();
        DMatrix::from_fn(p, p, |i, j| {
            sigma[(i, j)] / (self.diag[i] * self.diag[j]).sqrt()
        })
    }

    /// Restricted-scale cutoffs.
    pub fn cutoffs_restricted(&self) -> DMatrix<f64> {
        self.cutoffs.restricted(&self.diag)
    }

    /// Refresh the cached covariance diagonal from the regression state.
    pub fn refresh_diag(&mut self) {
        self.diag = self.seq.diag_sigma();
    }
}

/// Prior for the multivariate probit sampler: the induced
/// inverse-Wishart-type prior on the correlation via `nu0`, a full-rank
/// column precision for the coefficients, and a truncated-normal prior on
/// the free cutoffs (restricted scale).
#[derive(Debug, Clone)]
pub struct MvpPrior {
    pub nu0: f64,
    pub m: DMatrix<f64>,
    pub cutoff_prior: CutoffNormalPrior,
}

/// Per-visit normal prior on the `K - 2` free cutoffs, restricted scale.
#[derive(Debug, Clone)]
pub struct CutoffNormalPrior {
    pub mean: Vec<DVector<f64>>,
    pub cov: Vec<DMatrix<f64>>,
}

impl CutoffNormalPrior {
    /// Diffuse default: zero mean, variance `1e4` per cutoff.
    pub fn diffuse(p: usize, categories: usize) -> Self {
        let free = categories.saturating_sub(2);
        CutoffNormalPrior {
            mean: (0..p).map(|_| DVector::zeros(free)).collect(),
            cov: (0..p).map(|_| DMatrix::identity(free, free) * 1e4).collect(),
        }
    }
}

impl MvpPrior {
    pub fn new(nu0: f64, m: DMatrix<f64>, cutoff_prior: CutoffNormalPrior) -> Self {
        MvpPrior { nu0, m, cutoff_prior }
    }

    /// The marginally-uniform-correlation preset: `nu0 = p + 1`, `m` as
    /// given, diffuse cutoffs.
    pub fn marginally_uniform(p: usize, m: DMatrix<f64>, categories: usize) -> Self {
        MvpPrior::new((p + 1) as f64, m, CutoffNormalPrior::diffuse(p, categories))
    }

    /// Full-rank `m` and a proper induced inverse-Wishart are required for
    /// the pure Gibbs pathway.
    pub fn validate(&self, p: usize, q: usize, categories: usize) -> Result<()> {
        if self.m.nrows() != q || self.m.ncols() != q {
            return Err(Error::invalid("column precision must be q x q"));
        }
        if crate::mmrm::symmetric_rank_of(&self.m) < q {
            return Err(Error::invalid(
                "the Gibbs sampler needs a full-rank column precision; use an iMH sampler for flat priors",
            ));
        }
        if !(self.nu0 > p as f64 - 1.0) {
            return Err(Error::invalid(format!(
                "nu0 = {} does not give a proper induced prior (need nu0 > {})",
                self.nu0,
                p - 1
            )));
        }
        let free = categories.saturating_sub(2);
        if self.cutoff_prior.mean.len() != p
            || self.cutoff_prior.cov.len() != p
            || self.cutoff_prior.mean.iter().any(|m| m.len() != free)
            || self.cutoff_prior.cov.iter().any(|c| c.nrows() != free || c.ncols() != free)
        {
            return Err(Error::invalid("cutoff prior must have one (mean, cov) of dimension K-2 per visit"));
        }
        Ok(())
    }
}
