//! The conjugate matrix-normal-inverse-Wishart prior and its decomposition
//! into independent per-visit normal-gamma priors.
//!
//! The prior on the covariance is inverse-Wishart with scale `a` and
//! degrees of freedom `nu0` (`nu0 = 0, a = 0` is Jeffreys' prior). Given
//! the covariance, the coefficient matrix is matrix normal with mean `b0`
//! and column precision `m`; zero rows/columns of `m` put a flat prior on
//! the corresponding covariates, so `m` may be rank deficient.

use nalgebra::DMatrix;

use crate::dist::NormalGammaParams;
use crate::error::Error;
use crate::Result;

/// Rank tolerance for the column precision matrix.
const RANK_REL_TOL: f64 = 1e-10;

/// Conjugate prior for the repeated-measures normal model with `p` visits
/// and `q` covariates.
#[derive(Debug, Clone)]
pub struct MniwPrior {
    /// `p x p` symmetric PSD inverse-Wishart scale.
    a: DMatrix<f64>,
    /// Inverse-Wishart degrees of freedom; 0 with `a = 0` is Jeffreys'.
    nu0: f64,
    /// `q x p` prior coefficient mean; rows for flat covariates must be zero.
    b0: DMatrix<f64>,
    /// `q x q` symmetric PSD column precision; possibly rank deficient.
    m: DMatrix<f64>,
    rank_m: usize,
}

impl MniwPrior {
    pub fn new(a: DMatrix<f64>, nu0: f64, b0: DMatrix<f64>, m: DMatrix<f64>) -> Result<Self> {
        let p = a.nrows();
        let q = m.nrows();
        crate::dist::check_symmetric(&a, 1e-12)?;
        crate::dist::check_symmetric(&m, 1e-12)?;
        if b0.nrows() != q || b0.ncols() != p {
            return Err(Error::invalid(format!(
                "prior mean must be {q}x{p}, got {}x{}",
                b0.nrows(),
                b0.ncols()
            )));
        }
        // A flat covariate (all-zero row/col of m) carries no prior
        // information, so its prior-mean row must be zero.
        for k in 0..q {
            let zero_row = (0..q).all(|c| m[(k, c)] == 0.0 && m[(c, k)] == 0.0);
            if zero_row && b0.row(k).iter().any(|v| *v != 0.0) {
                return Err(Error::invalid(format!(
                    "covariate {} has a flat prior; its prior-mean row must be zero",
                    k + 1
                )));
            }
        }
        let rank_m = symmetric_rank(&m, RANK_REL_TOL);
        Ok(MniwPrior { a, nu0, b0, m, rank_m })
    }

    /// Jeffreys' prior on the covariance with flat coefficient priors.
    pub fn jeffreys(p: usize, q: usize) -> Self {
        MniwPrior::new(
            DMatrix::zeros(p, p),
            0.0,
            DMatrix::zeros(q, p),
            DMatrix::zeros(q, q),
        )
        .expect("zero matrices are valid")
    }

    /// The recommended weakly informative preset:
    /// `nu0 = p + 1`, `a = I`, `b0 = 0`, `m = 0.01 I`.
    pub fn weakly_informative(p: usize, q: usize) -> Self {
        MniwPrior::new(
            DMatrix::identity(p, p),
            (p + 1) as f64,
            DMatrix::zeros(q, p),
            DMatrix::identity(q, q) * 0.01,
        )
        .expect("preset matrices are valid")
    }

    pub fn n_visits(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_covariates(&self) -> usize {
        self.m.nrows()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn nu0(&self) -> f64 {
        self.nu0
    }

    pub fn b0(&self) -> &DMatrix<f64> {
        &self.b0
    }

    pub fn m(&self) -> &DMatrix<f64> {
        &self.m
    }

    /// Rank of the column precision: the number of covariates with
    /// non-flat priors.
    pub fn rank_m(&self) -> usize {
        self.rank_m
    }
}

/// Rank of a symmetric PSD matrix at the standard tolerance.
pub fn symmetric_rank_of(m: &DMatrix<f64>) -> usize {
    symmetric_rank(m, RANK_REL_TOL)
}

/// Rank of a symmetric PSD matrix at a relative eigenvalue tolerance.
pub(crate) fn symmetric_rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    if m.iter().all(|v| *v == 0.0) {
        return 0;
    }
    let eig = m.clone().symmetric_eigenvalues();
    let max = eig.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    eig.iter().filter(|v| v.abs() > rel_tol * max).count()
}

/// The per-visit normal-gamma priors induced by an MNIW prior.
#[derive(Debug, Clone)]
pub struct PriorDecomposition {
    /// `(f_{j0}, D_{j0})` for visits `j = 1..p` (0-based storage).
    pub per_visit: Vec<NormalGammaParams>,
    /// Rank of the column precision.
    pub rank_m: usize,
    /// Per visit, the axis indices of all-zero rows/cols of `D_{j0}`; these
    /// directions carry improper-flat priors until data fill them in.
    pub flat_directions: Vec<Vec<usize>>,
    pub p: usize,
    pub q: usize,
}

/// Decompose the MNIW prior into independent per-visit normal-gamma priors:
/// `f_{j0} = nu0 + j - p - (q - r)` and `D_{j0}` the leading
/// `(q + j) x (q + j)` block of the joint scale
/// `[[M, M B0], [B0' M, B0' M B0 + A]]`.
pub fn decompose_prior(prior: &MniwPrior, p: usize, q: usize) -> Result<PriorDecomposition> {
    if prior.n_visits() != p || prior.n_covariates() != q {
        return Err(Error::invalid("prior dimensions do not match the dataset"));
    }
    let r = prior.rank_m();
    let mb0 = prior.m() * prior.b0();
    let mut d0 = DMatrix::zeros(q + p, q + p);
    d0.view_mut((0, 0), (q, q)).copy_from(prior.m());
    d0.view_mut((0, q), (q, p)).copy_from(&mb0);
    d0.view_mut((q, 0), (p, q)).copy_from(&mb0.transpose());
    d0.view_mut((q, q), (p, p))
        .copy_from(&(prior.b0().transpose() * &mb0 + prior.a()));

    let mut per_visit = Vec::with_capacity(p);
    let mut flat_directions = Vec::with_capacity(p);
    for j in 1..=p {
        let dim = q + j;
        let f_j0 = prior.nu0() + j as f64 - p as f64 - (q as f64 - r as f64);
        let d_j0 = DMatrix::from(d0.view((0, 0), (dim, dim)));
        let flats = (0..dim)
            .filter(|&k| (0..dim).all(|c| d_j0[(k, c)] == 0.0))
            .collect();
        per_visit.push(NormalGammaParams::new(f_j0, d_j0)?);
        flat_directions.push(flats);
    }
    Ok(PriorDecomposition {
        per_visit,
        rank_m: r,
        flat_directions,
        p,
        q,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schafer_case_has_negative_prior_df_and_zero_scale() {
        // nu0 = 0, A = 0, M = 0, p = 2, q = 1: f_{1,0} = 0 + 1 - 2 - 1 = -2.
        let prior = MniwPrior::jeffreys(2, 1);
        let d = decompose_prior(&prior, 2, 1).unwrap();
        assert_eq!(d.rank_m, 0);
        assert_eq!(d.per_visit[0].df(), -2.0);
        assert!(d.per_visit[0].d().iter().all(|v| *v == 0.0));
        assert_eq!(d.flat_directions[0], vec![0, 1]);
    }

    #[test]
    fn full_rank_precision_restores_df() {
        // nu0 = p + 1 = 5, q = 3, r = 3: f_{4,0} = 5 + 4 - 4 - 0 = 5.
        let prior = MniwPrior::new(
            DMatrix::identity(4, 4),
            5.0,
            DMatrix::zeros(3, 4),
            DMatrix::identity(3, 3) * 0.2,
        )
        .unwrap();
        let d = decompose_prior(&prior, 4, 3).unwrap();
        assert_eq!(d.rank_m, 3);
        assert_eq!(d.per_visit[3].df(), 5.0);
        assert!(d.flat_directions[3].is_empty());
    }

    #[test]
    fn zero_precision_keeps_only_the_iw_scale_block() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let prior =
            MniwPrior::new(a.clone(), 3.0, DMatrix::zeros(1, 2), DMatrix::zeros(1, 1)).unwrap();
        let d = decompose_prior(&prior, 2, 1).unwrap();
        let d20 = d.per_visit[1].d();
        assert_eq!(d20.nrows(), 3);
        assert_eq!(d20[(0, 0)], 0.0);
        assert_eq!(d20[(1, 1)], a[(0, 0)]);
        assert_eq!(d20[(2, 1)], a[(1, 0)]);
    }

    #[test]
    fn partial_flat_priors_count_rank() {
        let m = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.0]);
        let prior = MniwPrior::new(DMatrix::identity(2, 2), 3.0, DMatrix::zeros(2, 2), m).unwrap();
        assert_eq!(prior.rank_m(), 1);
        // f_{j0} = nu0 + j - p - (q - r) = 3 + 1 - 2 - 1 = 1.
        let d = decompose_prior(&prior, 2, 2).unwrap();
        assert_eq!(d.per_visit[0].df(), 1.0);
    }

    #[test]
    fn nonzero_mean_on_flat_covariate_is_rejected() {
        let m = DMatrix::zeros(1, 1);
        let b0 = DMatrix::from_row_slice(1, 2, &[0.5, 0.0]);
        assert!(MniwPrior::new(DMatrix::identity(2, 2), 3.0, b0, m).is_err());
    }
}
