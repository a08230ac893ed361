//! Full data augmentation for continuous outcomes: the joint conjugate
//! posterior on complete data, and a chain that re-imputes every missing
//! cell (dropout included) each iteration. Kept both as a user-selectable
//! sampler and as an independent cross-check of the MDA scheme, which
//! targets the same posterior for the shared parameters.

use nalgebra::{DMatrix, DVector};

use crate::data::{arrange_monotone, LongitudinalDataset};
use crate::dist::{cholesky_lower, sample_inverse_wishart, sample_matrix_normal, CHOL_REL_TOL};
use crate::error::Error;
use crate::mmrm::chain::{
    conditional_normal_draw, locf_fill, snapshot_indices, ChainConfig, MmrmChain, MmrmDraw,
    ParamSnapshot,
};
use crate::mmrm::prior::MniwPrior;
use crate::rng::RunRng;
use crate::Result;

/// Draw `(sigma, alpha)` from the joint conjugate posterior given complete
/// data: `sigma` is inverse-Wishart with `n + nu0 + r - q` degrees of
/// freedom, and `alpha | sigma` is matrix normal around the ridge-type
/// estimate with row covariance `sigma` and column covariance
/// `(X'X + M)^{-1}`.
pub fn fda_posterior_sample(
    prior: &MniwPrior,
    x: &DMatrix<f64>,
    y_complete: &DMatrix<f64>,
    rng: &mut RunRng,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = x.nrows();
    let q = x.ncols();
    let p = y_complete.ncols();
    if y_complete.nrows() != n || prior.n_visits() != p || prior.n_covariates() != q {
        return Err(Error::invalid("dimension mismatch in complete-data posterior"));
    }
    if y_complete.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("complete-data posterior requires a fully imputed outcome matrix"));
    }
    let r = prior.rank_m() as f64;
    let df = n as f64 + prior.nu0() + r - q as f64;
    if !(df > p as f64 - 1.0) {
        return Err(Error::improper(
            0,
            format!("inverse-Wishart posterior df {df} must exceed {}", p - 1),
        ));
    }
    let omega = x.transpose() * x + prior.m();
    let omega_chol = cholesky_lower(&omega, CHOL_REL_TOL).map_err(|_| {
        Error::improper(0, "X'X + M is singular (collinear covariates with a flat prior?)")
    })?;
    // gamma_pos = (Y'X + B0' M) Omega^{-1}, solved column-block-wise.
    let rhs = y_complete.transpose() * x + prior.b0().transpose() * prior.m();
    let gamma_pos = solve_spd_right(&omega_chol, &rhs);
    let mut a_pos = prior.a()
        + y_complete.transpose() * y_complete
        + prior.b0().transpose() * prior.m() * prior.b0()
        - &gamma_pos * &omega * gamma_pos.transpose();
    crate::dist::symmetrize(&mut a_pos);
    let sigma = sample_inverse_wishart(df, &a_pos, rng)?;
    let sigma_chol = cholesky_lower(&sigma, CHOL_REL_TOL)?;
    let alpha = sample_matrix_normal(&gamma_pos, &sigma_chol, &omega_chol, rng);
    Ok((sigma, alpha))
}

/// Solve `Z Omega = rhs` for `Z` given the lower Cholesky factor of `Omega`.
fn solve_spd_right(chol: &DMatrix<f64>, rhs: &DMatrix<f64>) -> DMatrix<f64> {
    let q = chol.nrows();
    let mut z = rhs.clone();
    for row in 0..z.nrows() {
        // Forward: w such that C w = rhs_row'.
        for i in 0..q {
            let mut s = z[(row, i)];
            for k in 0..i {
                s -= chol[(i, k)] * z[(row, k)];
            }
            z[(row, i)] = s / chol[(i, i)];
        }
        // Backward: C' out = w.
        for i in (0..q).rev() {
            let mut s = z[(row, i)];
            for k in (i + 1)..q {
                s -= chol[(k, i)] * z[(row, k)];
            }
            z[(row, i)] = s / chol[(i, i)];
        }
    }
    z
}

/// Run a full-data-augmentation chain: draw `(sigma, alpha)` on the current
/// completed data, then re-impute every missing cell (intermittent and
/// dropout) from its conditional normal given the subject's observed cells.
pub fn run_fda_chain(
    data: &LongitudinalDataset,
    prior: &MniwPrior,
    config: &ChainConfig,
    snapshot_count: usize,
    rng: &mut RunRng,
) -> Result<MmrmChain> {
    config.validate()?;
    let arrangement = arrange_monotone(data);
    let n = data.n_subjects();
    let p = data.n_visits();
    let x = data.covariates();

    // Complete starting fill: monotone LOCF, then carry the last value
    // through dropout; subjects with nothing observed start at the
    // covariate-only fit via locf_fill's fallback inside the monotone block.
    let mut fill = locf_fill(data, &arrangement);
    let mut grand = 0.0;
    let mut cnt = 0usize;
    for i in 0..n {
        for j in 0..p {
            if data.is_observed(i, j) {
                grand += data.outcomes()[(i, j)];
                cnt += 1;
            }
        }
    }
    let grand_mean = if cnt > 0 { grand / cnt as f64 } else { 0.0 };
    for i in 0..n {
        let mut last = f64::NAN;
        for j in 0..p {
            if fill[(i, j)].is_nan() {
                fill[(i, j)] = if last.is_nan() { grand_mean } else { last };
            }
            last = fill[(i, j)];
        }
    }

    let missing_by_subject: Vec<(Vec<usize>, Vec<usize>)> = (0..n)
        .map(|i| {
            let missing: Vec<usize> = (0..p).filter(|&j| !data.is_observed(i, j)).collect();
            let observed: Vec<usize> = (0..p).filter(|&j| data.is_observed(i, j)).collect();
            (observed, missing)
        })
        .collect();

    let snap_at = snapshot_indices(config.retained(), snapshot_count)?;
    let mut draws = Vec::with_capacity(config.retained());
    let mut snapshots = Vec::with_capacity(snapshot_count);
    for iter in 1..=config.iterations {
        let (sigma, alpha) = fda_posterior_sample(prior, x, &fill, rng)?;
        if config.is_retained(iter) {
            let retained_index = draws.len();
            if snap_at.contains(&retained_index) {
                // Snapshots keep only the monotone block; dropout cells are
                // re-imputed at emission under the requested mechanism.
                let mut monotone = fill.clone();
                for i in 0..n {
                    for j in data.pattern(i)..p {
                        monotone[(i, j)] = f64::NAN;
                    }
                }
                snapshots.push(ParamSnapshot {
                    alpha: alpha.clone(),
                    sigma: sigma.clone(),
                    filled: monotone,
                    cutoffs: None,
                    retained_index,
                });
            }
            draws.push(MmrmDraw {
                alpha: alpha.clone(),
                sigma: sigma.clone(),
                gamma: DVector::zeros(0),
            });
        }
        // Impute all missing cells given the fresh parameters.
        for i in 0..n {
            let (observed, missing) = &missing_by_subject[i];
            if missing.is_empty() {
                continue;
            }
            let x_row = DVector::from_fn(data.n_covariates(), |c, _| x[(i, c)]);
            let mu = &alpha * &x_row;
            let draw =
                conditional_normal_draw(&mu, &sigma, observed, missing, &fill, i, rng)?;
            for (idx, &j) in missing.iter().enumerate() {
                fill[(i, j)] = draw[idx];
            }
        }
    }
    Ok(MmrmChain { draws, snapshots })
}
