//! The MDA chain for continuous outcomes: alternate between imputing
//! intermittent cells and drawing the sequential-regression parameters.
//! Dropout cells are never imputed inside the chain; they are integrated
//! out by the monotone factorization and filled only at emission time.

use nalgebra::{DMatrix, DVector};
use rand_distr::StandardNormal;

use rand::Rng;

use crate::data::{arrange_monotone, LongitudinalDataset, MonotoneArrangement};
use crate::dist::{cholesky_lower, CHOL_REL_TOL};
use crate::error::Error;
use crate::mmrm::prior::{decompose_prior, MniwPrior};
use crate::mmrm::seqreg::{mda_posterior, sample_seq_reg, SampleMode, SeqRegState};
use crate::rng::RunRng;
use crate::Result;

/// MCMC schedule. Iteration `i` (1-based) is retained when `i > burn_in`
/// and `(i - burn_in) % thin == 0`, so `floor((iterations - burn_in)/thin)`
/// draws are kept.
#[derive(Debug, Clone, Copy)]
pub struct ChainConfig {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    /// Repair rank-deficient posterior scales by a tiny diagonal ridge
    /// instead of failing.
    pub ridge: bool,
    pub sample_mode: SampleMode,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            iterations: 2000,
            burn_in: 1000,
            thin: 1,
            ridge: false,
            sample_mode: SampleMode::Joint,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thin == 0 {
            return Err(Error::invalid("thinning interval must be positive"));
        }
        if self.burn_in >= self.iterations {
            return Err(Error::invalid(format!(
                "burn-in ({}) must be smaller than iterations ({})",
                self.burn_in, self.iterations
            )));
        }
        Ok(())
    }

    pub fn retained(&self) -> usize {
        (self.iterations - self.burn_in) / self.thin
    }

    pub fn is_retained(&self, iter_1based: usize) -> bool {
        iter_1based > self.burn_in && (iter_1based - self.burn_in) % self.thin == 0
    }
}

/// One retained parameter draw on the marginal scale.
#[derive(Debug, Clone)]
pub struct MmrmDraw {
    pub alpha: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub gamma: DVector<f64>,
}

/// A retained draw kept with the monotone fill it was sampled from, for
/// post-convergence dropout imputation.
#[derive(Debug, Clone)]
pub struct ParamSnapshot {
    pub alpha: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    /// Monotone outcome matrix: observed cells plus imputed intermittent
    /// cells; entries beyond each subject's pattern are NaN. For categorical
    /// chains this holds the latent outcomes on the expanded scale.
    pub filled: DMatrix<f64>,
    /// Expanded-scale cutoffs (categorical chains only).
    pub cutoffs: Option<DMatrix<f64>>,
    /// Index of this draw in the retained sequence.
    pub retained_index: usize,
}

/// Output of one chain.
#[derive(Debug, Clone)]
pub struct MmrmChain {
    pub draws: Vec<MmrmDraw>,
    pub snapshots: Vec<ParamSnapshot>,
}

/// Initial monotone fill: last observation carried forward within each
/// subject; a missing first visit falls back to a covariate-only least
/// squares prediction. Only the transient is affected.
pub fn locf_fill(data: &LongitudinalDataset, arrangement: &MonotoneArrangement) -> DMatrix<f64> {
    let n = data.n_subjects();
    let p = data.n_visits();
    let mut fill = DMatrix::from_element(n, p, f64::NAN);
    for i in 0..n {
        for j in 0..data.pattern(i) {
            if data.is_observed(i, j) {
                fill[(i, j)] = data.outcomes()[(i, j)];
            }
        }
    }
    if arrangement.intermittent_cells.is_empty() {
        return fill;
    }
    let first_visit_fit = covariate_ols_first_visit(data);
    for i in 0..n {
        let s = data.pattern(i);
        let mut last = f64::NAN;
        for j in 0..s {
            if fill[(i, j)].is_nan() {
                fill[(i, j)] = if last.is_nan() {
                    match &first_visit_fit {
                        Some(coef) => {
                            let mut v = 0.0;
                            for c in 0..data.n_covariates() {
                                v += coef[c] * data.covariates()[(i, c)];
                            }
                            v
                        }
                        None => 0.0,
                    }
                } else {
                    last
                };
            }
            last = fill[(i, j)];
        }
    }
    fill
}

fn covariate_ols_first_visit(data: &LongitudinalDataset) -> Option<DVector<f64>> {
    let q = data.n_covariates();
    let mut xtx = DMatrix::zeros(q, q);
    let mut xty = DVector::zeros(q);
    let mut count = 0usize;
    for i in 0..data.n_subjects() {
        if data.is_observed(i, 0) {
            let y = data.outcomes()[(i, 0)];
            for a in 0..q {
                let xa = data.covariates()[(i, a)];
                xty[a] += xa * y;
                for b in 0..q {
                    xtx[(a, b)] += xa * data.covariates()[(i, b)];
                }
            }
            count += 1;
        }
    }
    if count == 0 {
        return None;
    }
    let eps = 1e-8 * xtx.trace() / q as f64;
    for a in 0..q {
        xtx[(a, a)] += eps;
    }
    cholesky_lower(&xtx, CHOL_REL_TOL).ok().map(|c| {
        let mut v = xty;
        // Forward then backward substitution.
        for i in 0..q {
            for k in 0..i {
                let vk = v[k];
                v[i] -= c[(i, k)] * vk;
            }
            v[i] /= c[(i, i)];
        }
        for i in (0..q).rev() {
            for k in (i + 1)..q {
                let vk = v[k];
                v[i] -= c[(k, i)] * vk;
            }
            v[i] /= c[(i, i)];
        }
        v
    })
}

/// Redraw every intermittent cell from the joint conditional normal of the
/// subject's missing pre-dropout coordinates given the observed ones, with
/// mean `x_i' alpha` and covariance from the current state. One conditional
/// draw per subject, so the within-subject update order does not matter.
pub fn impute_intermittent(
    state: &SeqRegState,
    data: &LongitudinalDataset,
    arrangement: &MonotoneArrangement,
    fill: &mut DMatrix<f64>,
    rng: &mut RunRng,
) -> Result<()> {
    if arrangement.intermittent_cells.is_empty() {
        return Ok(());
    }
    let sigma = state.sigma();
    let mut by_subject: Vec<(usize, Vec<usize>)> = Vec::new();
    for &(i, j) in &arrangement.intermittent_cells {
        match by_subject.last_mut() {
            Some((s, cells)) if *s == i => cells.push(j),
            _ => by_subject.push((i, vec![j])),
        }
    }
    for (i, missing) in by_subject {
        let s = data.pattern(i);
        let observed: Vec<usize> = (0..s).filter(|j| !missing.contains(j)).collect();
        let x_row = DVector::from_fn(data.n_covariates(), |c, _| data.covariates()[(i, c)]);
        let mu = state.visit_means(&x_row);
        let draw = conditional_normal_draw(&mu, &sigma, &observed, &missing, fill, i, rng)?;
        for (idx, &j) in missing.iter().enumerate() {
            fill[(i, j)] = draw[idx];
        }
    }
    Ok(())
}

/// Draw the `missing` coordinates of `N(mu, sigma)` conditional on the
/// `observed` coordinates read from row `i` of `values`.
pub(crate) fn conditional_normal_draw(
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    observed: &[usize],
    missing: &[usize],
    values: &DMatrix<f64>,
    row: usize,
    rng: &mut RunRng,
) -> Result<DVector<f64>> {
    let (mean, cov) = conditional_normal(mu, sigma, observed, missing, values, row)?;
    let chol = cholesky_lower(&cov, CHOL_REL_TOL)?;
    let z = DVector::from_fn(missing.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok(mean + chol * z)
}

/// Conditional mean and covariance of the `missing` coordinates given the
/// `observed` ones.
pub(crate) fn conditional_normal(
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    observed: &[usize],
    missing: &[usize],
    values: &DMatrix<f64>,
    row: usize,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let nm = missing.len();
    let no = observed.len();
    let mut cov = DMatrix::from_fn(nm, nm, |a, b| sigma[(missing[a], missing[b])]);
    let mut mean = DVector::from_fn(nm, |a, _| mu[missing[a]]);
    if no == 0 {
        return Ok((mean, cov));
    }
    let s_oo = DMatrix::from_fn(no, no, |a, b| sigma[(observed[a], observed[b])]);
    let s_mo = DMatrix::from_fn(nm, no, |a, b| sigma[(missing[a], observed[b])]);
    let resid = DVector::from_fn(no, |a, _| values[(row, observed[a])] - mu[observed[a]]);
    let chol = cholesky_lower(&s_oo, CHOL_REL_TOL)?;
    // Solve S_oo w = resid and S_oo V' = S_mo'.
    let w = chol_solve(&chol, &resid);
    mean += &s_mo * &w;
    let mut vt = s_mo.transpose();
    for c in 0..nm {
        let col = DVector::from_fn(no, |r, _| vt[(r, c)]);
        let sol = chol_solve(&chol, &col);
        for r in 0..no {
            vt[(r, c)] = sol[r];
        }
    }
    cov -= &s_mo * &vt;
    crate::dist::symmetrize(&mut cov);
    Ok((mean, cov))
}

fn chol_solve(chol: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = b.len();
    let mut v = b.clone();
    for i in 0..n {
        for k in 0..i {
            let vk = v[k];
            v[i] -= chol[(i, k)] * vk;
        }
        v[i] /= chol[(i, i)];
    }
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            let vk = v[k];
            v[i] -= chol[(k, i)] * vk;
        }
        v[i] /= chol[(i, i)];
    }
    v
}

/// Evenly strided retained-draw indices used for imputation snapshots.
pub(crate) fn snapshot_indices(retained: usize, m: usize) -> Result<Vec<usize>> {
    if m == 0 {
        return Ok(Vec::new());
    }
    if retained < m {
        return Err(Error::invalid(format!(
            "cannot select {m} imputation draws from {retained} retained draws"
        )));
    }
    let stride = retained / m;
    Ok((0..m).map(|k| k * stride).collect())
}

/// Run one MDA chain. `snapshot_count` retained draws (evenly strided) are
/// kept with their monotone fills for post-convergence dropout imputation.
pub fn run_mda_chain(
    data: &LongitudinalDataset,
    prior: &MniwPrior,
    config: &ChainConfig,
    snapshot_count: usize,
    rng: &mut RunRng,
) -> Result<MmrmChain> {
    config.validate()?;
    let arrangement = arrange_monotone(data);
    let decomp = decompose_prior(prior, data.n_visits(), data.n_covariates())?;
    let mut fill = locf_fill(data, &arrangement);
    let mut posterior = mda_posterior(&decomp, &arrangement, data, &fill, config.ridge)?;
    let mut state = sample_seq_reg(&posterior, config.sample_mode, rng)?;
    let static_design = arrangement.intermittent_cells.is_empty();

    let snap_at = snapshot_indices(config.retained(), snapshot_count)?;
    let mut draws = Vec::with_capacity(config.retained());
    let mut snapshots = Vec::with_capacity(snapshot_count);
    for iter in 1..=config.iterations {
        impute_intermittent(&state, data, &arrangement, &mut fill, rng)?;
        if !static_design {
            posterior = mda_posterior(&decomp, &arrangement, data, &fill, config.ridge)?;
        }
        state = sample_seq_reg(&posterior, config.sample_mode, rng)?;
        if config.is_retained(iter) {
            let retained_index = draws.len();
            let alpha = state.alpha();
            let sigma = state.sigma();
            if snap_at.contains(&retained_index) {
                snapshots.push(ParamSnapshot {
                    alpha: alpha.clone(),
                    sigma: sigma.clone(),
                    filled: fill.clone(),
                    cutoffs: None,
                    retained_index,
                });
            }
            draws.push(MmrmDraw {
                alpha,
                sigma,
                gamma: DVector::from_column_slice(state.gammas()),
            });
        }
    }
    Ok(MmrmChain { draws, snapshots })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::OutcomeKind;
    use crate::rng::{stream_rng, Stream};
    use approx::assert_relative_eq;

    fn dataset(y: DMatrix<f64>, observed: Vec<Vec<bool>>) -> LongitudinalDataset {
        let n = y.nrows();
        LongitudinalDataset::new(
            (0..n).map(|i| format!("s{i}")).collect(),
            vec!["a".into(); n],
            DMatrix::from_element(n, 1, 1.0),
            y,
            observed,
            OutcomeKind::Continuous,
            vec!["x1".into()],
        )
        .unwrap()
    }

    #[test]
    fn retained_count_follows_schedule_arithmetic() {
        let c = ChainConfig {
            iterations: 107,
            burn_in: 10,
            thin: 3,
            ..ChainConfig::default()
        };
        assert_eq!(c.retained(), (107 - 10) / 3);
        let kept = (1..=107).filter(|&i| c.is_retained(i)).count();
        assert_eq!(kept, c.retained());
    }

    #[test]
    fn locf_carries_forward_and_falls_back_to_ols() {
        let y = DMatrix::from_row_slice(
            3,
            3,
            &[1.0, f64::NAN, 3.0, f64::NAN, f64::NAN, 6.0, 2.0, 2.0, 2.0],
        );
        let observed = vec![
            vec![true, false, true],
            vec![false, false, true],
            vec![true, true, true],
        ];
        let data = dataset(y, observed);
        let arr = arrange_monotone(&data);
        let fill = locf_fill(&data, &arr);
        assert_relative_eq!(fill[(0, 1)], 1.0); // carried forward
        // subject 2's first visit: OLS on observed y1 values {1, 2} -> 1.5
        assert_relative_eq!(fill[(1, 0)], 1.5, epsilon = 1e-6);
        assert_relative_eq!(fill[(1, 1)], 1.5, epsilon = 1e-6);
    }

    #[test]
    fn no_intermittent_cells_leaves_fill_untouched() {
        let y = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, f64::NAN]);
        let observed = vec![vec![true, true], vec![true, false]];
        let data = dataset(y, observed);
        let arr = arrange_monotone(&data);
        let mut fill = locf_fill(&data, &arr);
        let before = fill.clone();
        let state = SeqRegState::new(
            vec![DVector::from_vec(vec![0.0]), DVector::from_vec(vec![0.0, 0.5])],
            vec![1.0, 1.0],
            1,
        )
        .unwrap();
        let mut rng = stream_rng(1, Stream::Chain(0));
        impute_intermittent(&state, &data, &arr, &mut fill, &mut rng).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let (a, b) = (before[(i, j)], fill[(i, j)]);
                assert!(a == b || (a.is_nan() && b.is_nan()));
            }
        }
    }

    #[test]
    fn bivariate_intermittent_draw_matches_conditional_law() {
        // p = 2, observed y2 only (y1 intermittent): y1 | y2 ~
        // N(mu1 + rho (y2 - mu2), 1 - rho^2).
        let rho = 0.6_f64;
        let (mu1, mu2) = (1.0, -2.0);
        let y2 = -1.0;
        let y = DMatrix::from_row_slice(1, 2, &[f64::NAN, y2]);
        let observed = vec![vec![false, true]];
        let data = dataset(y, observed);
        let arr = arrange_monotone(&data);
        assert_eq!(arr.intermittent_cells, vec![(0, 0)]);
        // State with sigma = [[1, rho], [rho, 1]] and means (mu1, mu2):
        // alpha_tilde_1 = mu1; alpha_tilde_2 = mu2 - rho*mu1; beta_21 = rho;
        // gamma = (1, 1/(1 - rho^2)).
        let state = SeqRegState::new(
            vec![
                DVector::from_vec(vec![mu1]),
                DVector::from_vec(vec![mu2 - rho * mu1, rho]),
            ],
            vec![1.0, 1.0 / (1.0 - rho * rho)],
            1,
        )
        .unwrap();
        let mut rng = stream_rng(2, Stream::Chain(0));
        let reps = 100_000;
        let mut fill = locf_fill(&data, &arr);
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..reps {
            impute_intermittent(&state, &data, &arr, &mut fill, &mut rng).unwrap();
            let v = fill[(0, 0)];
            s += v;
            s2 += v * v;
        }
        let mean = s / reps as f64;
        let var = s2 / reps as f64 - mean * mean;
        let expect_mean = mu1 + rho * (y2 - mu2);
        let expect_var = 1.0 - rho * rho;
        let se = (expect_var / reps as f64).sqrt();
        assert!((mean - expect_mean).abs() < 3.0 * se, "{mean} vs {expect_mean}");
        assert!((var - expect_var).abs() < 0.02, "{var} vs {expect_var}");
    }

    #[test]
    fn snapshot_indices_follow_the_stride_rule() {
        assert_eq!(snapshot_indices(1000, 5).unwrap(), vec![0, 200, 400, 600, 800]);
        assert!(snapshot_indices(3, 5).is_err());
        assert!(snapshot_indices(0, 0).unwrap().is_empty());
    }
}
