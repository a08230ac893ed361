//! Sequential-regression parameterization of the repeated-measures model
//! and its monotone-data posterior.
//!
//! Visit `j` is regressed on the covariates and visits `1..j-1`; the
//! coefficient vector `theta_j` and precision `gamma_j` follow independent
//! normal-gamma posteriors given monotone data. The full covariance is
//! recovered through the unit-triangular LDL relation, and several scalar
//! identities (diagonal of the covariance and of its inverse, determinants)
//! are available without any dense inversion.

use nalgebra::{DMatrix, DVector};

use crate::data::{LongitudinalDataset, MonotoneArrangement};
use crate::dist::{
    invert_unit_lower, normal_gamma_sample, normal_gamma_sample_marginal, NormalGammaParams,
};
use crate::error::Error;
use crate::mmrm::prior::PriorDecomposition;
use crate::rng::RunRng;
use crate::Result;

/// Which normal-gamma pathway draws the per-visit coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SampleMode {
    /// One triangular solve per visit.
    #[default]
    Joint,
    /// Marginal lag-block and precision, then the covariate block.
    MarginalThenConditional,
}

/// Per-visit regression coefficients and precisions.
///
/// `theta[j]` has length `q + j` (0-based `j`): the covariate block
/// followed by coefficients on visits `1..j`. All precisions are positive.
#[derive(Debug, Clone)]
pub struct SeqRegState {
    theta: Vec<DVector<f64>>,
    gamma: Vec<f64>,
    q: usize,
}

impl SeqRegState {
    pub fn new(theta: Vec<DVector<f64>>, gamma: Vec<f64>, q: usize) -> Result<Self> {
        if theta.len() != gamma.len() || theta.is_empty() {
            return Err(Error::invalid("state needs one (theta, gamma) pair per visit"));
        }
        for (j, t) in theta.iter().enumerate() {
            if t.len() != q + j {
                return Err(Error::invalid(format!(
                    "theta[{j}] must have length {} (got {})",
                    q + j,
                    t.len()
                )));
            }
        }
        if gamma.iter().any(|g| !(*g > 0.0) || !g.is_finite()) {
            return Err(Error::invalid("all precisions must be positive and finite"));
        }
        Ok(SeqRegState { theta, gamma, q })
    }

    pub fn n_visits(&self) -> usize {
        self.gamma.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.q
    }

    pub fn theta(&self, j: usize) -> &DVector<f64> {
        &self.theta[j]
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gamma
    }

    pub fn gamma(&self, j: usize) -> f64 {
        self.gamma[j]
    }

    /// Coefficient of visit `j` on visit `k` (0-based, `k < j`).
    pub fn beta(&self, j: usize, k: usize) -> f64 {
        debug_assert!(k < j);
        self.theta[j][self.q + k]
    }

    /// Covariate-block coefficients, one row per visit (`p x q`).
    pub fn alpha_tilde(&self) -> DMatrix<f64> {
        let p = self.n_visits();
        DMatrix::from_fn(p, self.q, |j, c| self.theta[j][c])
    }

    /// Unit lower-triangular `U` with `-beta` below the diagonal.
    pub fn u_matrix(&self) -> DMatrix<f64> {
        let p = self.n_visits();
        let mut u = DMatrix::identity(p, p);
        for j in 1..p {
            for k in 0..j {
                u[(j, k)] = -self.beta(j, k);
            }
        }
        u
    }

    /// `L = U^{-1}`.
    pub fn l_matrix(&self) -> DMatrix<f64> {
        invert_unit_lower(&self.u_matrix())
    }

    /// Marginal coefficient matrix (`p x q`), recovered as `L alpha_tilde`.
    pub fn alpha(&self) -> DMatrix<f64> {
        self.l_matrix() * self.alpha_tilde()
    }

    /// Covariance `L diag(1/gamma) L'`.
    pub fn sigma(&self) -> DMatrix<f64> {
        let p = self.n_visits();
        let l = self.l_matrix();
        let mut scaled = l.clone();
        for j in 0..p {
            let s = 1.0 / self.gamma[j];
            for i in 0..p {
                scaled[(i, j)] *= s;
            }
        }
        let mut sigma = scaled * l.transpose();
        crate::dist::symmetrize(&mut sigma);
        sigma
    }

    /// Diagonal of the covariance without forming it:
    /// `d_j = sum_{k<j} l_jk^2 / gamma_k + 1 / gamma_j`.
    pub fn diag_sigma(&self) -> DVector<f64> {
        let p = self.n_visits();
        let l = self.l_matrix();
        DVector::from_fn(p, |j, _| {
            let mut d = 1.0 / self.gamma[j];
            for k in 0..j {
                d += l[(j, k)] * l[(j, k)] / self.gamma[k];
            }
            d
        })
    }

    /// Diagonal of the precision matrix without forming it:
    /// `sigma^{jj} = gamma_j + sum_{k>j} gamma_k beta_kj^2`.
    pub fn sigma_inv_diag(&self) -> DVector<f64> {
        let p = self.n_visits();
        DVector::from_fn(p, |j, _| {
            let mut s = self.gamma[j];
            for k in (j + 1)..p {
                let b = self.beta(k, j);
                s += self.gamma[k] * b * b;
            }
            s
        })
    }

    /// `log |Sigma| = -sum_j log gamma_j`.
    pub fn log_det_sigma(&self) -> f64 {
        -self.gamma.iter().map(|g| g.ln()).sum::<f64>()
    }

    /// `log |R| = -sum_{j>=2} log(gamma_j d_j)` for the correlation matrix
    /// of the covariance (the first factor drops since `d_1 gamma_1 = 1`).
    pub fn log_det_corr(&self) -> f64 {
        let d = self.diag_sigma();
        -(1..self.n_visits())
            .map(|j| (self.gamma[j] * d[j]).ln())
            .sum::<f64>()
    }

    /// Correlation matrix and covariance diagonal.
    pub fn correlation(&self) -> (DMatrix<f64>, DVector<f64>) {
        let sigma = self.sigma();
        let p = self.n_visits();
        let d = DVector::from_fn(p, |j, _| sigma[(j, j)]);
        let r = DMatrix::from_fn(p, p, |i, j| sigma[(i, j)] / (d[i] * d[j]).sqrt());
        (r, d)
    }

    /// Visit means `x' alpha` for one subject, computed as `L (alpha_tilde x)`.
    pub fn visit_means(&self, x_row: &DVector<f64>) -> DVector<f64> {
        let p = self.n_visits();
        let mut v = DVector::zeros(p);
        for j in 0..p {
            let mut s = 0.0;
            for c in 0..self.q {
                s += self.theta[j][c] * x_row[c];
            }
            v[j] = s;
        }
        self.l_matrix() * v
    }

    /// Swap in a new `(theta, gamma)` pair for one visit.
    pub fn replace_visit(&mut self, j: usize, theta: DVector<f64>, gamma: f64) -> Result<()> {
        if theta.len() != self.q + j {
            return Err(Error::invalid(format!(
                "theta for visit {} must have length {}",
                j + 1,
                self.q + j
            )));
        }
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(Error::invalid("precision must be positive and finite"));
        }
        self.theta[j] = theta;
        self.gamma[j] = gamma;
        Ok(())
    }

    /// Rescale per-visit parameters by positive factors `s_j`:
    /// `alpha_tilde_j -> sqrt(s_j) alpha_tilde_j`,
    /// `beta_jk -> sqrt(s_j / s_k) beta_jk`, `gamma_j -> gamma_j / s_j`.
    pub fn rescale(&mut self, factors: &[f64]) -> Result<()> {
        let p = self.n_visits();
        if factors.len() != p {
            return Err(Error::invalid("one scale factor per visit required"));
        }
        if factors.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid("scale factors must be positive and finite"));
        }
        for j in 0..p {
            let sj = factors[j].sqrt();
            for c in 0..self.q {
                self.theta[j][c] *= sj;
            }
            for k in 0..j {
                self.theta[j][self.q + k] *= sj / factors[k].sqrt();
            }
            self.gamma[j] /= factors[j];
        }
        Ok(())
    }
}

/// Per-visit normal-gamma posteriors `(f_j, D_j)` under monotone data.
#[derive(Debug, Clone)]
pub struct NgPosteriorSet {
    pub per_visit: Vec<NormalGammaParams>,
    pub q: usize,
    /// Subjects contributing at each visit.
    pub counts: Vec<usize>,
}

/// Per-visit Gram matrices `Z_j' Z_j` of the stacked monotone design rows
/// `(x_i, y_{i1}, .., y_{ij})` over the `n_j` subjects observed at visit `j`.
pub fn visit_gram_matrices(
    data: &LongitudinalDataset,
    arrangement: &MonotoneArrangement,
    filled: &DMatrix<f64>,
) -> Vec<DMatrix<f64>> {
    let p = data.n_visits();
    let q = data.n_covariates();
    let x = data.covariates();
    let mut acc = DMatrix::zeros(q + p, q + p);
    let mut grams: Vec<Option<DMatrix<f64>>> = vec![None; p];
    let mut row = vec![0.0_f64; q + p];
    // Walk patterns from p down to 1; after absorbing pattern-s subjects the
    // accumulator holds everyone with pattern >= s.
    for s in (1..=p).rev() {
        for &i in &arrangement.order {
            if data.pattern(i) != s {
                continue;
            }
            let len = q + s;
            for c in 0..q {
                row[c] = x[(i, c)];
            }
            for j in 0..s {
                row[q + j] = filled[(i, j)];
            }
            for a in 0..len {
                let ra = row[a];
                for b in a..len {
                    acc[(a, b)] += ra * row[b];
                }
            }
        }
        let dim = q + s;
        let mut g = DMatrix::zeros(dim, dim);
        for a in 0..dim {
            for b in a..dim {
                g[(a, b)] = acc[(a, b)];
                g[(b, a)] = acc[(a, b)];
            }
        }
        grams[s - 1] = Some(g);
    }
    grams.into_iter().map(|g| g.expect("filled per visit")).collect()
}

/// Combine the prior decomposition with monotone data:
/// `f_j = n_j + f_{j0}`, `D_j = D_{j0} + Z_j' Z_j`.
///
/// Fails with `ImproperPosterior` when `f_j <= 0` or `D_j` is rank
/// deficient. With `ridge = true` a rank-deficient `D_j` is repaired by
/// adding `1e-8 * trace / dim` to the diagonal (logged); a nonpositive
/// `f_j` is always fatal.
pub fn mda_posterior(
    decomp: &PriorDecomposition,
    arrangement: &MonotoneArrangement,
    data: &LongitudinalDataset,
    filled: &DMatrix<f64>,
    ridge: bool,
) -> Result<NgPosteriorSet> {
    let p = decomp.p;
    let q = decomp.q;
    let grams = visit_gram_matrices(data, arrangement, filled);
    let mut per_visit = Vec::with_capacity(p);
    for j in 0..p {
        let n_j = arrangement.counts[j];
        let f_j = n_j as f64 + decomp.per_visit[j].df();
        if !(f_j > 0.0) {
            return Err(Error::improper(
                j + 1,
                format!("posterior df {f_j} is not positive (n_j = {n_j})"),
            ));
        }
        let mut d_j = decomp.per_visit[j].d() + &grams[j];
        let proper = crate::dist::cholesky_lower(&d_j, crate::dist::CHOL_REL_TOL).is_ok();
        if !proper {
            if !ridge {
                return Err(Error::improper(
                    j + 1,
                    "scale matrix is singular or nearly singular (collinear design?)",
                ));
            }
            let eps = 1e-8 * d_j.trace() / d_j.nrows() as f64;
            log::warn!(
                "visit {}: adding ridge {eps:.3e} to a rank-deficient posterior scale",
                j + 1
            );
            for k in 0..d_j.nrows() {
                d_j[(k, k)] += eps;
            }
        }
        per_visit.push(NormalGammaParams::new(f_j, d_j)?);
    }
    Ok(NgPosteriorSet {
        per_visit,
        q,
        counts: arrangement.counts.clone(),
    })
}

/// Draw `(theta_j, gamma_j)` independently across visits from their
/// normal-gamma posteriors.
pub fn sample_seq_reg(
    posteriors: &NgPosteriorSet,
    mode: SampleMode,
    rng: &mut RunRng,
) -> Result<SeqRegState> {
    let p = posteriors.per_visit.len();
    let q = posteriors.q;
    let mut theta = Vec::with_capacity(p);
    let mut gamma = Vec::with_capacity(p);
    for j in 0..p {
        let params = &posteriors.per_visit[j];
        match mode {
            SampleMode::Joint => {
                let d = normal_gamma_sample(params, rng)?;
                theta.push(d.theta);
                gamma.push(d.gamma);
            }
            SampleMode::MarginalThenConditional => {
                let d = normal_gamma_sample_marginal(params, q, rng)?;
                theta.push(d.theta());
                gamma.push(d.gamma);
            }
        }
    }
    SeqRegState::new(theta, gamma, q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{arrange_monotone, OutcomeKind};
    use crate::mmrm::prior::{decompose_prior, MniwPrior};
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
    fn posterior_df_adds_subject_counts() {
        // n_j = 10 with f_{j0} = -2 gives f_j = 8.
        let n = 10;
        let y = DMatrix::from_fn(n, 2, |i, j| {
            (i as f64 * 1.3 + j as f64 * 0.7).sin() * 2.0 + i as f64 * 0.1
        });
        let data = dataset(y.clone(), vec![vec![true, true]; n]);
        let arr = arrange_monotone(&data);
        let decomp = decompose_prior(&MniwPrior::jeffreys(2, 1), 2, 1).unwrap();
        assert_eq!(decomp.per_visit[0].df(), -2.0);
        let post = mda_posterior(&decomp, &arr, &data, &y, false).unwrap();
        assert_eq!(post.per_visit[0].df(), 8.0);
    }

    #[test]
    fn single_row_gram_is_the_outer_product() {
        let y = DMatrix::from_row_slice(1, 2, &[2.0, -1.0]);
        let data = dataset(y.clone(), vec![vec![true, true]]);
        let arr = arrange_monotone(&data);
        let grams = visit_gram_matrices(&data, &arr, &y);
        // Row for visit 2: (1, 2, -1); gram = z z'.
        let z = DVector::from_vec(vec![1.0, 2.0, -1.0]);
        let expect = &z * z.transpose();
        assert_relative_eq!(grams[1], expect, epsilon = 1e-12);
        assert_eq!(grams[0].nrows(), 2);
    }

    #[test]
    fn collinear_design_is_improper_without_ridge() {
        // y2 is an exact multiple of y1, so the visit-2 design
        // (intercept, y1, y2) is rank deficient.
        let n = 6;
        let y = DMatrix::from_fn(n, 2, |i, j| (i as f64 + 1.0) * (j as f64 + 1.0));
        let data = dataset(y.clone(), vec![vec![true, true]; n]);
        let arr = arrange_monotone(&data);
        let decomp = decompose_prior(&MniwPrior::jeffreys(2, 1), 2, 1).unwrap();
        let err = mda_posterior(&decomp, &arr, &data, &y, false);
        assert!(matches!(err, Err(Error::ImproperPosterior { visit: 2, .. })));
        // Ridge repairs it.
        assert!(mda_posterior(&decomp, &arr, &data, &y, true).is_ok());
    }

    #[test]
    fn gamma_posterior_mean_and_independence() {
        // D_j = I, f_j realized via synthetic counts: check E[gamma] = f and
        // cross-visit independence of draws.
        let params = vec![
            NormalGammaParams::new(6.0, DMatrix::identity(2, 2)).unwrap(),
            NormalGammaParams::new(6.0, DMatrix::identity(3, 3)).unwrap(),
        ];
        let post = NgPosteriorSet {
            per_visit: params,
            q: 1,
            counts: vec![2, 2],
        };
        let mut rng = stream_rng(3, Stream::Simulation(9));
        let n = 100_000;
        let (mut s1, mut s2, mut s11, mut s22, mut s12) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for _ in 0..n {
            let st = sample_seq_reg(&post, SampleMode::Joint, &mut rng).unwrap();
            let (g1, g2) = (st.gamma(0), st.gamma(1));
            s1 += g1;
            s2 += g2;
            s11 += g1 * g1;
            s22 += g2 * g2;
            s12 += g1 * g2;
        }
        let nf = n as f64;
        let (m1, m2) = (s1 / nf, s2 / nf);
        let v1 = s11 / nf - m1 * m1;
        let v2 = s22 / nf - m2 * m2;
        let corr = (s12 / nf - m1 * m2) / (v1 * v2).sqrt();
        let se = (v1 / nf).sqrt();
        assert!((m1 - 6.0).abs() < 3.0 * se, "E[gamma_1] = {m1}");
        assert!(corr.abs() < 3.0 / nf.sqrt() * 1.5, "corr = {corr}");
    }

    #[test]
    fn joint_and_marginal_modes_agree_in_law() {
        let d = DMatrix::from_row_slice(
            3,
            3,
            &[3.0, 0.8, 0.4, 0.8, 2.0, 0.3, 0.4, 0.3, 1.5],
        );
        let post = NgPosteriorSet {
            per_visit: vec![NormalGammaParams::new(7.0, d).unwrap()],
            q: 2,
            counts: vec![7],
        };
        let n = 120_000;
        let run = |mode: SampleMode, seed: u64| {
            let mut rng = stream_rng(seed, Stream::Simulation(10));
            let mut acc = [0.0_f64; 3];
            let mut acc2 = [0.0_f64; 3];
            for _ in 0..n {
                let st = sample_seq_reg(&post, mode, &mut rng).unwrap();
                let v = [st.theta(0)[0], st.theta(0)[1], st.gamma(0)];
                for k in 0..3 {
                    acc[k] += v[k];
                    acc2[k] += v[k] * v[k];
                }
            }
            let nf = n as f64;
            let means: Vec<f64> = acc.iter().map(|s| s / nf).collect();
            let vars: Vec<f64> = (0..3)
                .map(|k| acc2[k] / nf - means[k] * means[k])
                .collect();
            (means, vars)
        };
        let (mj, vj) = run(SampleMode::Joint, 21);
        let (mm, vm) = run(SampleMode::MarginalThenConditional, 22);
        for k in 0..3 {
            let se = ((vj[k] + vm[k]) / n as f64).sqrt();
            assert!(
                (mj[k] - mm[k]).abs() < 3.0 * se,
                "component {k}: {} vs {}",
                mj[k],
                mm[k]
            );
        }
    }

    #[test]
    fn state_geometry_matches_ldl_of_sigma() {
        // Build a state, reconstruct sigma, re-decompose, and compare.
        let theta = vec![
            DVector::from_vec(vec![0.4]),
            DVector::from_vec(vec![-0.2, 0.5]),
            DVector::from_vec(vec![0.1, -0.3, 0.8]),
        ];
        let state = SeqRegState::new(theta, vec![1.0, 4.0 / 3.0, 2.0], 1).unwrap();
        let sigma = state.sigma();
        let f = crate::dist::ldl_decompose(&sigma).unwrap();
        for j in 0..3 {
            assert_relative_eq!(f.gammas()[j], state.gamma(j), epsilon = 1e-10);
            for k in 0..j {
                assert_relative_eq!(f.beta(j, k), state.beta(j, k), epsilon = 1e-10);
            }
        }
        // Matrix-free diagonals agree with the dense ones.
        let d = state.diag_sigma();
        let inv = sigma.clone().try_inverse().unwrap();
        let sinv = state.sigma_inv_diag();
        for j in 0..3 {
            assert_relative_eq!(d[j], sigma[(j, j)], epsilon = 1e-10);
            assert_relative_eq!(sinv[j], inv[(j, j)], epsilon = 1e-8);
        }
    }
}
