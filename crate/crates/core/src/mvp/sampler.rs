//! The parameter-expanded monotone-data Gibbs sampler for binary and
//! ordinal outcomes.
//!
//! One iteration: (1) draw the sequential-regression parameters from the
//! monotone-data posterior of the latent outcomes, treating them as
//! continuous data; (2) draw the free cutoffs from their truncated normal
//! (ordinal only); (3) refresh the latent outcomes with one decorrelating
//! Gibbs sweep per subject, warm-started from the previous iteration;
//! (4) draw expansion rescale factors `d*_j = sigma^{jj} / chi^2_{nu0}` and
//! (5) carry them through the parameters, cutoffs, and latent columns.
//! Identified draws (correlation matrix, restricted coefficients and
//! cutoffs) are collected between steps (3) and (4).

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution};

use crate::data::{arrange_monotone, LongitudinalDataset, MonotoneArrangement};
use crate::dist::{
    cholesky_lower, norm_quantile, truncated_mvn_gibbs_sweep, univariate_truncated_normal,
    TruncationBox, CHOL_REL_TOL,
};
use crate::error::Error;
use crate::imh::{imh_update_joint, imh_update_marginal, imh_update_sequential, CutoffMode,
    GeneralPrior, ImhMode, ImhStats};
use crate::mmrm::{
    decompose_prior, mda_posterior, sample_seq_reg, ChainConfig, MniwPrior, ParamSnapshot,
    SampleMode, SeqRegState,
};
use crate::mvp::state::{CutoffNormalPrior, CutoffSet, MvpPrior, MvpState};
use crate::rng::RunRng;
use crate::Result;

/// How the latent outcomes are initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LatentInit {
    /// Truncated standard normals on the category intervals (identity
    /// correlation); the default.
    #[default]
    TruncatedStandard,
    /// Sequential interval probit fits on the observed categories supply
    /// the latent means.
    ProbitRegression,
}

/// Regression-step sampler selection for the categorical chain.
#[derive(Debug, Clone)]
pub enum MvpSampler<'a> {
    Gibbs,
    Imh {
        prior: &'a GeneralPrior,
        mode: ImhMode,
    },
}

/// One retained draw on the identified (restricted) scale.
#[derive(Debug, Clone)]
pub struct MvpDraw {
    /// Restricted-scale coefficients, `p x q`.
    pub alpha: DMatrix<f64>,
    /// Correlation matrix.
    pub corr: DMatrix<f64>,
    /// Expanded-scale sequential precisions.
    pub gamma: DVector<f64>,
    /// Restricted-scale cutoffs, `p x (K-1)`.
    pub cutoffs: DMatrix<f64>,
    /// Expansion diagonal at collection time.
    pub diag: DVector<f64>,
}

/// Output of a categorical chain.
#[derive(Debug, Clone)]
pub struct MvpChain {
    pub draws: Vec<MvpDraw>,
    pub snapshots: Vec<ParamSnapshot>,
    /// Acceptance bookkeeping when an iMH mode ran the regression step.
    pub acceptance: Option<ImhStats>,
}

/// Initialize cutoffs at standard-normal quantiles of the per-visit
/// category frequencies (shifted so the first cutoff sits at zero) and
/// draw latent values from the induced truncated standard normals.
pub fn init_latent(
    data: &LongitudinalDataset,
    init: LatentInit,
    rng: &mut RunRng,
) -> Result<MvpState> {
    let k = data.kind().categories();
    if k < 2 {
        return Err(Error::invalid("latent initialization needs categorical outcomes"));
    }
    let p = data.n_visits();
    let n = data.n_subjects();
    let cutoffs = quantile_cutoffs(data)?;
    let mut latent = DMatrix::from_element(n, p, f64::NAN);

    // Optional probit-based latent means; zero means otherwise.
    let means = match init {
        LatentInit::TruncatedStandard => DMatrix::zeros(n, p),
        LatentInit::ProbitRegression => probit_latent_means(data, &cutoffs),
    };
    for i in 0..n {
        for j in 0..data.pattern(i) {
            let (lo, hi) = match data.category(i, j) {
                Some(cat) => cutoffs.interval(j, cat),
                None => (f64::NEG_INFINITY, f64::INFINITY),
            };
            latent[(i, j)] = univariate_truncated_normal(means[(i, j)], 1.0, lo, hi, rng)?;
        }
    }
    let trivial = SeqRegState::new(
        (0..p).map(|j| DVector::zeros(data.n_covariates() + j)).collect(),
        vec![1.0; p],
        data.n_covariates(),
    )?;
    Ok(MvpState {
        seq: trivial,
        cutoffs,
        latent,
        diag: DVector::from_element(p, 1.0),
    })
}

/// Standard-normal quantile cutoffs from per-visit category frequencies,
/// shifted so the first cutoff is exactly zero.
fn quantile_cutoffs(data: &LongitudinalDataset) -> Result<CutoffSet> {
    let k = data.kind().categories();
    let p = data.n_visits();
    if k == 2 {
        // Only the fixed zero cutoff exists; still warn on empty categories.
        warn_empty_categories(data);
        return Ok(CutoffSet::binary(p));
    }
    warn_empty_categories(data);
    let mut c = DMatrix::zeros(p, k - 1);
    for j in 0..p {
        let mut counts = vec![0usize; k];
        let mut total = 0usize;
        for i in 0..data.n_subjects() {
            if let Some(cat) = data.category(i, j) {
                counts[cat - 1] += 1;
                total += 1;
            }
        }
        let tf = (total.max(1)) as f64;
        let clamp = 1.0 / (2.0 * tf + 2.0);
        let mut cum = 0.0;
        let mut quantiles = Vec::with_capacity(k - 1);
        for cat in 0..(k - 1) {
            cum += counts[cat] as f64 / tf.max(1.0);
            let q = norm_quantile(cum.clamp(clamp, 1.0 - clamp));
            quantiles.push(q);
        }
        let shift = quantiles[0];
        c[(j, 0)] = 0.0;
        for t in 1..(k - 1) {
            let v = quantiles[t] - shift;
            // Enforce strict ordering even with empty categories.
            let prev = c[(j, t - 1)];
            c[(j, t)] = if v > prev { v } else { prev + 1e-6 };
        }
    }
    CutoffSet::new(c, k)
}

fn warn_empty_categories(data: &LongitudinalDataset) {
    let k = data.kind().categories();
    for j in 0..data.n_visits() {
        for cat in 1..=k {
            let seen = (0..data.n_subjects()).any(|i| data.category(i, j) == Some(cat));
            if !seen {
                log::warn!(
                    "category {cat} never observed at visit {}; its cutoff bounds are infinite",
                    j + 1
                );
            }
        }
    }
}

/// Latent means from sequential interval-probit fits of each visit on the
/// covariates and the observed category codes of earlier visits, with the
/// cutoffs held at their quantile initialization. A small ridge keeps the
/// Newton steps defined under separation.
fn probit_latent_means(data: &LongitudinalDataset, cutoffs: &CutoffSet) -> DMatrix<f64> {
    let n = data.n_subjects();
    let p = data.n_visits();
    let q = data.n_covariates();
    let mut means = DMatrix::zeros(n, p);
    for j in 0..p {
        let dim = q + j;
        let rows: Vec<usize> = (0..n)
            .filter(|&i| {
                data.category(i, j).is_some() && (0..j).all(|l| data.category(i, l).is_some())
            })
            .collect();
        if rows.len() < dim + 2 {
            continue;
        }
        let design = |i: usize| {
            DVector::from_fn(dim, |c, _| {
                if c < q {
                    data.covariates()[(i, c)]
                } else {
                    data.outcomes()[(i, c - q)]
                }
            })
        };
        let mut coef = DVector::zeros(dim);
        for _ in 0..25 {
            let mut grad = DVector::zeros(dim);
            let mut hess = DMatrix::from_diagonal_element(dim, dim, 1e-4);
            for &i in &rows {
                let x = design(i);
                let eta = coef.dot(&x);
                let cat = data.category(i, j).unwrap();
                let (lo, hi) = cutoffs.interval(j, cat);
                let (g, w) = interval_probit_terms(lo - eta, hi - eta);
                grad.axpy(g, &x, 1.0);
                for a in 0..dim {
                    for b in 0..dim {
                        hess[(a, b)] += w * x[a] * x[b];
                    }
                }
            }
            let Ok(chol) = cholesky_lower(&hess, CHOL_REL_TOL) else { break };
            let mut step = grad;
            for r in 0..dim {
                for s in 0..r {
                    let v = step[s];
                    step[r] -= chol[(r, s)] * v;
                }
                step[r] /= chol[(r, r)];
            }
            for r in (0..dim).rev() {
                for s in (r + 1)..dim {
                    let v = step[s];
                    step[r] -= chol[(s, r)] * v;
                }
                step[r] /= chol[(r, r)];
            }
            let move_size = step.amax();
            coef += step;
            if move_size < 1e-8 {
                break;
            }
        }
        for i in 0..n {
            if data.pattern(i) > j && (0..j).all(|l| data.category(i, l).is_some()) {
                means[(i, j)] = coef.dot(&design(i));
            }
        }
    }
    means
}

/// Score and negative curvature of a standard-normal interval likelihood
/// `log(Phi(b) - Phi(a))` with respect to the linear predictor.
fn interval_probit_terms(a: f64, b: f64) -> (f64, f64) {
    use crate::dist::{norm_cdf, norm_sf, std_normal_pdf};
    let mass = if a > 0.0 {
        norm_sf(a) - norm_sf(b)
    } else {
        norm_cdf(b) - norm_cdf(a)
    };
    let mass = mass.max(1e-300);
    let pa = if a.is_finite() { std_normal_pdf(a) } else { 0.0 };
    let pb = if b.is_finite() { std_normal_pdf(b) } else { 0.0 };
    let apa = if a.is_finite() { a * pa } else { 0.0 };
    let bpb = if b.is_finite() { b * pb } else { 0.0 };
    let score = (pa - pb) / mass;
    let curvature = score * score - (apa - bpb) / mass;
    (score, curvature.max(1e-6))
}

/// Cutoff bounds from the latent values: the largest latent in category `k`
/// and the smallest in category `k + 1` at visit `j` (0-based visit,
/// 1-based category). Missing outcomes do not constrain the cutoff.
pub fn cutoff_bounds(
    latent: &DMatrix<f64>,
    data: &LongitudinalDataset,
    j: usize,
    k: usize,
) -> (f64, f64) {
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    for i in 0..data.n_subjects() {
        match data.category(i, j) {
            Some(cat) if cat == k => lo = lo.max(latent[(i, j)]),
            Some(cat) if cat == k + 1 => hi = hi.min(latent[(i, j)]),
            _ => {}
        }
    }
    (lo, hi)
}

/// How the free cutoffs are drawn each iteration.
#[derive(Debug, Clone)]
pub enum CutoffStep {
    /// No free cutoffs (binary outcomes).
    None,
    /// Truncated normal around the prior, expanded by the current `d_j`.
    Normal(CutoffNormalPrior),
    /// Uniform over the data bounds (flat prior; iMH chains only).
    Flat,
}

/// Draw the free cutoffs `c_{j,2}..c_{j,K-1}` for every visit with one
/// Gibbs sweep per visit. The latent bounds keep the ordering constraint
/// satisfied automatically when every category is occupied; adjacency
/// bounds keep it satisfied even when some are empty.
pub fn sample_cutoffs(
    state: &mut MvpState,
    step: &CutoffStep,
    data: &LongitudinalDataset,
    rng: &mut RunRng,
) -> Result<()> {
    let k = state.cutoffs.categories();
    if k <= 2 {
        return Ok(());
    }
    let free = k - 2;
    let p = data.n_visits();
    for j in 0..p {
        // Data bounds for each free cutoff index (category t + 2).
        let bounds: Vec<(f64, f64)> = (2..k)
            .map(|cat| cutoff_bounds(&state.latent, data, j, cat))
            .collect();
        match step {
            CutoffStep::None => unreachable!("free cutoffs exist"),
            CutoffStep::Flat => {
                for t in 0..free {
                    let lo = bounds[t].0.max(state.cutoffs.value(j, t + 1));
                    let hi = bounds[t].1.min(state.cutoffs.value(j, t + 3));
                    if !lo.is_finite() || !hi.is_finite() {
                        return Err(Error::PreconditionViolated(format!(
                            "flat cutoff prior needs occupied adjacent categories (visit {}, cutoff {})",
                            j + 1,
                            t + 2
                        )));
                    }
                    if !(lo < hi) {
                        continue;
                    }
                    let v = lo + (hi - lo) * rng.gen::<f64>();
                    state.cutoffs.set_free(j, &collect_free(&state.cutoffs, j, t, v));
                }
            }
            CutoffStep::Normal(prior) => {
                let dj = state.diag[j];
                let mean = &prior.mean[j];
                let cov = &prior.cov[j];
                // Prior precision on the expanded scale: (d_j V)^{-1}.
                let chol = cholesky_lower(&(cov * dj), CHOL_REL_TOL)?;
                let prec = precision_from_chol(&chol);
                for t in 0..free {
                    let m_t = dj.sqrt() * mean[t];
                    let var_t = 1.0 / prec[(t, t)];
                    let mut adj = 0.0;
                    for s in 0..free {
                        if s != t {
                            let c_s = state.cutoffs.value(j, s + 2);
                            adj += prec[(t, s)] * (c_s - dj.sqrt() * mean[s]);
                        }
                    }
                    let cond_mean = m_t - var_t * adj;
                    let lo = bounds[t].0.max(state.cutoffs.value(j, t + 1));
                    let hi = bounds[t].1.min(state.cutoffs.value(j, t + 3));
                    if !(lo < hi) {
                        continue;
                    }
                    let v = univariate_truncated_normal(cond_mean, var_t, lo, hi, rng)?;
                    state.cutoffs.set_free(j, &collect_free(&state.cutoffs, j, t, v));
                }
            }
        }
    }
    Ok(())
}

fn collect_free(cutoffs: &CutoffSet, j: usize, replace_t: usize, value: f64) -> Vec<f64> {
    let free = cutoffs.categories() - 2;
    (0..free)
        .map(|t| if t == replace_t { value } else { cutoffs.value(j, t + 2) })
        .collect()
}

fn precision_from_chol(chol: &DMatrix<f64>) -> DMatrix<f64> {
    let n = chol.nrows();
    // Invert the lower factor, then P = L^{-T} L^{-1}.
    let mut linv = DMatrix::<f64>::identity(n, n);
    for col in 0..n {
        for i in 0..n {
            let mut s = linv[(i, col)];
            for k in 0..i {
                s -= chol[(i, k)] * linv[(k, col)];
            }
            linv[(i, col)] = s / chol[(i, i)];
        }
    }
    linv.transpose() * linv
}

/// One decorrelating Gibbs sweep per subject over the latent monotone
/// outcomes, targeting the box-truncated normal implied by the current
/// parameters and cutoffs. The previous latent values are the warm start.
pub fn sample_latent(
    state: &mut MvpState,
    data: &LongitudinalDataset,
    rng: &mut RunRng,
) -> Result<()> {
    let sigma = state.seq.sigma();
    let chol = cholesky_lower(&sigma, CHOL_REL_TOL)?;
    let alpha = state.seq.alpha();
    let q = data.n_covariates();
    for i in 0..data.n_subjects() {
        let s = data.pattern(i);
        if s == 0 {
            continue;
        }
        let x_row = DVector::from_fn(q, |c, _| data.covariates()[(i, c)]);
        let mean_full = &alpha * &x_row;
        let mean = DVector::from_fn(s, |j, _| mean_full[j]);
        let chol_s = DMatrix::from(chol.view((0, 0), (s, s)));
        let mut lower = DVector::zeros(s);
        let mut upper = DVector::zeros(s);
        for j in 0..s {
            let (lo, hi) = match data.category(i, j) {
                Some(cat) => state.cutoffs.interval(j, cat),
                None => (f64::NEG_INFINITY, f64::INFINITY),
            };
            lower[j] = lo;
            upper[j] = hi;
        }
        let box_ = TruncationBox::new(lower, upper)?;
        let current = DVector::from_fn(s, |j, _| state.latent[(i, j)]);
        let updated = truncated_mvn_gibbs_sweep(&mean, &chol_s, &box_, &current, 1, rng)?;
        for j in 0..s {
            state.latent[(i, j)] = updated[j];
        }
    }
    Ok(())
}

/// Expansion rescale factors `d*_j = sigma^{jj} / kappa_j` with
/// `kappa_j ~ chi^2_{nu0}`, using the inversion-free precision diagonal.
pub fn px_rescale_factors(state: &MvpState, nu0: f64, rng: &mut RunRng) -> Result<Vec<f64>> {
    if !(nu0 > 0.0) {
        return Err(Error::invalid("expansion degrees of freedom must be positive"));
    }
    let sjj = state.seq.sigma_inv_diag();
    let chi = ChiSquared::new(nu0).map_err(|_| Error::invalid("bad chi-square df"))?;
    Ok((0..state.seq.n_visits())
        .map(|j| sjj[j] / chi.sample(rng))
        .collect())
}

/// Carry the expansion factors through every scale-bearing quantity:
/// coefficients, lag coefficients, precisions, cutoffs, latent columns, and
/// the tracked covariance diagonal. The identified correlation matrix and
/// the latent category memberships are invariant.
pub fn apply_px_transform(state: &mut MvpState, factors: &[f64]) -> Result<()> {
    if factors.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
        return Err(Error::invalid("expansion factors must be positive and finite"));
    }
    state.seq.rescale(factors)?;
    let p = state.seq.n_visits();
    for j in 0..p {
        let root = factors[j].sqrt();
        state.cutoffs.scale_visit(j, root);
        for i in 0..state.latent.nrows() {
            if !state.latent[(i, j)].is_nan() {
                state.latent[(i, j)] *= root;
            }
        }
        state.diag[j] *= factors[j];
    }
    Ok(())
}

/// One full Gibbs iteration (steps 1-5) against the conjugate prior.
pub fn mvp_gibbs_iteration(
    state: &mut MvpState,
    data: &LongitudinalDataset,
    prior: &MvpPrior,
    rng: &mut RunRng,
) -> Result<()> {
    let arrangement = arrange_monotone(data);
    let p = data.n_visits();
    let q = data.n_covariates();
    let mniw = MniwPrior::new(
        DMatrix::identity(p, p),
        prior.nu0,
        DMatrix::zeros(q, p),
        prior.m.clone(),
    )?;
    let decomp = decompose_prior(&mniw, p, q)?;
    let cutoff_step = if data.kind().categories() > 2 {
        CutoffStep::Normal(prior.cutoff_prior.clone())
    } else {
        CutoffStep::None
    };
    let posterior = mda_posterior(&decomp, &arrangement, data, &state.latent, false)?;
    state.seq = sample_seq_reg(&posterior, SampleMode::Joint, rng)?;
    state.refresh_diag();
    if !matches!(cutoff_step, CutoffStep::None) {
        sample_cutoffs(state, &cutoff_step, data, rng)?;
    }
    sample_latent(state, data, rng)?;
    let factors = px_rescale_factors(state, prior.nu0, rng)?;
    apply_px_transform(state, &factors)
}

/// Run a categorical chain with the requested regression-step sampler.
pub fn run_mvp_chain(
    data: &LongitudinalDataset,
    prior: &MvpPrior,
    config: &ChainConfig,
    init: LatentInit,
    sampler: MvpSampler<'_>,
    snapshot_count: usize,
    rng: &mut RunRng,
) -> Result<MvpChain> {
    config.validate()?;
    let p = data.n_visits();
    let q = data.n_covariates();
    let categories = data.kind().categories();
    if categories < 2 {
        return Err(Error::invalid("categorical chain needs binary or ordinal outcomes"));
    }

    // Resolve the effective conjugate machinery and cutoff step.
    let (nu0, m, cutoff_step) = match &sampler {
        MvpSampler::Gibbs => {
            prior.validate(p, q, categories)?;
            let step = if categories > 2 {
                CutoffStep::Normal(prior.cutoff_prior.clone())
            } else {
                CutoffStep::None
            };
            (prior.nu0, prior.m.clone(), step)
        }
        MvpSampler::Imh { prior: gp, .. } => {
            let step = if categories > 2 {
                match gp.cutoff_mode {
                    CutoffMode::Flat => CutoffStep::Flat,
                    CutoffMode::Normal => CutoffStep::Normal(
                        gp.cutoff_normal
                            .clone()
                            .unwrap_or_else(|| CutoffNormalPrior::diffuse(p, categories)),
                    ),
                }
            } else {
                CutoffStep::None
            };
            (gp.nu0, gp.m.clone(), step)
        }
    };

    let arrangement = arrange_monotone(data);
    let mut alpha_star0 = DMatrix::zeros(q, p);
    let mut decomp = {
        let mniw = MniwPrior::new(DMatrix::identity(p, p), nu0, alpha_star0.clone(), m.clone())?;
        decompose_prior(&mniw, p, q)?
    };

    let mut state = init_latent(data, init, rng)?;
    // A first conjugate draw gives the chain a valid regression state.
    let posterior0 = mda_posterior(&decomp, &arrangement, data, &state.latent, config.ridge)?;
    state.seq = sample_seq_reg(&posterior0, SampleMode::Joint, rng)?;
    state.refresh_diag();

    let snap_at = crate::mmrm::snapshot_indices(config.retained(), snapshot_count)?;
    let mut draws = Vec::with_capacity(config.retained());
    let mut snapshots = Vec::with_capacity(snapshot_count);
    let mut stats = ImhStats::new(p);
    let mut alpha_running = DMatrix::zeros(p, q);
    let mut running_count = 0usize;

    for iter in 1..=config.iterations {
        // Step 1: regression parameters given the latent monotone data.
        let posterior = mda_posterior(&decomp, &arrangement, data, &state.latent, config.ridge)?;
        match &sampler {
            MvpSampler::Gibbs => {
                state.seq = sample_seq_reg(&posterior, SampleMode::Joint, rng)?;
            }
            MvpSampler::Imh { prior: gp, mode } => {
                match mode {
                    ImhMode::Joint => {
                        imh_update_joint(
                            &mut state.seq,
                            &posterior,
                            gp,
                            &alpha_star0,
                            categories,
                            &mut stats,
                            rng,
                        )?;
                    }
                    ImhMode::Sequential => {
                        imh_update_sequential(
                            &mut state.seq,
                            &posterior,
                            gp,
                            &alpha_star0,
                            categories,
                            &mut stats,
                            rng,
                        )?;
                    }
                    ImhMode::Marginal => {
                        imh_update_marginal(
                            &mut state.seq,
                            &posterior,
                            gp,
                            &alpha_star0,
                            categories,
                            &mut stats,
                            rng,
                        )?;
                    }
                }
                // Optional one-time re-centering of the proposal mean at the
                // running coefficient mean.
                alpha_running += state.seq.alpha();
                running_count += 1;
                if gp.recenter_after == Some(iter) {
                    let mean = &alpha_running / running_count as f64;
                    alpha_star0 = mean.transpose();
                    for (k, flat_row) in flat_rows(&m).iter().enumerate() {
                        if *flat_row {
                            for j in 0..p {
                                alpha_star0[(k, j)] = 0.0;
                            }
                        }
                    }
                    let mniw = MniwPrior::new(
                        DMatrix::identity(p, p),
                        nu0,
                        alpha_star0.clone(),
                        m.clone(),
                    )?;
                    decomp = decompose_prior(&mniw, p, q)?;
                }
            }
        }
        state.refresh_diag();

        // Step 2: cutoffs (ordinal only).
        if !matches!(cutoff_step, CutoffStep::None) {
            sample_cutoffs(&mut state, &cutoff_step, data, rng)?;
        }

        // Step 3: latent outcomes.
        sample_latent(&mut state, data, rng)?;

        // Collect identified draws before the expansion step.
        if config.is_retained(iter) {
            let retained_index = draws.len();
            if snap_at.contains(&retained_index) {
                snapshots.push(ParamSnapshot {
                    alpha: state.seq.alpha(),
                    sigma: state.seq.sigma(),
                    filled: state.latent.clone(),
                    cutoffs: Some(state.cutoffs.matrix().clone()),
                    retained_index,
                });
            }
            draws.push(MvpDraw {
                alpha: state.alpha_restricted(),
                corr: state.correlation(),
                gamma: DVector::from_column_slice(state.seq.gammas()),
                cutoffs: state.cutoffs_restricted(),
                diag: state.diag.clone(),
            });
        }

        // Steps 4-5: expansion rescale.
        let factors = px_rescale_factors(&state, nu0, rng)?;
        apply_px_transform(&mut state, &factors)?;
    }
    let acceptance = match sampler {
        MvpSampler::Gibbs => None,
        MvpSampler::Imh { .. } => Some(stats),
    };
    Ok(MvpChain {
        draws,
        snapshots,
        acceptance,
    })
}

fn flat_rows(m: &DMatrix<f64>) -> Vec<bool> {
    (0..m.nrows())
        .map(|k| (0..m.ncols()).all(|c| m[(k, c)] == 0.0 && m[(c, k)] == 0.0))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::OutcomeKind;
    use crate::rng::{stream_rng, Stream};
    use approx::assert_relative_eq;

    fn binary_dataset(n: usize, p: usize, seed: u64) -> LongitudinalDataset {
        let mut rng = stream_rng(seed, Stream::Simulation(50));
        let x = DMatrix::from_fn(n, 2, |_, c| {
            if c == 0 {
                1.0
            } else {
                rng.gen::<f64>() * 2.0 - 1.0
            }
        });
        let y = DMatrix::from_fn(n, p, |_, _| if rng.gen::<f64>() < 0.5 { 1.0 } else { 2.0 });
        let observed = (0..n)
            .map(|_| (0..p).map(|j| j == 0 || rng.gen::<f64>() > 0.2).collect())
            .collect();
        LongitudinalDataset::new(
            (0..n).map(|i| format!("s{i}")).collect(),
            (0..n).map(|i| if i % 2 == 0 { "a".into() } else { "b".into() }).collect(),
            x,
            y,
            observed,
            OutcomeKind::Binary,
            vec!["x1".into(), "x2".into()],
        )
        .unwrap()
    }

    #[test]
    fn initial_latent_respects_binary_signs() {
        let data = binary_dataset(40, 3, 1);
        let mut rng = stream_rng(2, Stream::Chain(0));
        let state = init_latent(&data, LatentInit::TruncatedStandard, &mut rng).unwrap();
        for i in 0..data.n_subjects() {
            for j in 0..data.pattern(i) {
                match data.category(i, j) {
                    Some(1) => assert!(state.latent[(i, j)] < 0.0),
                    Some(2) => assert!(state.latent[(i, j)] > 0.0),
                    _ => assert!(state.latent[(i, j)].is_finite()),
                }
            }
        }
    }

    #[test]
    fn quantile_rule_matches_frequencies() {
        // K = 3 with frequencies (0.5, 0.3, 0.2): second cutoff at
        // Phi^{-1}(0.8) because the first quantile is already zero.
        let n = 10;
        let mut cats = vec![1.0; 5];
        cats.extend(vec![2.0; 3]);
        cats.extend(vec![3.0; 2]);
        let y = DMatrix::from_fn(n, 1, |i, _| cats[i]);
        let data = LongitudinalDataset::new(
            (0..n).map(|i| format!("s{i}")).collect(),
            vec!["a".into(); n],
            DMatrix::from_element(n, 1, 1.0),
            y,
            vec![vec![true]; n],
            OutcomeKind::Ordinal { categories: 3 },
            vec!["x1".into()],
        )
        .unwrap();
        let cutoffs = quantile_cutoffs(&data).unwrap();
        // The clamp nudges the cumulative fractions slightly at small n; the
        // quantile of 0.8 is recovered to that resolution.
        assert_relative_eq!(cutoffs.value(0, 2), norm_quantile(0.8), epsilon = 1e-6);
    }

    #[test]
    fn cutoff_bounds_come_from_adjacent_categories_only() {
        let n = 4;
        let y = DMatrix::from_fn(n, 1, |i, _| [2.0, 2.0, 3.0, 1.0][i]);
        let observed = vec![vec![true], vec![true], vec![true], vec![false]];
        let data = LongitudinalDataset::new(
            (0..n).map(|i| format!("s{i}")).collect(),
            vec!["a".into(); n],
            DMatrix::from_element(n, 1, 1.0),
            y,
            observed,
            OutcomeKind::Ordinal { categories: 3 },
            vec!["x1".into()],
        )
        .unwrap();
        let mut latent = DMatrix::from_element(n, 1, f64::NAN);
        latent[(0, 0)] = 0.3;
        latent[(1, 0)] = 0.7;
        latent[(2, 0)] = 1.1;
        latent[(3, 0)] = 0.9; // missing outcome; must not matter
        let (lo, hi) = cutoff_bounds(&latent, &data, 0, 2);
        assert_eq!((lo, hi), (0.7, 1.1));
    }

    #[test]
    fn diffuse_prior_cutoff_draw_is_nearly_uniform() {
        // With a huge prior variance the truncated normal over (0.7, 1.1)
        // is flat; the mean should approach the midpoint 0.9.
        let n = 3;
        let y = DMatrix::from_fn(n, 1, |i, _| [2.0, 2.0, 3.0][i]);
        let data = LongitudinalDataset::new(
            (0..n).map(|i| format!("s{i}")).collect(),
            vec!["a".into(); n],
            DMatrix::from_element(n, 1, 1.0),
            y,
            vec![vec![true]; n],
            OutcomeKind::Ordinal { categories: 3 },
            vec!["x1".into()],
        )
        .unwrap();
        let mut rng = stream_rng(3, Stream::Chain(1));
        let mut state = init_latent(&data, LatentInit::TruncatedStandard, &mut rng).unwrap();
        state.latent[(0, 0)] = 0.3;
        state.latent[(1, 0)] = 0.7;
        state.latent[(2, 0)] = 1.1;
        state.cutoffs.set_free(0, &[0.9]);
        let step = CutoffStep::Normal(CutoffNormalPrior {
            mean: vec![DVector::zeros(1)],
            cov: vec![DMatrix::from_element(1, 1, 1e8)],
        });
        let reps = 40_000;
        let mut acc = 0.0;
        for _ in 0..reps {
            sample_cutoffs(&mut state, &step, &data, &mut rng).unwrap();
            let c = state.cutoffs.value(0, 2);
            assert!(c > 0.7 && c < 1.1);
            acc += c;
        }
        let mean = acc / reps as f64;
        // Uniform(0.7, 1.1) has sd 0.4/sqrt(12).
        let se = 0.4 / (12.0_f64).sqrt() / (reps as f64).sqrt();
        assert!((mean - 0.9).abs() < 4.0 * se, "mean {mean}");
    }

    #[test]
    fn informative_cutoff_draw_matches_quadrature() {
        let n = 3;
        let y = DMatrix::from_fn(n, 1, |i, _| [2.0, 2.0, 3.0][i]);
        let data = LongitudinalDataset::new(
            (0..n).map(|i| format!("s{i}")).collect(),
            vec!["a".into(); n],
            DMatrix::from_element(n, 1, 1.0),
            y,
            vec![vec![true]; n],
            OutcomeKind::Ordinal { categories: 3 },
            vec!["x1".into()],
        )
        .unwrap();
        let mut rng = stream_rng(4, Stream::Chain(2));
        let mut state = init_latent(&data, LatentInit::TruncatedStandard, &mut rng).unwrap();
        state.latent[(0, 0)] = 0.2;
        state.latent[(1, 0)] = 0.6;
        state.latent[(2, 0)] = 1.4;
        state.cutoffs.set_free(0, &[1.0]);
        let (mu, var) = (0.8, 0.09);
        let step = CutoffStep::Normal(CutoffNormalPrior {
            mean: vec![DVector::from_element(1, mu)],
            cov: vec![DMatrix::from_element(1, 1, var)],
        });
        let reps = 60_000;
        let mut acc = 0.0;
        for _ in 0..reps {
            sample_cutoffs(&mut state, &step, &data, &mut rng).unwrap();
            acc += state.cutoffs.value(0, 2);
        }
        let mean = acc / reps as f64;
        // Simpson oracle over (0.6, 1.4) for N(mu, var) (d_1 = 1 here).
        let steps = 4000;
        let h = (1.4 - 0.6) / steps as f64;
        let (mut num, mut den) = (0.0, 0.0);
        for t in 0..=steps {
            let xx = 0.6 + t as f64 * h;
            let w = if t == 0 || t == steps {
                1.0
            } else if t % 2 == 1 {
                4.0
            } else {
                2.0
            };
            let dens = (-(xx - mu) * (xx - mu) / (2.0 * var)).exp();
            num += w * xx * dens;
            den += w * dens;
        }
        let expect = num / den;
        assert!((mean - expect).abs() < 0.01, "{mean} vs {expect}");
    }

    #[test]
    fn px_identity_factors_change_nothing() {
        let data = binary_dataset(30, 2, 5);
        let mut rng = stream_rng(6, Stream::Chain(3));
        let prior = MvpPrior::marginally_uniform(2, DMatrix::identity(2, 2) * 0.1, 2);
        let mut state = init_latent(&data, LatentInit::TruncatedStandard, &mut rng).unwrap();
        mvp_gibbs_iteration(&mut state, &data, &prior, &mut rng).unwrap();
        let before = state.clone();
        apply_px_transform(&mut state, &[1.0, 1.0]).unwrap();
        assert_eq!(state.seq.gammas(), before.seq.gammas());
        assert_eq!(state.cutoffs.matrix(), before.cutoffs.matrix());
        assert_eq!(state.diag, before.diag);
    }

    #[test]
    fn px_transform_preserves_correlation_and_memberships() {
        let data = binary_dataset(40, 3, 7);
        let mut rng = stream_rng(8, Stream::Chain(4));
        let prior = MvpPrior::marginally_uniform(3, DMatrix::identity(2, 2) * 0.1, 2);
        let mut state = init_latent(&data, LatentInit::TruncatedStandard, &mut rng).unwrap();
        mvp_gibbs_iteration(&mut state, &data, &prior, &mut rng).unwrap();
        let corr_before = state.correlation();
        let factors = px_rescale_factors(&state, prior.nu0, &mut rng).unwrap();
        let member_before: Vec<usize> = (0..data.n_subjects())
            .flat_map(|i| {
                (0..data.pattern(i))
                    .map(move |j| (i, j))
            })
            .map(|(i, j)| state.cutoffs.categorize(j, state.latent[(i, j)]))
            .collect();
        apply_px_transform(&mut state, &factors).unwrap();
        let corr_after = state.correlation();
        assert_relative_eq!(corr_before, corr_after, epsilon = 1e-10);
        let member_after: Vec<usize> = (0..data.n_subjects())
            .flat_map(|i| {
                (0..data.pattern(i))
                    .map(move |j| (i, j))
            })
            .map(|(i, j)| state.cutoffs.categorize(j, state.latent[(i, j)]))
            .collect();
        assert_eq!(member_before, member_after);
        // The tracked diagonal stays in lockstep with the dense one.
        let dense = state.seq.diag_sigma();
        for j in 0..3 {
            assert_relative_eq!(state.diag[j], dense[j], epsilon = 1e-10);
        }
    }

    #[test]
    fn px_factor_moments_match_inverse_chi_square() {
        // With sigma = I the factors are 1/kappa with kappa ~ chi^2_nu0, so
        // E[d*] = 1/(nu0 - 2).
        let p = 2;
        let state = MvpState {
            seq: SeqRegState::new(
                vec![DVector::zeros(1), DVector::zeros(2)],
                vec![1.0, 1.0],
                1,
            )
            .unwrap(),
            cutoffs: CutoffSet::binary(p),
            latent: DMatrix::from_element(1, p, 0.5),
            diag: DVector::from_element(p, 1.0),
        };
        let nu0 = 6.0;
        let mut rng = stream_rng(9, Stream::Chain(5));
        let reps = 100_000;
        let mut acc = 0.0;
        for _ in 0..reps {
            let f = px_rescale_factors(&state, nu0, &mut rng).unwrap();
            acc += f[0];
        }
        let mean = acc / reps as f64;
        let expect = 1.0 / (nu0 - 2.0);
        assert!((mean - expect).abs() < 0.005, "{mean} vs {expect}");
    }

    #[test]
    fn latent_sweep_keeps_values_inside_category_boxes() {
        let data = binary_dataset(50, 3, 11);
        let mut rng = stream_rng(12, Stream::Chain(6));
        let prior = MvpPrior::marginally_uniform(3, DMatrix::identity(2, 2) * 0.1, 2);
        let mut state = init_latent(&data, LatentInit::TruncatedStandard, &mut rng).unwrap();
        for _ in 0..20 {
            mvp_gibbs_iteration(&mut state, &data, &prior, &mut rng).unwrap();
            for i in 0..data.n_subjects() {
                for j in 0..data.pattern(i) {
                    if let Some(cat) = data.category(i, j) {
                        let (lo, hi) = state.cutoffs.interval(j, cat);
                        let v = state.latent[(i, j)];
                        assert!(v > lo && v <= hi, "latent {v} outside ({lo}, {hi}]");
                    }
                }
            }
        }
    }

    #[test]
    fn probit_initializer_produces_valid_state() {
        let data = binary_dataset(60, 3, 13);
        let mut rng = stream_rng(14, Stream::Chain(7));
        let state = init_latent(&data, LatentInit::ProbitRegression, &mut rng).unwrap();
        for i in 0..data.n_subjects() {
            for j in 0..data.pattern(i) {
                match data.category(i, j) {
                    Some(1) => assert!(state.latent[(i, j)] < 0.0),
                    Some(2) => assert!(state.latent[(i, j)] > 0.0),
                    _ => {}
                }
            }
        }
    }

    #[test]
    fn chain_emits_unit_diagonal_correlations_and_snapshots() {
        let data = binary_dataset(50, 3, 15);
        let prior = MvpPrior::marginally_uniform(3, DMatrix::identity(2, 2) * 0.1, 2);
        let config = ChainConfig {
            iterations: 80,
            burn_in: 30,
            thin: 1,
            ..ChainConfig::default()
        };
        let mut rng = stream_rng(16, Stream::Chain(8));
        let chain = run_mvp_chain(
            &data,
            &prior,
            &config,
            LatentInit::TruncatedStandard,
            MvpSampler::Gibbs,
            5,
            &mut rng,
        )
        .unwrap();
        assert_eq!(chain.draws.len(), config.retained());
        assert_eq!(chain.snapshots.len(), 5);
        assert!(chain.acceptance.is_none());
        for d in &chain.draws {
            for j in 0..3 {
                assert_relative_eq!(d.corr[(j, j)], 1.0, epsilon = 1e-12);
            }
        }
    }
}
