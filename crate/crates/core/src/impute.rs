//! Post-convergence dropout imputation and multiple-imputation pooling.
//!
//! Dropout cells are never touched inside the chains; once converged, each
//! selected parameter draw imputes them under one of three mechanisms:
//!
//! - MAR: a subject's post-dropout outcomes follow their own arm's
//!   conditional law given the observed history.
//! - Jump-to-reference: the marginal means switch to the reference arm's
//!   after dropout; the conditional law given history follows from the
//!   joint normal with that piecewise mean.
//! - Copy-reference: the subject's whole mean vector is the reference
//!   arm's, and the conditional law given history follows from it.
//!
//! For categorical outcomes the rules act on the latent scale and the
//! imputed category is read off the draw's cutoffs. Completed datasets
//! preserve every observed cell bitwise. Per-imputation estimates are
//! pooled with the standard combining rules.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::data::{LongitudinalDataset, OutcomeKind};
use crate::error::Error;
use crate::mmrm::{conditional_normal, conditional_normal_draw, ParamSnapshot};
use crate::mvp::CutoffSet;
use crate::rng::{stream_rng, Stream};
use crate::Result;

/// Dropout imputation mechanism.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Mechanism {
    #[serde(rename = "MAR")]
    Mar,
    #[serde(rename = "J2R")]
    JumpToReference,
    #[serde(rename = "CR")]
    CopyReference,
}

impl std::str::FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "MAR" => Ok(Mechanism::Mar),
            "J2R" => Ok(Mechanism::JumpToReference),
            "CR" => Ok(Mechanism::CopyReference),
            other => Err(Error::invalid(format!("unknown mechanism `{other}`"))),
        }
    }
}

/// What to impute and how to analyze it.
#[derive(Debug, Clone)]
pub struct ImputationSpec {
    pub mechanism: Mechanism,
    pub m_imputations: usize,
    pub reference_arm: String,
    /// Covariate column indices that encode treatment; flipped to the
    /// reference coding for the control-based mechanisms.
    pub treatment_columns: Vec<usize>,
}

impl ImputationSpec {
    pub fn validate(&self, data: &LongitudinalDataset) -> Result<()> {
        if self.m_imputations < 2 {
            return Err(Error::invalid("need at least 2 imputations"));
        }
        if !data.has_arm(&self.reference_arm) {
            return Err(Error::UnknownArm(self.reference_arm.clone()));
        }
        for &c in &self.treatment_columns {
            if c >= data.n_covariates() {
                return Err(Error::invalid(format!(
                    "treatment column index {c} out of range"
                )));
            }
        }
        Ok(())
    }

    /// The reference coding of the treatment columns, read off the
    /// reference-arm subjects (must be constant within that arm).
    pub fn reference_coding(&self, data: &LongitudinalDataset) -> Result<Vec<f64>> {
        let subjects = data.arm_subjects(&self.reference_arm);
        if subjects.is_empty() {
            return Err(Error::UnknownArm(self.reference_arm.clone()));
        }
        let mut coding = Vec::with_capacity(self.treatment_columns.len());
        for &c in &self.treatment_columns {
            let v = data.covariates()[(subjects[0], c)];
            for &i in &subjects[1..] {
                if data.covariates()[(i, c)] != v {
                    return Err(Error::data(format!(
                        "treatment column {} is not constant within the reference arm",
                        c + 1
                    )));
                }
            }
            coding.push(v);
        }
        Ok(coding)
    }
}

/// Covariate row with the treatment columns switched to the reference
/// coding.
fn reference_row(
    data: &LongitudinalDataset,
    subject: usize,
    treatment_columns: &[usize],
    coding: &[f64],
) -> DVector<f64> {
    let mut x = DVector::from_fn(data.n_covariates(), |c, _| data.covariates()[(subject, c)]);
    for (idx, &c) in treatment_columns.iter().enumerate() {
        x[c] = coding[idx];
    }
    x
}

/// Mechanism-specific mean vector over all visits for one subject.
fn mechanism_mean(
    alpha: &DMatrix<f64>,
    x_own: &DVector<f64>,
    x_ref: &DVector<f64>,
    pattern: usize,
    mechanism: Mechanism,
) -> DVector<f64> {
    let p = alpha.nrows();
    DVector::from_fn(p, |j, _| {
        let row = alpha.row(j);
        let own = row.transpose().dot(x_own);
        match mechanism {
            Mechanism::Mar => own,
            Mechanism::JumpToReference => {
                if j < pattern {
                    own
                } else {
                    row.transpose().dot(x_ref)
                }
            }
            Mechanism::CopyReference => row.transpose().dot(x_ref),
        }
    })
}

/// Conditional mean and covariance of the post-dropout outcomes given the
/// monotone history under the requested mechanism. Exposed for invariance
/// checks; `impute_dropout` draws from exactly this law.
pub fn dropout_conditional(
    snapshot: &ParamSnapshot,
    data: &LongitudinalDataset,
    spec: &ImputationSpec,
    reference_coding: &[f64],
    subject: usize,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let p = data.n_visits();
    let s = data.pattern(subject);
    if s >= p {
        return Err(Error::invalid("subject has no dropout cells"));
    }
    let x_own = DVector::from_fn(data.n_covariates(), |c, _| {
        data.covariates()[(subject, c)]
    });
    let x_ref = reference_row(data, subject, &spec.treatment_columns, reference_coding);
    let mu = mechanism_mean(&snapshot.alpha, &x_own, &x_ref, s, spec.mechanism);
    let observed: Vec<usize> = (0..s).collect();
    let missing: Vec<usize> = (s..p).collect();
    conditional_normal(&mu, &snapshot.sigma, &observed, &missing, &snapshot.filled, subject)
}

/// Impute one subject's post-dropout trajectory from one parameter draw.
/// Returns the values for visits `pattern..p` (latent scale for
/// categorical outcomes).
pub fn impute_dropout(
    snapshot: &ParamSnapshot,
    data: &LongitudinalDataset,
    spec: &ImputationSpec,
    reference_coding: &[f64],
    subject: usize,
    rng: &mut crate::rng::RunRng,
) -> Result<DVector<f64>> {
    let p = data.n_visits();
    let s = data.pattern(subject);
    let x_own = DVector::from_fn(data.n_covariates(), |c, _| {
        data.covariates()[(subject, c)]
    });
    let x_ref = reference_row(data, subject, &spec.treatment_columns, reference_coding);
    let mu = mechanism_mean(&snapshot.alpha, &x_own, &x_ref, s, spec.mechanism);
    let observed: Vec<usize> = (0..s).collect();
    let missing: Vec<usize> = (s..p).collect();
    conditional_normal_draw(
        &mu,
        &snapshot.sigma,
        &observed,
        &missing,
        &snapshot.filled,
        subject,
        rng,
    )
}

/// A completed dataset: no missing cells, observed cells preserved.
#[derive(Debug, Clone)]
pub struct CompletedDataset {
    /// Outcome matrix; category codes for categorical outcomes.
    pub values: DMatrix<f64>,
    /// 1-based imputation index.
    pub imputation_index: usize,
}

/// Fill every missing cell of the dataset once per selected parameter
/// draw: intermittent cells from the draw's own monotone fill, dropout
/// cells from the mechanism's conditional law. Each imputed dataset uses
/// its own RNG stream derived from `seed`.
pub fn emit_completed_datasets(
    snapshots: &[ParamSnapshot],
    data: &LongitudinalDataset,
    spec: &ImputationSpec,
    seed: u64,
) -> Result<Vec<CompletedDataset>> {
    spec.validate(data)?;
    if snapshots.len() != spec.m_imputations {
        return Err(Error::invalid(format!(
            "need {} parameter snapshots, got {}",
            spec.m_imputations,
            snapshots.len()
        )));
    }
    let reference_coding = spec.reference_coding(data)?;
    let p = data.n_visits();
    let categorical = data.kind().is_categorical();
    let mut out = Vec::with_capacity(snapshots.len());
    for (k, snapshot) in snapshots.iter().enumerate() {
        let mut rng = stream_rng(seed, Stream::Imputation(k as u64));
        let mut values = data.outcomes().clone();
        let cutoffs = match (&snapshot.cutoffs, categorical) {
            (Some(c), true) => Some(CutoffSet::new(c.clone(), data.kind().categories())?),
            (None, true) => {
                return Err(Error::invalid("categorical imputation needs cutoff draws"))
            }
            _ => None,
        };
        for i in 0..data.n_subjects() {
            let s = data.pattern(i);
            // Intermittent cells come from the draw's monotone fill.
            for j in 0..s {
                if !data.is_observed(i, j) {
                    let latent = snapshot.filled[(i, j)];
                    values[(i, j)] = match &cutoffs {
                        Some(c) => c.categorize(j, latent) as f64,
                        None => latent,
                    };
                }
            }
            // Dropout cells from the mechanism's conditional law.
            if s < p {
                let draw = impute_dropout(snapshot, data, spec, &reference_coding, i, &mut rng)?;
                for (idx, j) in (s..p).enumerate() {
                    values[(i, j)] = match &cutoffs {
                        Some(c) => c.categorize(j, draw[idx]) as f64,
                        None => draw[idx],
                    };
                }
            }
        }
        debug_assert!(values.iter().all(|v| v.is_finite()));
        out.push(CompletedDataset {
            values,
            imputation_index: k + 1,
        });
    }
    Ok(out)
}

/// Analysis endpoint computed on each completed dataset.
#[derive(Debug, Clone, PartialEq)]
pub enum AnalysisKind {
    /// Difference in final-visit means, active minus reference.
    MeanDifference,
    /// Difference in final-visit response proportions, where response is
    /// membership in the given category set.
    ResponseRate { response_categories: Vec<usize> },
}

/// Point estimate and large-sample variance of the endpoint on one
/// completed dataset.
pub fn analyze_dataset(
    completed: &CompletedDataset,
    data: &LongitudinalDataset,
    kind: &AnalysisKind,
    reference_arm: &str,
    active_arm: &str,
) -> Result<(f64, f64)> {
    let p = data.n_visits();
    let last = p - 1;
    let active: Vec<usize> = data.arm_subjects(active_arm);
    let reference: Vec<usize> = data.arm_subjects(reference_arm);
    if active.is_empty() {
        return Err(Error::UnknownArm(active_arm.into()));
    }
    if reference.is_empty() {
        return Err(Error::UnknownArm(reference_arm.into()));
    }
    let stat = |subjects: &[usize]| -> (f64, f64, f64) {
        let n = subjects.len() as f64;
        match kind {
            AnalysisKind::MeanDifference => {
                let mean = subjects
                    .iter()
                    .map(|&i| completed.values[(i, last)])
                    .sum::<f64>()
                    / n;
                let var = subjects
                    .iter()
                    .map(|&i| {
                        let d = completed.values[(i, last)] - mean;
                        d * d
                    })
                    .sum::<f64>()
                    / (n - 1.0);
                (mean, var, n)
            }
            AnalysisKind::ResponseRate { response_categories } => {
                let hits = subjects
                    .iter()
                    .filter(|&&i| {
                        response_categories.contains(&(completed.values[(i, last)] as usize))
                    })
                    .count() as f64;
                let rate = hits / n;
                (rate, rate * (1.0 - rate), n)
            }
        }
    };
    let (ma, va, na) = stat(&active);
    let (mr, vr, nr) = stat(&reference);
    Ok((ma - mr, va / na + vr / nr))
}

/// Pooled multiple-imputation estimate.
#[derive(Debug, Clone, Serialize)]
pub struct MiResult {
    /// Combined point estimate (mean of per-imputation estimates).
    pub point: f64,
    /// Combined standard error `sqrt(W + (1 + 1/m) B)`.
    pub se: f64,
    /// Large-sample degrees of freedom; absent when the between-imputation
    /// variance is zero.
    pub df: Option<f64>,
    pub m: usize,
    pub within: f64,
    pub between: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mechanism: Option<Mechanism>,
    #[serde(skip)]
    pub per_imputation: Vec<(f64, f64)>,
}

/// Combine per-imputation `(estimate, variance)` pairs.
pub fn rubin_combine(estimates: &[(f64, f64)]) -> Result<MiResult> {
    let m = estimates.len();
    if m < 2 {
        return Err(Error::invalid("combining needs at least 2 imputations"));
    }
    if estimates.iter().any(|(q, v)| !q.is_finite() || !v.is_finite()) {
        return Err(Error::invalid("non-finite per-imputation estimates"));
    }
    let mf = m as f64;
    let point = estimates.iter().map(|(q, _)| q).sum::<f64>() / mf;
    let within = estimates.iter().map(|(_, v)| v).sum::<f64>() / mf;
    let between = estimates
        .iter()
        .map(|(q, _)| (q - point) * (q - point))
        .sum::<f64>()
        / (mf - 1.0);
    let total = within + (1.0 + 1.0 / mf) * between;
    let df = if between > 0.0 {
        let ratio = within / ((1.0 + 1.0 / mf) * between);
        Some((mf - 1.0) * (1.0 + ratio) * (1.0 + ratio))
    } else {
        None
    };
    Ok(MiResult {
        point,
        se: total.sqrt(),
        df,
        m,
        within,
        between,
        mechanism: None,
        per_imputation: estimates.to_vec(),
    })
}
