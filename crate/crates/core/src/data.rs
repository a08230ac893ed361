//! Longitudinal dataset representation, dropout-pattern bookkeeping, and
//! monotone arrangement.
//!
//! One row per subject: baseline covariates (first column an all-ones
//! intercept), an outcome per visit with a missingness mask, and a treatment
//! arm label. A subject's pattern is the index of their last observed visit
//! (0 when nothing was observed); sorting subjects by pattern in descending
//! order and filling the intermittent gaps yields the monotone shape the
//! samplers work on.

use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::Error;
use crate::Result;

/// Outcome family of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutcomeKind {
    Continuous,
    /// Binary outcomes are ordinal with two levels, coded 1/2.
    Binary,
    Ordinal {
        categories: usize,
    },
}

impl OutcomeKind {
    pub fn is_categorical(self) -> bool {
        !matches!(self, OutcomeKind::Continuous)
    }

    /// Number of categories (2 for binary); 0 for continuous.
    pub fn categories(self) -> usize {
        match self {
            OutcomeKind::Continuous => 0,
            OutcomeKind::Binary => 2,
            OutcomeKind::Ordinal { categories } => categories,
        }
    }
}

/// Subjects-by-visits outcome data with covariates and arm labels.
///
/// Continuous outcomes live in `y`; categorical outcomes store the category
/// codes (1..K) in `y` as floats. `observed` flags measured cells.
#[derive(Debug, Clone)]
pub struct LongitudinalDataset {
    ids: Vec<String>,
    arms: Vec<String>,
    x: DMatrix<f64>,
    y: DMatrix<f64>,
    observed: Vec<Vec<bool>>,
    kind: OutcomeKind,
    covariate_names: Vec<String>,
    patterns: Vec<usize>,
}

impl LongitudinalDataset {
    pub fn new(
        ids: Vec<String>,
        arms: Vec<String>,
        x: DMatrix<f64>,
        y: DMatrix<f64>,
        observed: Vec<Vec<bool>>,
        kind: OutcomeKind,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        let n = x.nrows();
        let p = y.ncols();
        if n == 0 || p == 0 || x.ncols() == 0 {
            return Err(Error::data("dataset must have subjects, visits, and covariates"));
        }
        if ids.len() != n || arms.len() != n || y.nrows() != n || observed.len() != n {
            return Err(Error::data("inconsistent row counts across dataset fields"));
        }
        if observed.iter().any(|row| row.len() != p) {
            return Err(Error::data("missingness mask must match the visit count"));
        }
        if covariate_names.len() != x.ncols() {
            return Err(Error::data("covariate name count must match design columns"));
        }
        for i in 0..n {
            if x[(i, 0)] != 1.0 {
                return Err(Error::data(format!(
                    "covariate column 1 must be an all-ones intercept (subject {})",
                    ids[i]
                )));
            }
            for v in x.row(i).iter() {
                if !v.is_finite() {
                    return Err(Error::data(format!("non-finite covariate for subject {}", ids[i])));
                }
            }
        }
        if let OutcomeKind::Ordinal { categories } = kind {
            if categories < 2 {
                return Err(Error::data("ordinal outcomes need at least 2 categories"));
            }
        }
        let k = kind.categories();
        for i in 0..n {
            for j in 0..p {
                if observed[i][j] {
                    let v = y[(i, j)];
                    if !v.is_finite() {
                        return Err(Error::data(format!(
                            "non-finite outcome for subject {} visit {}",
                            ids[i],
                            j + 1
                        )));
                    }
                    if kind.is_categorical() && (v.fract() != 0.0 || v < 1.0 || v > k as f64) {
                        return Err(Error::data(format!(
                            "subject {} visit {}: category {v} outside 1..{k}",
                            ids[i],
                            j + 1
                        )));
                    }
                }
            }
        }
        let patterns = (0..n)
            .map(|i| {
                (0..p)
                    .rev()
                    .find(|&j| observed[i][j])
                    .map(|j| j + 1)
                    .unwrap_or(0)
            })
            .collect();
        Ok(LongitudinalDataset {
            ids,
            arms,
            x,
            y,
            observed,
            kind,
            covariate_names,
            patterns,
        })
    }

    pub fn n_subjects(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_visits(&self) -> usize {
        self.y.ncols()
    }

    pub fn n_covariates(&self) -> usize {
        self.x.ncols()
    }

    pub fn kind(&self) -> OutcomeKind {
        self.kind
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    /// Raw outcome matrix; categorical codes stored as floats.
    pub fn outcomes(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn is_observed(&self, subject: usize, visit: usize) -> bool {
        self.observed[subject][visit]
    }

    /// Last observed visit (1-based); 0 when nothing was observed.
    pub fn pattern(&self, subject: usize) -> usize {
        self.patterns[subject]
    }

    pub fn patterns(&self) -> &[usize] {
        &self.patterns
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn arms(&self) -> &[String] {
        &self.arms
    }

    pub fn arm(&self, subject: usize) -> &str {
        &self.arms[subject]
    }

    /// Observed category (1..K) for a categorical dataset.
    pub fn category(&self, subject: usize, visit: usize) -> Option<usize> {
        if self.observed[subject][visit] {
            Some(self.y[(subject, visit)] as usize)
        } else {
            None
        }
    }

    /// Indices of subjects in the given arm.
    pub fn arm_subjects(&self, arm: &str) -> Vec<usize> {
        (0..self.n_subjects()).filter(|&i| self.arms[i] == arm).collect()
    }

    pub fn has_arm(&self, arm: &str) -> bool {
        self.arms.iter().any(|a| a == arm)
    }
}

/// The monotone ordering of a dataset: subjects sorted by pattern
/// (descending, ties stable), per-visit counts, and the intermittent cells
/// that must be filled to reach the monotone shape.
#[derive(Debug, Clone)]
pub struct MonotoneArrangement {
    /// Permutation: `order[r]` is the original subject index at arranged row `r`.
    pub order: Vec<usize>,
    /// `counts[j]` (0-based visit j) = number of subjects with pattern >= j+1.
    pub counts: Vec<usize>,
    /// Original-index `(subject, visit)` cells missing before the subject's
    /// last observed visit (0-based visit).
    pub intermittent_cells: Vec<(usize, usize)>,
}

impl MonotoneArrangement {
    /// Subjects contributing a value at visit `j` (0-based): the first
    /// `counts[j]` arranged rows.
    pub fn n_at_visit(&self, j: usize) -> usize {
        self.counts[j]
    }
}

/// Sort subjects by pattern in descending order (stable within ties) and
/// enumerate intermittent cells.
pub fn arrange_monotone(data: &LongitudinalDataset) -> MonotoneArrangement {
    let n = data.n_subjects();
    let p = data.n_visits();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| data.pattern(b).cmp(&data.pattern(a)));
    let counts = (0..p)
        .map(|j| (0..n).filter(|&i| data.pattern(i) >= j + 1).count())
        .collect();
    let mut intermittent_cells = Vec::new();
    for i in 0..n {
        let s = data.pattern(i);
        for j in 0..s.saturating_sub(1) {
            if !data.is_observed(i, j) {
                intermittent_cells.push((i, j));
            }
        }
    }
    MonotoneArrangement {
        order,
        counts,
        intermittent_cells,
    }
}

/// Predictor row for the sequential regression of visit `j` (0-based):
/// `(x_i, y_{i1}, .., y_{i,j})` from a filled outcome matrix.
///
/// Stacking these rows with the response appended yields the per-visit Gram
/// matrices of the monotone-data posterior.
pub fn design_row(
    data: &LongitudinalDataset,
    filled: &DMatrix<f64>,
    subject: usize,
    visit: usize,
) -> Result<DVector<f64>> {
    let q = data.n_covariates();
    let mut row = DVector::zeros(q + visit);
    for c in 0..q {
        row[c] = data.covariates()[(subject, c)];
    }
    for j in 0..visit {
        let v = filled[(subject, j)];
        if !v.is_finite() {
            return Err(Error::MissingHistory { subject, visit: j });
        }
        row[q + j] = v;
    }
    Ok(row)
}

/// Column layout of the ingestion CSV.
#[derive(Debug, Clone)]
struct CsvLayout {
    covariate_cols: Vec<usize>,
    outcome_cols: Vec<usize>,
    covariate_names: Vec<String>,
}

fn parse_header(headers: &csv::StringRecord, kind: OutcomeKind) -> Result<CsvLayout> {
    let names: Vec<String> = headers.iter().map(|h| h.trim().to_string()).collect();
    if names.len() < 4 || names[0] != "id" || names[1] != "arm" {
        return Err(Error::data(
            "header must start with `id, arm` followed by x1..xq and outcome columns",
        ));
    }
    let outcome_prefix = if kind.is_categorical() { 'w' } else { 'y' };
    let mut covariate_cols = Vec::new();
    let mut covariate_names = Vec::new();
    let mut outcome_cols = Vec::new();
    for (idx, name) in names.iter().enumerate().skip(2) {
        if let Some(rest) = name.strip_prefix('x') {
            if rest.parse::<usize>().is_ok() {
                if !outcome_cols.is_empty() {
                    return Err(Error::data("covariate columns must precede outcome columns"));
                }
                covariate_cols.push(idx);
                covariate_names.push(name.clone());
                continue;
            }
        }
        if let Some(rest) = name.strip_prefix(outcome_prefix) {
            if rest.parse::<usize>().is_ok() {
                outcome_cols.push(idx);
                continue;
            }
        }
        return Err(Error::data(format!(
            "unrecognized column `{name}`; expected x<k> or {outcome_prefix}<j>"
        )));
    }
    if covariate_cols.is_empty() || outcome_cols.is_empty() {
        return Err(Error::data("need at least one covariate and one outcome column"));
    }
    Ok(CsvLayout {
        covariate_cols,
        outcome_cols,
        covariate_names,
    })
}

fn missing_token(field: &str) -> bool {
    let t = field.trim();
    t.is_empty() || t.eq_ignore_ascii_case("na")
}

/// Read a dataset from CSV: one row per subject, columns
/// `id, arm, x1..xq, y1..yp` (continuous) or `w1..wp` (categorical).
/// Missing outcomes are empty fields or `NA` (case-insensitive).
pub fn read_csv<R: Read>(reader: R, kind: OutcomeKind) -> Result<LongitudinalDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::data(format!("cannot read header: {e}")))?
        .clone();
    let layout = parse_header(&headers, kind)?;
    let q = layout.covariate_cols.len();
    let p = layout.outcome_cols.len();

    let mut ids = Vec::new();
    let mut arms = Vec::new();
    let mut xs: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    let mut observed = Vec::new();
    for (line, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| Error::data(format!("row {}: {e}", line + 2)))?;
        if record.len() != headers.len() {
            return Err(Error::data(format!(
                "row {}: expected {} fields, found {}",
                line + 2,
                headers.len(),
                record.len()
            )));
        }
        ids.push(record[0].to_string());
        arms.push(record[1].to_string());
        for &c in &layout.covariate_cols {
            let v: f64 = record[c]
                .parse()
                .map_err(|_| Error::data(format!("row {}: bad covariate `{}`", line + 2, &record[c])))?;
            xs.push(v);
        }
        let mut obs_row = Vec::with_capacity(p);
        for &c in &layout.outcome_cols {
            if missing_token(&record[c]) {
                ys.push(f64::NAN);
                obs_row.push(false);
            } else {
                let v: f64 = record[c]
                    .parse()
                    .map_err(|_| Error::data(format!("row {}: bad outcome `{}`", line + 2, &record[c])))?;
                ys.push(v);
                obs_row.push(true);
            }
        }
        observed.push(obs_row);
    }
    if ids.is_empty() {
        return Err(Error::data("no data rows"));
    }
    let n = ids.len();
    let x = DMatrix::from_row_slice(n, q, &xs);
    let y = DMatrix::from_row_slice(n, p, &ys);
    LongitudinalDataset::new(ids, arms, x, y, observed, kind, layout.covariate_names)
}

/// Read a dataset from a file path.
pub fn read_csv_path(path: &Path, kind: OutcomeKind) -> Result<LongitudinalDataset> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?;
    read_csv(file, kind)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(patterns: &[&[bool]]) -> LongitudinalDataset {
        let n = patterns.len();
        let p = patterns[0].len();
        let x = DMatrix::from_fn(n, 2, |i, c| if c == 0 { 1.0 } else { i as f64 });
        let y = DMatrix::from_fn(n, p, |i, j| (i * 10 + j) as f64);
        let observed = patterns.iter().map(|r| r.to_vec()).collect();
        LongitudinalDataset::new(
            (0..n).map(|i| format!("s{i}")).collect(),
            vec!["a".into(); n],
            x,
            y,
            observed,
            OutcomeKind::Continuous,
            vec!["x1".into(), "x2".into()],
        )
        .unwrap()
    }

    #[test]
    fn complete_data_yields_identity_order_and_full_counts() {
        let d = toy(&[&[true, true], &[true, true], &[true, true]]);
        let a = arrange_monotone(&d);
        assert_eq!(a.order, vec![0, 1, 2]);
        assert_eq!(a.counts, vec![3, 3]);
        assert!(a.intermittent_cells.is_empty());
    }

    #[test]
    fn patterns_sort_descending_with_stable_ties() {
        // patterns (2, 0, 1) -> order (s1, s3, s2), counts (2, 1)
        let d = toy(&[&[true, true], &[false, false], &[true, false]]);
        assert_eq!(d.patterns(), &[2, 0, 1]);
        let a = arrange_monotone(&d);
        assert_eq!(a.order, vec![0, 2, 1]);
        assert_eq!(a.counts, vec![2, 1]);
    }

    #[test]
    fn intermittent_cell_is_flagged_and_pattern_reaches_last_observed() {
        let d = toy(&[&[true, false, true]]);
        assert_eq!(d.pattern(0), 3);
        let a = arrange_monotone(&d);
        assert_eq!(a.intermittent_cells, vec![(0, 1)]);
    }

    #[test]
    fn counts_reconstruct_pattern_multiplicities() {
        let d = toy(&[
            &[true, true, false],
            &[true, false, false],
            &[true, true, true],
            &[false, false, false],
            &[true, true, false],
        ]);
        let a = arrange_monotone(&d);
        let p = d.n_visits();
        for j in 1..=p {
            let next = if j == p { 0 } else { a.counts[j] };
            let direct = (0..d.n_subjects()).filter(|&i| d.pattern(i) == j).count();
            assert_eq!(a.counts[j - 1] - next, direct, "pattern {j}");
        }
    }

    #[test]
    fn design_row_concatenates_covariates_and_lags() {
        let n = 1;
        let x = DMatrix::from_row_slice(n, 2, &[1.0, 0.5]);
        let y = DMatrix::from_row_slice(n, 3, &[1.2, -0.3, 0.0]);
        let d = LongitudinalDataset::new(
            vec!["s".into()],
            vec!["a".into()],
            x,
            y.clone(),
            vec![vec![true, true, true]],
            OutcomeKind::Continuous,
            vec!["x1".into(), "x2".into()],
        )
        .unwrap();
        let row = design_row(&d, &y, 0, 0).unwrap();
        assert_eq!(row.as_slice(), &[1.0, 0.5]);
        let row = design_row(&d, &y, 0, 2).unwrap();
        assert_eq!(row.as_slice(), &[1.0, 0.5, 1.2, -0.3]);
    }

    #[test]
    fn csv_roundtrip_with_missing_tokens() {
        let csv = "id,arm,x1,x2,y1,y2\n\
                   s1,drug,1,0.5,1.25,\n\
                   s2,placebo,1,-1,NA,2.5\n";
        let d = read_csv(csv.as_bytes(), OutcomeKind::Continuous).unwrap();
        assert_eq!(d.n_subjects(), 2);
        assert_eq!(d.pattern(0), 1);
        assert_eq!(d.pattern(1), 2);
        assert!(!d.is_observed(1, 0));
        assert_eq!(d.outcomes()[(0, 0)], 1.25);
        assert_eq!(d.arms(), &["drug".to_string(), "placebo".to_string()]);
    }

    #[test]
    fn csv_rejects_bad_intercept_and_bad_categories() {
        let csv = "id,arm,x1,y1\ns1,a,2,1\n";
        assert!(read_csv(csv.as_bytes(), OutcomeKind::Continuous).is_err());
        let csv = "id,arm,x1,w1,w2\ns1,a,1,3,1\n";
        assert!(read_csv(csv.as_bytes(), OutcomeKind::Binary).is_err());
        let csv = "id,arm,x1,w1,w2\ns1,a,1,2,1\n";
        assert!(read_csv(csv.as_bytes(), OutcomeKind::Binary).is_ok());
    }

    #[test]
    fn categorical_csv_uses_w_columns() {
        let csv = "id,arm,x1,w1,w2\ns1,a,1,2,NA\ns2,b,1,1,3\n";
        let d = read_csv(csv.as_bytes(), OutcomeKind::Ordinal { categories: 3 }).unwrap();
        assert_eq!(d.category(0, 0), Some(2));
        assert_eq!(d.category(0, 1), None);
        assert_eq!(d.category(1, 1), Some(3));
    }
}
