//! Linear-probe evaluation of frozen embeddings: closed-form ridge
//! regression, alpha selection by k-fold cross-validation on the training
//! split, and R² over repeated random region splits.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// One indicator per region, read from `region_id,<value>` text.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetTable {
    pub name: String,
    pub region_ids: Vec<String>,
    pub values: Vec<f64>,
}

impl TargetTable {
    pub fn new(name: impl Into<String>, region_ids: Vec<String>, values: Vec<f64>) -> Result<Self> {
        if region_ids.len() != values.len() {
            return Err(Error::shape(format!("{} values", region_ids.len()), values.len()));
        }
        Ok(TargetTable { name: name.into(), region_ids, values })
    }

    /// Reads `region_id` plus the column `column` (or the second column when
    /// `None`). Empty and `NA`/`NaN` cells are treated as missing and
    /// skipped, as are `#` comment lines.
    pub fn read_csv(path: impl AsRef<Path>, column: Option<&str>) -> Result<Self> {
        let path = path.as_ref();
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_path(path)?;
        let headers = rdr.headers()?.clone();
        let find = |name: &str| {
            headers.iter().position(|h| h == name).ok_or_else(|| Error::MissingColumn {
                path: path.to_path_buf(),
                column: name.to_string(),
            })
        };
        let id_col = find("region_id")?;
        let val_col = match column {
            Some(c) => find(c)?,
            None => (0..headers.len()).find(|&i| i != id_col).ok_or_else(|| Error::MissingColumn {
                path: path.to_path_buf(),
                column: "<value>".into(),
            })?,
        };
        let name = headers[val_col].to_string();
        let (mut ids, mut values) = (Vec::new(), Vec::new());
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let raw = rec.get(val_col).unwrap_or("");
            if raw.is_empty() || raw.eq_ignore_ascii_case("na") || raw.eq_ignore_ascii_case("nan") {
                continue;
            }
            let v: f64 = raw.parse().map_err(|_| Error::Schema {
                path: path.to_path_buf(),
                line: i + 2,
                message: format!("`{raw}` is not a number"),
            })?;
            ids.push(rec.get(id_col).unwrap_or("").to_string());
            values.push(v);
        }
        Ok(TargetTable { name, region_ids: ids, values })
    }

    /// One table per listed column, or per non-id column when `columns` is
    /// empty.
    pub fn read_columns(path: impl AsRef<Path>, columns: &[String]) -> Result<Vec<Self>> {
        let path = path.as_ref();
        if !columns.is_empty() {
            return columns.iter().map(|c| Self::read_csv(path, Some(c))).collect();
        }
        let headers = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_path(path)?
            .headers()?
            .clone();
        let names: Vec<&str> = headers.iter().filter(|h| *h != "region_id").collect();
        if names.is_empty() {
            return Err(Error::MissingColumn { path: path.to_path_buf(), column: "<value>".into() });
        }
        names.into_iter().map(|c| Self::read_csv(path, Some(c))).collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["region_id", self.name.as_str()])?;
        for (id, v) in self.region_ids.iter().zip(&self.values) {
            out.write_record([id.clone(), v.to_string()])?;
        }
        out.flush().map_err(|e| Error::io("<targets>", e))
    }

    /// Rows of `features` (indexed by `feature_ids`) that have a target.
    /// Returns `(X, y, ids, dropped)` where `dropped` counts feature rows
    /// without a target value.
    pub fn join(&self, feature_ids: &[String], features: ArrayView2<f64>) -> Result<Joined> {
        if feature_ids.len() != features.nrows() {
            return Err(Error::shape(format!("{} feature rows", feature_ids.len()), features.nrows()));
        }
        let lookup: HashMap<&str, f64> = self.region_ids.iter().map(String::as_str).zip(self.values.iter().copied()).collect();
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for (i, id) in feature_ids.iter().enumerate() {
            if let Some(&v) = lookup.get(id.as_str()) {
                if v.is_finite() {
                    rows.push(i);
                    y.push(v);
                }
            }
        }
        Ok(Joined {
            x: features.select(Axis(0), &rows),
            y: Array1::from(y),
            region_ids: rows.iter().map(|&i| feature_ids[i].clone()).collect(),
            dropped: feature_ids.len() - rows.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Joined {
    pub x: Array2<f64>,
    pub y: Array1<f64>,
    pub region_ids: Vec<String>,
    pub dropped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// Candidate ridge penalties, in selection-tie order.
    pub alphas: Vec<f64>,
    pub train_fraction: f64,
    pub runs: usize,
    pub cv_folds: usize,
    /// One seed per run; extended with `0, 1, ...` style seeds if shorter
    /// than `runs`.
    pub split_seeds: Vec<u64>,
    /// Select alpha by test-split R². Leaks the test split into model
    /// selection; only for comparison with protocols that did so.
    pub unsafe_select_on_test: bool,
    /// Rescale every feature to unit variance over the training rows before
    /// fitting. Without it the alpha grid is meaningless for features whose
    /// spread across regions is far from 1.
    pub standardize: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            alphas: vec![0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0],
            train_fraction: 0.75,
            runs: 5,
            cv_folds: 3,
            split_seeds: vec![0, 1, 2, 3, 4],
            unsafe_select_on_test: false,
            standardize: true,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alphas.is_empty() || self.alphas.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
            return Err(Error::Config("alphas must be a non-empty list of positive numbers".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config("train_fraction must be in (0, 1)".into()));
        }
        if self.runs == 0 {
            return Err(Error::Config("runs must be at least 1".into()));
        }
        if self.cv_folds < 2 {
            return Err(Error::Config("cv_folds must be at least 2".into()));
        }
        Ok(())
    }

    pub fn seed_for_run(&self, run: usize) -> u64 {
        self.split_seeds.get(run).copied().unwrap_or(run as u64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RidgeModel {
    pub weights: Array1<f64>,
    pub intercept: f64,
}

impl RidgeModel {
    pub fn predict(&self, x: ArrayView2<f64>) -> Array1<f64> {
        x.dot(&self.weights) + self.intercept
    }
}

fn to_dmatrix(x: ArrayView2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[[i, j]])
}

/// Ridge regression with an unpenalised intercept. Centres `X` and `y` and
/// solves the normal equations by Cholesky, in the primal (`D x D`) or
/// dual (`n x n`) form, whichever is smaller.
pub fn ridge_fit(x: ArrayView2<f64>, y: ArrayView1<f64>, alpha: f64) -> Result<RidgeModel> {
    let (n, d) = x.dim();
    if n < 2 {
        return Err(Error::arg(format!("ridge needs at least 2 samples, got {n}")));
    }
    if y.len() != n {
        return Err(Error::shape(format!("{n} targets"), y.len()));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::arg(format!("alpha must be positive, got {alpha}")));
    }
    let x_mean = x.mean_axis(Axis(0)).expect("n >= 2");
    let y_mean = y.mean().expect("n >= 2");
    let xc = to_dmatrix((&x - &x_mean).view());
    let yc = DVector::from_iterator(n, y.iter().map(|v| v - y_mean));
    let solve = |mut gram: DMatrix<f64>, rhs: DVector<f64>| -> Result<DVector<f64>> {
        for i in 0..gram.nrows() {
            gram[(i, i)] += alpha;
        }
        let chol = gram
            .cholesky()
            .ok_or_else(|| Error::arg("ridge system is not positive definite (non-finite features?)"))?;
        Ok(chol.solve(&rhs))
    };
    let w = if d <= n {
        solve(xc.tr_mul(&xc), xc.tr_mul(&yc))?
    } else {
        xc.tr_mul(&solve(&xc * xc.transpose(), yc)?)
    };
    let weights = Array1::from_iter(w.iter().copied());
    let intercept = y_mean - x_mean.dot(&weights);
    Ok(RidgeModel { weights, intercept })
}

/// `1 - SS_res / SS_tot`.
pub fn r2_score(y_true: ArrayView1<f64>, y_pred: ArrayView1<f64>) -> Result<f64> {
    if y_true.len() != y_pred.len() {
        return Err(Error::shape(format!("{} predictions", y_true.len()), y_pred.len()));
    }
    if y_true.len() < 2 {
        return Err(Error::arg("R² needs at least 2 samples"));
    }
    let mean = y_true.mean().expect("len >= 2");
    let ss_tot: f64 = y_true.iter().map(|v| (v - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::ZeroVariance);
    }
    let ss_res: f64 = y_true.iter().zip(y_pred).map(|(t, p)| (t - p).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Seeded 75/25-style split of `0..n` into `(train, test)`; both sides get at
/// least two rows.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 4 {
        return Err(Error::arg(format!("need at least 4 regions to split, got {n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, &[rng::TAG_SPLIT]));
    let n_train = ((n as f64 * train_fraction).round() as usize).clamp(2, n - 2);
    let test = idx.split_off(n_train);
    Ok((idx, test))
}

/// Contiguous folds over a seeded permutation of `0..n`.
pub fn fold_indices(n: usize, folds: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, &[rng::TAG_FOLD]));
    (0..folds)
        .map(|f| idx[f * n / folds..(f + 1) * n / folds].to_vec())
        .collect()
}

/// Out-of-fold R² of each alpha on the rows `train`: every row is predicted
/// by a model fitted without its fold, and one R² is computed over all
/// out-of-fold predictions.
pub fn cv_scores(x: ArrayView2<f64>, y: ArrayView1<f64>, alphas: &[f64], folds: usize, seed: u64) -> Result<Vec<f64>> {
    let n = x.nrows();
    if n < 2 * folds {
        return Err(Error::arg(format!(
            "{n} training regions is too few for {folds}-fold cross-validation"
        )));
    }
    let parts = fold_indices(n, folds, seed);
    alphas
        .iter()
        .map(|&alpha| {
            let mut pred = Array1::<f64>::zeros(n);
            for (f, hold) in parts.iter().enumerate() {
                let fit_rows: Vec<usize> = parts
                    .iter()
                    .enumerate()
                    .filter(|&(g, _)| g != f)
                    .flat_map(|(_, p)| p.iter().copied())
                    .collect();
                let m = ridge_fit(x.select(Axis(0), &fit_rows).view(), y.select(Axis(0), &fit_rows).view(), alpha)?;
                let p = m.predict(x.select(Axis(0), hold).view());
                for (&row, v) in hold.iter().zip(p) {
                    pred[row] = v;
                }
            }
            r2_score(y, pred.view())
        })
        .collect()
}

/// Index of the best score; ties go to the earliest candidate.
fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] || (scores[best].is_nan() && !s.is_nan()) {
            best = i;
        }
    }
    best
}

/// One split of the probe protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRun {
    pub seed: u64,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub alpha: f64,
    pub selection_scores: Vec<f64>,
    pub model: RidgeModel,
    pub r2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub r2_mean: f64,
    /// Population standard deviation across runs.
    pub r2_std: f64,
    pub r2_runs: Vec<f64>,
    pub alphas: Vec<f64>,
}

impl ProbeSummary {
    pub fn from_runs(runs: &[ProbeRun]) -> Self {
        let r2: Vec<f64> = runs.iter().map(|r| r.r2).collect();
        let mean = r2.iter().sum::<f64>() / r2.len() as f64;
        let var = r2.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / r2.len() as f64;
        ProbeSummary {
            r2_mean: mean,
            r2_std: var.sqrt(),
            r2_runs: r2,
            alphas: runs.iter().map(|r| r.alpha).collect(),
        }
    }
}

/// The full probe protocol on a feature matrix.
pub fn probe_runs(x: ArrayView2<f64>, y: ArrayView1<f64>, config: &ProbeConfig) -> Result<Vec<ProbeRun>> {
    config.validate()?;
    let n = x.nrows();
    if y.len() != n {
        return Err(Error::shape(format!("{n} targets"), y.len()));
    }
    if n < 8 {
        return Err(Error::arg(format!("probe needs at least 8 regions, got {n}")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::arg("features contain non-finite values"));
    }
    (0..config.runs)
        .map(|run| {
            let seed = config.seed_for_run(run);
            let (train, test) = split_indices(n, config.train_fraction, seed)?;
            probe_split(x, y, train, test, seed, config)
        })
        .collect()
}

/// Per-feature `(mean, scale)` over `x`; constant features keep scale 1.
fn feature_scaling(x: ArrayView2<f64>) -> (Array1<f64>, Array1<f64>) {
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let scale = x.var_axis(Axis(0), 0.0).mapv(|v| if v > 0.0 { v.sqrt() } else { 1.0 });
    (mean, scale)
}

/// Alpha selection, fit and test score for one explicit split.
pub fn probe_split(
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    train: Vec<usize>,
    test: Vec<usize>,
    seed: u64,
    config: &ProbeConfig,
) -> Result<ProbeRun> {
    let (mut xt, yt) = (x.select(Axis(0), &train), y.select(Axis(0), &train));
    let (mut xs, ys) = (x.select(Axis(0), &test), y.select(Axis(0), &test));
    let scaling = config.standardize.then(|| feature_scaling(xt.view()));
    if let Some((m, s)) = &scaling {
        xt = (&xt - m) / s;
        xs = (&xs - m) / s;
    }
    let selection_scores = if config.unsafe_select_on_test {
        config
            .alphas
            .iter()
            .map(|&a| r2_score(ys.view(), ridge_fit(xt.view(), yt.view(), a)?.predict(xs.view()).view()))
            .collect::<Result<Vec<_>>>()?
    } else {
        cv_scores(xt.view(), yt.view(), &config.alphas, config.cv_folds, seed)?
    };
    let alpha = config.alphas[argmax(&selection_scores)];
    let mut model = ridge_fit(xt.view(), yt.view(), alpha)?;
    let r2 = r2_score(ys.view(), model.predict(xs.view()).view())?;
    if let Some((m, s)) = &scaling {
        // Express the model on the original features.
        model.weights = &model.weights / s;
        model.intercept -= m.dot(&model.weights);
    }
    Ok(ProbeRun { seed, train, test, alpha, selection_scores, model, r2 })
}

pub fn probe(x: ArrayView2<f64>, y: ArrayView1<f64>, config: &ProbeConfig) -> Result<ProbeSummary> {
    Ok(ProbeSummary::from_runs(&probe_runs(x, y, config)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetReport {
    pub target: String,
    pub n_regions: usize,
    pub dropped: usize,
    #[serde(flatten)]
    pub summary: ProbeSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub targets: Vec<TargetReport>,
    pub meta: serde_json::Value,
}

impl EvalReport {
    /// Rows = targets, one column for this report's method: `mean ± std`.
    pub fn write_table<W: Write>(reports: &[EvalReport], w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["target".to_string()];
        header.extend(reports.iter().map(|r| r.method.clone()));
        out.write_record(&header)?;
        let mut names: Vec<&str> = Vec::new();
        for r in reports {
            for t in &r.targets {
                if !names.contains(&t.target.as_str()) {
                    names.push(&t.target);
                }
            }
        }
        for name in names {
            let mut row = vec![name.to_string()];
            for r in reports {
                row.push(match r.targets.iter().find(|t| t.target == name) {
                    Some(t) => format!("{:.3} ± {:.3}", t.summary.r2_mean, t.summary.r2_std),
                    None => String::new(),
                });
            }
            out.write_record(&row)?;
        }
        out.flush().map_err(|e| Error::io("<table>", e))
    }
}

/// Probes `features` (rows labelled by `ids`) against every target table.
pub fn evaluate(
    method: &str,
    ids: &[String],
    features: ArrayView2<f64>,
    targets: &[TargetTable],
    config: &ProbeConfig,
    meta: serde_json::Value,
) -> Result<EvalReport> {
    let mut out = Vec::new();
    for t in targets {
        let j = t.join(ids, features)?;
        if j.dropped > 0 {
            log::warn!("target `{}`: {} regions without a value were dropped", t.name, j.dropped);
        }
        let summary = probe(j.x.view(), j.y.view(), config)?;
        out.push(TargetReport {
            target: t.name.clone(),
            n_regions: j.y.len(),
            dropped: j.dropped,
            summary,
        });
    }
    Ok(EvalReport { method: method.to_string(), targets: out, meta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut r = rng::stream(seed, &[]);
        Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(&mut r))
    }

    /// Ridge through the SVD pseudo-inverse of the augmented system
    /// `[Xc; sqrt(alpha) I] w = [yc; 0]`.
    fn pinv_ridge(x: &Array2<f64>, y: &Array1<f64>, alpha: f64) -> (Array1<f64>, f64) {
        let (n, d) = x.dim();
        let xm = x.mean_axis(Axis(0)).unwrap();
        let ym = y.mean().unwrap();
        let mut a = DMatrix::<f64>::zeros(n + d, d);
        let mut b = DVector::<f64>::zeros(n + d);
        for i in 0..n {
            for j in 0..d {
                a[(i, j)] = x[[i, j]] - xm[j];
            }
            b[i] = y[i] - ym;
        }
        for j in 0..d {
            a[(n + j, j)] = alpha.sqrt();
        }
        let pinv = a.pseudo_inverse(1e-14).unwrap();
        let w = Array1::from_iter((pinv * b).iter().copied());
        let b0 = ym - xm.dot(&w);
        (w, b0)
    }

    #[test]
    fn exact_line() {
        let m = ridge_fit(arr2(&[[0.0], [2.0]]).view(), arr1(&[0.0, 2.0]).view(), 1e-10).unwrap();
        assert!((m.weights[0] - 1.0).abs() < 1e-9);
        assert!(m.intercept.abs() < 1e-9);
    }

    #[test]
    fn heavy_penalty_predicts_mean() {
        let x = gaussian(20, 3, 1);
        let y = x.column(0).to_owned() * 2.0 + 5.0;
        let m = ridge_fit(x.view(), y.view(), 1e12).unwrap();
        assert!(m.weights.iter().all(|w| w.abs() < 1e-9));
        let p = m.predict(x.view());
        assert!(p.iter().all(|v| (v - y.mean().unwrap()).abs() < 1e-8));
    }

    #[test]
    fn matches_pseudo_inverse_primal_and_dual() {
        for &(n, d, seed) in &[(50, 8, 2), (10, 30, 3)] {
            let x = gaussian(n, d, seed);
            let y = gaussian(n, 1, seed + 100).column(0).to_owned();
            for alpha in [0.1, 1.0, 10.0] {
                let m = ridge_fit(x.view(), y.view(), alpha).unwrap();
                let (w, b0) = pinv_ridge(&x, &y, alpha);
                let err = (&m.weights - &w).iter().fold(0.0f64, |a, v| a.max(v.abs()));
                assert!(err <= 1e-8, "n={n} d={d} alpha={alpha}: {err}");
                assert!((m.intercept - b0).abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn intercept_absorbs_target_shift() {
        let x = gaussian(30, 4, 4);
        let y = gaussian(30, 1, 5).column(0).to_owned();
        let a = ridge_fit(x.view(), y.view(), 0.5).unwrap();
        let b = ridge_fit(x.view(), (&y + 7.25).view(), 0.5).unwrap();
        assert!((&a.weights - &b.weights).iter().all(|d| d.abs() < 1e-12));
        assert!((b.intercept - a.intercept - 7.25).abs() < 1e-12);
    }

    #[test]
    fn ridge_argument_errors() {
        assert!(ridge_fit(arr2(&[[1.0]]).view(), arr1(&[1.0]).view(), 1.0).is_err());
        assert!(ridge_fit(arr2(&[[1.0], [2.0]]).view(), arr1(&[1.0, 2.0]).view(), 0.0).is_err());
    }

    #[test]
    fn r2_reference_values() {
        let y = arr1(&[1.0, 2.0, 4.0, 7.0]);
        assert_eq!(r2_score(y.view(), y.view()).unwrap(), 1.0);
        let mean = Array1::from_elem(4, y.mean().unwrap());
        assert_eq!(r2_score(y.view(), mean.view()).unwrap(), 0.0);
        let bad = arr1(&[10.0, -5.0, 20.0, 0.0]);
        assert!(r2_score(y.view(), bad.view()).unwrap() < -1.0);
        assert!(matches!(r2_score(arr1(&[3.0, 3.0]).view(), arr1(&[1.0, 2.0]).view()), Err(Error::ZeroVariance)));
    }

    #[test]
    fn splits_and_folds_partition() {
        let (tr, te) = split_indices(60, 0.75, 3).unwrap();
        assert_eq!((tr.len(), te.len()), (45, 15));
        let mut all = [tr.clone(), te].concat();
        all.sort();
        assert_eq!(all, (0..60).collect::<Vec<_>>());
        let folds = fold_indices(10, 3, 1);
        assert_eq!(folds.iter().map(Vec::len).sum::<usize>(), 10);
        assert!(folds.iter().all(|f| f.len() >= 3));
    }

    #[test]
    fn informative_embedding_scores_high() {
        let mut r = rng::stream(7, &[]);
        let n = 60;
        let y = Array1::from_shape_fn(n, |_| r.random_range(0.0..1.0));
        let x = Array2::from_shape_fn((n, 2), |(i, j)| if j == 0 { 3.0 * y[i] - 1.0 } else { 1e-3 * r.random_range(-1.0..1.0) });
        let s = probe(x.view(), y.view(), &ProbeConfig::default()).unwrap();
        assert!(s.r2_mean >= 0.99, "{s:?}");
        assert!(s.r2_std >= 0.0);
    }

    #[test]
    fn noise_embedding_scores_low() {
        let mut total = 0.0;
        for seed in 0..5 {
            let x = gaussian(60, 16, 10 + seed);
            let y = gaussian(60, 1, 20 + seed).column(0).to_owned();
            total += probe(x.view(), y.view(), &ProbeConfig::default()).unwrap().r2_mean;
        }
        assert!(total / 5.0 < 0.1, "{}", total / 5.0);
    }

    #[test]
    fn deterministic() {
        let x = gaussian(40, 5, 1);
        let y = gaussian(40, 1, 2).column(0).to_owned();
        let cfg = ProbeConfig::default();
        assert_eq!(probe_runs(x.view(), y.view(), &cfg).unwrap(), probe_runs(x.view(), y.view(), &cfg).unwrap());
    }

    #[test]
    fn test_rows_never_reach_the_fit() {
        let x = gaussian(40, 5, 8);
        let y = x.column(1).to_owned() + gaussian(40, 1, 9).column(0);
        let cfg = ProbeConfig::default();
        let clean = probe_runs(x.view(), y.view(), &cfg).unwrap();
        for run in 0..cfg.runs {
            let mut poisoned = y.clone();
            for &i in &clean[run].test {
                poisoned[i] = 1e9 * (1.0 + i as f64);
            }
            let again = &probe_runs(x.view(), poisoned.view(), &cfg).unwrap()[run];
            assert_eq!(again.model, clean[run].model);
            assert_eq!(again.alpha, clean[run].alpha);
        }
    }

    #[test]
    fn unsafe_selection_can_only_help_on_test() {
        let x = gaussian(40, 12, 3);
        let y = x.column(0).to_owned() + &gaussian(40, 1, 4).column(0).mapv(|v| v * 2.0);
        let safe = probe(x.view(), y.view(), &ProbeConfig::default()).unwrap();
        let cfg = ProbeConfig { unsafe_select_on_test: true, ..Default::default() };
        let leaky = probe(x.view(), y.view(), &cfg).unwrap();
        assert!(leaky.r2_mean >= safe.r2_mean - 1e-12);
    }

    #[test]
    fn too_few_regions() {
        let x = gaussian(6, 2, 1);
        let y = gaussian(6, 1, 2).column(0).to_owned();
        assert!(matches!(probe(x.view(), y.view(), &ProbeConfig::default()), Err(Error::Argument(_))));
    }

    #[test]
    fn join_drops_missing() {
        let t = TargetTable::new("svi", vec!["b".into(), "a".into()], vec![2.0, 1.0]).unwrap();
        let ids: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let x = arr2(&[[1.0], [2.0], [3.0]]);
        let j = t.join(&ids, x.view()).unwrap();
        assert_eq!(j.region_ids, vec!["a", "b"]);
        assert_eq!(j.y, arr1(&[1.0, 2.0]));
        assert_eq!(j.dropped, 1);
    }

    #[test]
    fn targets_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        std::fs::write(&p, "region_id,edu,inc\nA,0.5,10\nB,,20\nC,0.25,NA\n").unwrap();
        let t = TargetTable::read_csv(&p, None).unwrap();
        assert_eq!(t.name, "edu");
        assert_eq!(t.region_ids, vec!["A", "C"]);
        let t = TargetTable::read_csv(&p, Some("inc")).unwrap();
        assert_eq!(t.values, vec![10.0, 20.0]);
        assert!(matches!(TargetTable::read_csv(&p, Some("svi")), Err(Error::MissingColumn { .. })));
        let all = TargetTable::read_columns(&p, &[]).unwrap();
        assert_eq!(all.iter().map(|t| t.name.as_str()).collect::<Vec<_>>(), ["edu", "inc"]);
        std::fs::write(&p, "# written by a tool\nregion_id,edu\nA,0.5\n").unwrap();
        assert_eq!(TargetTable::read_csv(&p, None).unwrap().values, vec![0.5]);
        std::fs::write(&p, "region_id,edu\nA,x\n").unwrap();
        assert!(matches!(TargetTable::read_csv(&p, None), Err(Error::Schema { line: 2, .. })));
    }

    #[test]
    fn standardized_probe_ignores_feature_scale() {
        let x = gaussian(40, 6, 21);
        let y = x.column(0).to_owned() * 2.0 + x.column(3).mapv(|v| 0.5 * v) + gaussian(40, 1, 22).column(0).mapv(|v| 0.1 * v);
        let cfg = ProbeConfig::default();
        let base = probe_runs(x.view(), y.view(), &cfg).unwrap();
        let tiny = x.mapv(|v| 1e-3 * v + 5.0);
        let scaled = probe_runs(tiny.view(), y.view(), &cfg).unwrap();
        for (a, b) in base.iter().zip(&scaled) {
            assert!((a.r2 - b.r2).abs() < 1e-9);
            assert_eq!(a.alpha, b.alpha);
            // The returned model applies to the unscaled features.
            let pred = b.model.predict(tiny.select(Axis(0), &b.test).view());
            let r2 = r2_score(y.select(Axis(0), &b.test).view(), pred.view()).unwrap();
            assert!((r2 - b.r2).abs() < 1e-9);
        }
        let raw = ProbeConfig { standardize: false, ..Default::default() };
        let shrunk = probe(tiny.view(), y.view(), &raw).unwrap();
        assert!(shrunk.r2_mean < 0.5, "the alpha grid swamps tiny features: {shrunk:?}");
    }
}
