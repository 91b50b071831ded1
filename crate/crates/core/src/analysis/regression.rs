//! Correlation, least squares and Lasso on Z-scored features.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::stats::{mean, pearson};

/// Pearson r of one feature with the target; `constant` marks columns with
/// zero variance, which report r = 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub r: f64,
    pub constant: bool,
}

/// `features[i][j]` is feature `j` of sample `i`.
pub fn correlate(features: &[Vec<f64>], scores: &[f64]) -> Result<Vec<Correlation>> {
    let d = check_shape(features, scores, 2)?;
    Ok((0..d)
        .map(|j| {
            let col: Vec<f64> = features.iter().map(|row| row[j]).collect();
            match pearson(&col, scores) {
                Some(r) => Correlation { r, constant: false },
                None => Correlation {
                    r: 0.0,
                    constant: true,
                },
            }
        })
        .collect())
}

fn check_shape(features: &[Vec<f64>], scores: &[f64], min_n: usize) -> Result<usize> {
    if features.len() != scores.len() {
        return Err(Error::Data(format!(
            "{} feature rows for {} scores",
            features.len(),
            scores.len()
        )));
    }
    if features.len() < min_n {
        return Err(Error::Data(format!(
            "need at least {min_n} samples, got {}",
            features.len()
        )));
    }
    let d = features[0].len();
    if features.iter().any(|r| r.len() != d) {
        return Err(Error::Data("ragged feature matrix".into()));
    }
    if features
        .iter()
        .flatten()
        .chain(scores)
        .any(|v| !v.is_finite())
    {
        return Err(Error::Numerical(
            "non-finite value in regression input".into(),
        ));
    }
    Ok(d)
}

/// Column means and population standard deviations; constant columns get
/// std 0 and are excluded from fits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl Standardization {
    pub fn fit(features: &[Vec<f64>]) -> Self {
        let d = features.first().map_or(0, Vec::len);
        let n = features.len() as f64;
        let means: Vec<f64> = (0..d)
            .map(|j| features.iter().map(|r| r[j]).sum::<f64>() / n)
            .collect();
        let stds = (0..d)
            .map(|j| {
                (features
                    .iter()
                    .map(|r| (r[j] - means[j]).powi(2))
                    .sum::<f64>()
                    / n)
                    .sqrt()
            })
            .collect();
        Self { means, stds }
    }

    fn active(&self) -> Vec<usize> {
        (0..self.stds.len())
            .filter(|&j| self.stds[j] > 0.0)
            .collect()
    }

    fn z(&self, features: &[Vec<f64>], cols: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(features.len(), cols.len(), |i, k| {
            let j = cols[k];
            (features[i][j] - self.means[j]) / self.stds[j]
        })
    }
}

/// Coefficients are on the Z-scored scale; dropped (constant) columns have
/// coefficient 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionFit {
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub r2: f64,
    pub cv_scores: Vec<f64>,
    pub alpha: f64,
    pub standardization: Standardization,
    pub sweeps: usize,
}

impl RegressionFit {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let s = &self.standardization;
        self.intercept
            + (0..row.len())
                .filter(|&j| s.stds[j] > 0.0)
                .map(|j| self.coefficients[j] * (row[j] - s.means[j]) / s.stds[j])
                .sum::<f64>()
    }

    pub fn predict(&self, features: &[Vec<f64>]) -> Vec<f64> {
        features.iter().map(|r| self.predict_row(r)).collect()
    }

    pub fn nonzero(&self) -> usize {
        self.coefficients.iter().filter(|c| **c != 0.0).count()
    }

    /// Coefficients expressed on the original feature scale.
    pub fn raw_coefficients(&self) -> Vec<f64> {
        let s = &self.standardization;
        self.coefficients
            .iter()
            .zip(&s.stds)
            .map(|(c, sd)| if *sd > 0.0 { c / sd } else { 0.0 })
            .collect()
    }

    pub fn raw_intercept(&self) -> f64 {
        let s = &self.standardization;
        self.intercept
            - self
                .raw_coefficients()
                .iter()
                .zip(&s.means)
                .map(|(c, m)| c * m)
                .sum::<f64>()
    }
}

/// Coefficient of determination; 0 for a constant target.
pub fn r_squared(y: &[f64], pred: &[f64]) -> f64 {
    let m = mean(y);
    let ss_tot: f64 = y.iter().map(|v| (v - m).powi(2)).sum();
    let ss_res: f64 = y.iter().zip(pred).map(|(a, b)| (a - b).powi(2)).sum();
    if ss_tot == 0.0 {
        0.0
    } else {
        1.0 - ss_res / ss_tot
    }
}

const RIDGE_JITTER: f64 = 1e-8;

/// Least squares on Z-scored features through the normal equations with a
/// small ridge term on the diagonal.
pub fn ols_fit(features: &[Vec<f64>], scores: &[f64]) -> Result<RegressionFit> {
    let d = check_shape(features, scores, 2)?;
    let stand = Standardization::fit(features);
    let cols = stand.active();
    if features.len() <= cols.len() {
        return Err(Error::Data(format!(
            "{} samples are too few for {} non-constant features",
            features.len(),
            cols.len()
        )));
    }
    let x = stand.z(features, &cols);
    let y_mean = mean(scores);
    let yc = DVector::from_iterator(scores.len(), scores.iter().map(|v| v - y_mean));
    let mut xtx = x.transpose() * &x;
    for i in 0..cols.len() {
        xtx[(i, i)] += RIDGE_JITTER;
    }
    let xty = x.transpose() * yc;
    let beta = xtx
        .cholesky()
        .ok_or_else(|| Error::Numerical("normal equations are not positive definite".into()))?
        .solve(&xty);
    if beta.iter().any(|b| !b.is_finite()) {
        return Err(Error::Numerical(
            "least-squares solution is not finite".into(),
        ));
    }
    let mut coefficients = vec![0.0; d];
    for (k, &j) in cols.iter().enumerate() {
        coefficients[j] = beta[k];
    }
    let mut fit = RegressionFit {
        coefficients,
        intercept: y_mean,
        r2: 0.0,
        cv_scores: Vec::new(),
        alpha: 0.0,
        standardization: stand,
        sweeps: 0,
    };
    fit.r2 = r_squared(scores, &fit.predict(features));
    Ok(fit)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LassoConfig {
    pub alpha: f64,
    pub folds: usize,
    pub repeats: usize,
    pub tol: f64,
    pub max_sweeps: usize,
    pub seed: u64,
}

impl Default for LassoConfig {
    fn default() -> Self {
        Self {
            alpha: 0.03,
            folds: 10,
            repeats: 5,
            tol: 1e-8,
            max_sweeps: 100_000,
            seed: 0,
        }
    }
}

fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// The Lasso objective `(1/2n)‖y - Xβ‖² + α‖β‖₁` on centred data.
pub fn lasso_objective(x: &DMatrix<f64>, y: &DVector<f64>, beta: &DVector<f64>, alpha: f64) -> f64 {
    let r = y - x * beta;
    r.norm_squared() / (2.0 * x.nrows() as f64) + alpha * beta.iter().map(|b| b.abs()).sum::<f64>()
}

/// Cyclic coordinate descent on centred, Z-scored data. Returns the
/// coefficients, the sweep count and the objective after every sweep.
fn coordinate_descent(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    alpha: f64,
    tol: f64,
    max_sweeps: usize,
) -> Result<(DVector<f64>, usize, Vec<f64>)> {
    let (n, d) = (x.nrows(), x.ncols());
    let nf = n as f64;
    let col_sq: Vec<f64> = (0..d).map(|j| x.column(j).norm_squared() / nf).collect();
    let mut beta = DVector::zeros(d);
    let mut resid = y.clone();
    let mut history = Vec::new();
    for sweep in 1..=max_sweeps {
        let mut max_change: f64 = 0.0;
        for j in 0..d {
            if col_sq[j] == 0.0 {
                continue;
            }
            let old = beta[j];
            let rho = x.column(j).dot(&resid) / nf + col_sq[j] * old;
            let new = soft_threshold(rho, alpha) / col_sq[j];
            if new != old {
                resid.axpy(old - new, &x.column(j), 1.0);
                beta[j] = new;
                max_change = max_change.max((new - old).abs());
            }
        }
        history.push(lasso_objective(x, y, &beta, alpha));
        if max_change < tol {
            return Ok((beta, sweep, history));
        }
    }
    Err(Error::Numerical(format!(
        "lasso did not converge within {max_sweeps} sweeps"
    )))
}

/// One Lasso fit without cross-validation; also returns the per-sweep
/// objective values.
pub fn lasso_path_fit(
    features: &[Vec<f64>],
    scores: &[f64],
    cfg: &LassoConfig,
) -> Result<(RegressionFit, Vec<f64>)> {
    if !(cfg.alpha >= 0.0) {
        return Err(Error::Config(format!(
            "lasso alpha must be >= 0, got {}",
            cfg.alpha
        )));
    }
    let d = check_shape(features, scores, 2)?;
    let stand = Standardization::fit(features);
    let cols = stand.active();
    let x = stand.z(features, &cols);
    let y_mean = mean(scores);
    let yc = DVector::from_iterator(scores.len(), scores.iter().map(|v| v - y_mean));
    let (beta, sweeps, history) = coordinate_descent(&x, &yc, cfg.alpha, cfg.tol, cfg.max_sweeps)?;
    let mut coefficients = vec![0.0; d];
    for (k, &j) in cols.iter().enumerate() {
        coefficients[j] = beta[k];
    }
    let mut fit = RegressionFit {
        coefficients,
        intercept: y_mean,
        r2: 0.0,
        cv_scores: Vec::new(),
        alpha: cfg.alpha,
        standardization: stand,
        sweeps,
    };
    fit.r2 = r_squared(scores, &fit.predict(features));
    Ok((fit, history))
}

/// Lasso fit on all data plus repeated k-fold cross-validated R² (each
/// fold standardizes on its own training part).
pub fn lasso_fit(
    features: &[Vec<f64>],
    scores: &[f64],
    cfg: &LassoConfig,
) -> Result<RegressionFit> {
    let (mut fit, _) = lasso_path_fit(features, scores, cfg)?;
    let n = features.len();
    if cfg.folds >= 2 && n >= cfg.folds {
        for rep in 0..cfg.repeats {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut seed::rng(
                cfg.seed,
                &[seed::tag("lasso-cv"), rep as u64],
            ));
            for f in 0..cfg.folds {
                let test: Vec<usize> = order.iter().copied().skip(f).step_by(cfg.folds).collect();
                let in_test: std::collections::HashSet<usize> = test.iter().copied().collect();
                let train: Vec<usize> = order
                    .iter()
                    .copied()
                    .filter(|i| !in_test.contains(i))
                    .collect();
                let pick = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<f64>) {
                    (
                        idx.iter().map(|&i| features[i].clone()).collect(),
                        idx.iter().map(|&i| scores[i]).collect(),
                    )
                };
                let (xtr, ytr) = pick(&train);
                let (xte, yte) = pick(&test);
                let (sub, _) = lasso_path_fit(&xtr, &ytr, cfg)?;
                fit.cv_scores.push(r_squared(&yte, &sub.predict(&xte)));
            }
        }
    }
    Ok(fit)
}
