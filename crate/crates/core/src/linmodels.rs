//! Ridge and logistic regression, the cross-sectional baselines and the
//! per-speaker refit baseline.

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::data::{Observation, SupportSet, HOURS_RANGE};
use crate::error::ModelError;
use crate::exec::Exec;
use crate::metrics;
use crate::numkernel::Tensor;

pub const ALPHA_GRID: [f64; 5] = [0.1, 1.0, 10.0, 100.0, 1000.0];
pub const C_GRID: [f64; 5] = [0.001, 0.01, 0.1, 1.0, 10.0];
pub const LOGISTIC_MAX_STEPS: usize = 2000;
pub const LOGISTIC_GRAD_TOL: f64 = 1e-8;
pub const ME_ALPHA: f64 = 1000.0;

pub fn clamp_hours(h: f64) -> f64 {
    h.clamp(HOURS_RANGE.0, HOURS_RANGE.1)
}

/// Design matrix with hours and labels for a set of observations.
#[derive(Clone, Debug, PartialEq)]
pub struct Pool {
    pub x: Tensor,
    pub hours: Vec<f64>,
    pub labels: Vec<bool>,
}

impl Pool {
    pub fn from_observations<'a>(obs: impl IntoIterator<Item = &'a Observation>, dim: usize) -> Self {
        let mut data = Vec::new();
        let mut hours = Vec::new();
        let mut labels = Vec::new();
        for o in obs {
            data.extend_from_slice(o.embedding.as_slice());
            hours.push(o.target.hours());
            labels.push(o.target.label());
        }
        let x = Tensor::new(hours.len(), dim, data).expect("embeddings share the pool dimension");
        Pool { x, hours, labels }
    }

    pub fn len(&self) -> usize {
        self.hours.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hours.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RidgeModel {
    pub coef: Vec<f64>,
    pub intercept: f64,
    pub alpha: f64,
}

impl RidgeModel {
    pub fn dim(&self) -> usize {
        self.coef.len()
    }

    pub fn predict_one(&self, x: &[f64]) -> f64 {
        self.intercept + dot(&self.coef, x)
    }

    pub fn predict(&self, x: &Tensor) -> Vec<f64> {
        (0..x.rows()).map(|r| self.predict_one(x.row_slice(r))).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub coef: Vec<f64>,
    pub intercept: f64,
    pub c: f64,
    pub threshold: f64,
    pub steps: usize,
}

impl LogisticModel {
    pub fn dim(&self) -> usize {
        self.coef.len()
    }

    pub fn predict_proba_one(&self, x: &[f64]) -> f64 {
        sigmoid(self.intercept + dot(&self.coef, x))
    }

    pub fn predict_proba(&self, x: &Tensor) -> Vec<f64> {
        (0..x.rows()).map(|r| self.predict_proba_one(x.row_slice(r))).collect()
    }
}

/// Candidate value and its validation score.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GridPoint {
    pub value: f64,
    pub score: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn check_finite(x: &Tensor, y: &[f64]) -> Result<(), ModelError> {
    if x.is_finite() && y.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(ModelError::Config("non-finite training data".into()))
    }
}

fn column_means(x: &Tensor) -> Vec<f64> {
    let mut m = vec![0.0; x.cols()];
    for r in 0..x.rows() {
        for (acc, v) in m.iter_mut().zip(x.row_slice(r)) {
            *acc += v;
        }
    }
    let n = x.rows().max(1) as f64;
    m.iter_mut().for_each(|v| *v /= n);
    m
}

fn centered(x: &Tensor, means: &[f64]) -> Tensor {
    let mut out = x.clone();
    let d = x.cols();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v -= means[i % d];
    }
    out
}

/// Solves `a z = b` for symmetric positive definite `a` (row-major `n x n`),
/// overwriting `b` with `z`.
pub(crate) fn cholesky_solve(a: &[f64], n: usize, b: &mut [f64]) -> Result<(), ModelError> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(s > 0.0) {
                    return Err(ModelError::Singular);
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    for i in 0..n {
        let s = b[i] - dot(&l[i * n..i * n + i], &b[..i]);
        b[i] = s / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
    Ok(())
}

fn ridge_solve(x: &Tensor, y: &[f64], alpha: f64, intercept: bool) -> Result<RidgeModel, ModelError> {
    if x.rows() == 0 {
        return Err(ModelError::EmptyFit);
    }
    if x.rows() != y.len() {
        return Err(ModelError::Dimension { expected: x.rows(), found: y.len() });
    }
    if !(alpha > 0.0) {
        return Err(ModelError::Config(format!("ridge alpha must be positive, got {alpha}")));
    }
    check_finite(x, y)?;
    let d = x.cols();
    let (means, y_mean) = if intercept {
        (column_means(x), y.iter().sum::<f64>() / y.len() as f64)
    } else {
        (vec![0.0; d], 0.0)
    };
    let xc = if intercept { centered(x, &means) } else { x.clone() };
    let yc = Tensor::new(y.len(), 1, y.iter().map(|v| v - y_mean).collect())?;
    let mut gram = Tensor::zeros(d, d);
    crate::numkernel::gemm(&xc, true, &xc, false, &mut gram, 0.0);
    let mut rhs = Tensor::zeros(d, 1);
    crate::numkernel::gemm(&xc, true, &yc, false, &mut rhs, 0.0);
    let g = gram.data_mut();
    for i in 0..d {
        g[i * d + i] += alpha;
    }
    let mut coef = rhs.into_data();
    cholesky_solve(gram.data(), d, &mut coef)?;
    let b = if intercept { y_mean - dot(&means, &coef) } else { 0.0 };
    Ok(RidgeModel { coef, intercept: b, alpha })
}

/// Minimises `||y - X w - b||^2 + alpha ||w||^2` with an unpenalised intercept.
pub fn ridge_fit(x: &Tensor, y: &[f64], alpha: f64) -> Result<RidgeModel, ModelError> {
    ridge_solve(x, y, alpha, true)
}

/// Ridge without an intercept: `||y - X w||^2 + alpha ||w||^2`.
pub fn ridge_fit_origin(x: &Tensor, y: &[f64], alpha: f64) -> Result<RidgeModel, ModelError> {
    ridge_solve(x, y, alpha, false)
}

/// Fits one ridge per grid value on `train` and keeps the lowest validation
/// RMSE of clamped predictions; ties keep the smaller alpha.
pub fn tune_cs_regression(train: &Pool, val: &Pool, exec: Exec) -> Result<(RidgeModel, Vec<GridPoint>), ModelError> {
    if val.is_empty() {
        return Err(ModelError::EmptyValidation);
    }
    let fits = exec.map(&ALPHA_GRID, |&a| -> Result<(RidgeModel, f64), ModelError> {
        let m = ridge_fit(&train.x, &train.hours, a)?;
        let pred: Vec<f64> = m.predict(&val.x).into_iter().map(clamp_hours).collect();
        let score = metrics::rmse(&pred, &val.hours).map_err(|e| ModelError::Training(e.to_string()))?;
        Ok((m, score))
    });
    let mut best: Option<(RidgeModel, f64)> = None;
    let mut grid = Vec::with_capacity(ALPHA_GRID.len());
    for f in fits {
        let (m, score) = f?;
        grid.push(GridPoint { value: m.alpha, score });
        if best.as_ref().map_or(true, |(_, s)| score < *s) {
            best = Some((m, score));
        }
    }
    Ok((best.expect("grid is nonempty").0, grid))
}

/// Upper bound on the largest eigenvalue of a symmetric matrix (Gershgorin).
fn gershgorin_bound(g: &[f64], d: usize) -> f64 {
    (0..d)
        .map(|i| g[i * d..(i + 1) * d].iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

struct LogisticProblem {
    xc: Tensor,
    y: Vec<f64>,
    inv_c: f64,
}

impl LogisticProblem {
    /// Objective and gradient at `theta = [w..., b]`.
    fn eval(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        let d = self.xc.cols();
        let (w, b) = (&theta[..d], theta[d]);
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        for (r, &yi) in self.y.iter().enumerate() {
            let row = self.xc.row_slice(r);
            let z = b + dot(w, row);
            loss += softplus(z) - yi * z;
            let e = sigmoid(z) - yi;
            for (g, xv) in grad[..d].iter_mut().zip(row) {
                *g += e * xv;
            }
            grad[d] += e;
        }
        for (g, wv) in grad[..d].iter_mut().zip(w) {
            *g += self.inv_c * wv;
        }
        loss + 0.5 * self.inv_c * dot(w, w)
    }
}

/// Penalised logistic loss `sum_i CE_i + ||w||^2 / (2C)` of a fitted model.
pub fn logistic_objective(model: &LogisticModel, x: &Tensor, labels: &[bool]) -> f64 {
    let mut loss = 0.0;
    for (r, &l) in labels.iter().enumerate() {
        let z = model.intercept + dot(&model.coef, x.row_slice(r));
        loss += softplus(z) - if l { z } else { 0.0 };
    }
    loss + dot(&model.coef, &model.coef) / (2.0 * model.c)
}

/// Logistic regression by accelerated gradient descent with adaptive restart on
/// centered features; the intercept is not penalised.
pub fn logistic_fit(x: &Tensor, labels: &[bool], c: f64) -> Result<LogisticModel, ModelError> {
    logistic_fit_budget(x, labels, c, LOGISTIC_MAX_STEPS, LOGISTIC_GRAD_TOL)
}

pub fn logistic_fit_budget(
    x: &Tensor,
    labels: &[bool],
    c: f64,
    max_steps: usize,
    tol: f64,
) -> Result<LogisticModel, ModelError> {
    if x.rows() == 0 {
        return Err(ModelError::EmptyFit);
    }
    if x.rows() != labels.len() {
        return Err(ModelError::Dimension { expected: x.rows(), found: labels.len() });
    }
    if !(c > 0.0) {
        return Err(ModelError::Config(format!("logistic C must be positive, got {c}")));
    }
    if labels.iter().all(|&l| l) || !labels.iter().any(|&l| l) {
        return Err(ModelError::DegenerateLabels);
    }
    let y: Vec<f64> = labels.iter().map(|&l| f64::from(u8::from(l))).collect();
    check_finite(x, &y)?;
    let d = x.cols();
    let means = column_means(x);
    let xc = centered(x, &means);
    let mut gram = Tensor::zeros(d, d);
    crate::numkernel::gemm(&xc, true, &xc, false, &mut gram, 0.0);
    // Centered columns are orthogonal to the intercept column, so the Gram
    // matrix of [X 1] is block diagonal.
    let lip = gershgorin_bound(gram.data(), d).max(x.rows() as f64) / 4.0 + 1.0 / c;
    let step = 1.0 / lip;
    let problem = LogisticProblem { xc, y, inv_c: 1.0 / c };

    let mut theta = vec![0.0; d + 1];
    let p = problem.y.iter().sum::<f64>() / problem.y.len() as f64;
    theta[d] = (p / (1.0 - p)).ln();
    let mut prev = theta.clone();
    let mut look = theta.clone();
    let mut grad = vec![0.0; d + 1];
    let mut momentum = 1.0f64;
    let mut steps = 0;
    while steps < max_steps {
        problem.eval(&look, &mut grad);
        if dot(&grad, &grad).sqrt() < tol {
            theta.copy_from_slice(&look);
            break;
        }
        steps += 1;
        let next: Vec<f64> = look.iter().zip(&grad).map(|(t, g)| t - step * g).collect();
        // Restart momentum when the step opposes the previous direction.
        let restart = grad.iter().zip(next.iter().zip(&theta)).map(|(g, (n, t))| g * (n - t)).sum::<f64>() > 0.0;
        let new_momentum = if restart { 1.0 } else { (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt()) / 2.0 };
        let beta = if restart { 0.0 } else { (momentum - 1.0) / new_momentum };
        prev.copy_from_slice(&theta);
        theta = next;
        for i in 0..=d {
            look[i] = theta[i] + beta * (theta[i] - prev[i]);
        }
        momentum = new_momentum;
    }
    let coef = theta[..d].to_vec();
    let intercept = theta[d] - dot(&means, &coef);
    if !intercept.is_finite() || coef.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::Training("logistic fit diverged".into()));
    }
    Ok(LogisticModel { coef, intercept, c, threshold: metrics::FALLBACK_THRESHOLD, steps })
}

/// Fits one logistic model per grid value and keeps the highest validation
/// AUC; ties keep the smaller C.
pub fn tune_cs_classifier(
    train: &Pool,
    val: &Pool,
    exec: Exec,
) -> Result<(LogisticModel, Vec<GridPoint>), ModelError> {
    if val.is_empty() {
        return Err(ModelError::EmptyValidation);
    }
    let fits = exec.map(&C_GRID, |&c| -> Result<(LogisticModel, f64), ModelError> {
        let m = logistic_fit(&train.x, &train.labels, c)?;
        let score = metrics::auc(&m.predict_proba(&val.x), &val.labels)
            .map_err(|e| ModelError::Training(format!("validation AUC: {e}")))?;
        Ok((m, score))
    });
    let mut best: Option<(LogisticModel, f64)> = None;
    let mut grid = Vec::with_capacity(C_GRID.len());
    for f in fits {
        let (m, score) = f?;
        grid.push(GridPoint { value: m.c, score });
        if best.as_ref().map_or(true, |(_, s)| score > *s) {
            best = Some((m, score));
        }
    }
    Ok((best.expect("grid is nonempty").0, grid))
}

/// Per-speaker baseline refit from scratch on the speaker's own history at
/// every call. Counts fits so callers can verify that nothing is cached.
#[derive(Debug)]
pub struct MixedEffects {
    pub alpha: f64,
    pub c: f64,
    fits: AtomicUsize,
}

impl Default for MixedEffects {
    fn default() -> Self {
        MixedEffects::new(ME_ALPHA)
    }
}

impl MixedEffects {
    pub const MIN_HISTORY: usize = 2;

    /// Regression uses ridge strength `alpha`; classification uses the
    /// matching penalty `C = 1 / alpha`.
    pub fn new(alpha: f64) -> Self {
        MixedEffects { alpha, c: 1.0 / alpha, fits: AtomicUsize::new(0) }
    }

    pub fn fit_count(&self) -> usize {
        self.fits.load(Ordering::Relaxed)
    }

    fn history_pool(history: &SupportSet<'_>, dim: usize) -> Pool {
        Pool::from_observations(history.iter(), dim)
    }

    /// Predicted hours, or `None` when the history is too short to fit.
    pub fn predict_hours(&self, history: &SupportSet<'_>, x: &[f64]) -> Result<Option<f64>, ModelError> {
        if history.len() < Self::MIN_HISTORY {
            return Ok(None);
        }
        let pool = Self::history_pool(history, x.len());
        self.fits.fetch_add(1, Ordering::Relaxed);
        let m = ridge_fit(&pool.x, &pool.hours, self.alpha)?;
        Ok(Some(clamp_hours(m.predict_one(x))))
    }

    /// Probability of the fatigued class, or `None` when the history is too
    /// short or holds a single class.
    pub fn predict_score(&self, history: &SupportSet<'_>, x: &[f64]) -> Result<Option<f64>, ModelError> {
        if history.len() < Self::MIN_HISTORY {
            return Ok(None);
        }
        let pool = Self::history_pool(history, x.len());
        if pool.labels.iter().all(|&l| l) || !pool.labels.iter().any(|&l| l) {
            return Ok(None);
        }
        self.fits.fetch_add(1, Ordering::Relaxed);
        let m = logistic_fit(&pool.x, &pool.labels, self.c)?;
        Ok(Some(m.predict_proba_one(x)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{AgeGroup, Demographics, Embedding, Language, Sex, Target};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    fn ridge_objective(m: &RidgeModel, x: &Tensor, y: &[f64]) -> f64 {
        let r: f64 = m.predict(x).iter().zip(y).map(|(p, t)| (t - p).powi(2)).sum();
        r + m.alpha * m.coef.iter().map(|w| w * w).sum::<f64>()
    }

    /// Plain gradient descent on the uncentred ridge objective.
    fn ridge_gd_oracle(x: &Tensor, y: &[f64], alpha: f64, iters: usize) -> (Vec<f64>, f64) {
        let (n, d) = (x.rows(), x.cols());
        let mut w = vec![0.0; d];
        let mut b = 0.0;
        let lr = 1.0 / (2.0 * (x.norm_sq() + n as f64 + alpha));
        for _ in 0..iters {
            let mut gw: Vec<f64> = w.iter().map(|v| 2.0 * alpha * v).collect();
            let mut gb = 0.0;
            for r in 0..n {
                let row = x.row_slice(r);
                let e = b + dot(&w, row) - y[r];
                for j in 0..d {
                    gw[j] += 2.0 * e * row[j];
                }
                gb += 2.0 * e;
            }
            for j in 0..d {
                w[j] -= lr * gw[j];
            }
            b -= lr * gb;
        }
        (w, b)
    }

    /// Newton's method on the logistic objective, uncentred parametrisation.
    fn logistic_newton_oracle(x: &Tensor, labels: &[bool], c: f64) -> LogisticModel {
        let (n, d) = (x.rows(), x.cols());
        let mut th = vec![0.0; d + 1];
        for _ in 0..100 {
            let mut g = vec![0.0; d + 1];
            let mut h = vec![0.0; (d + 1) * (d + 1)];
            for r in 0..n {
                let mut row = x.row_slice(r).to_vec();
                row.push(1.0);
                let p = sigmoid(dot(&th, &row));
                let e = p - f64::from(u8::from(labels[r]));
                for i in 0..=d {
                    g[i] += e * row[i];
                    for j in 0..=d {
                        h[i * (d + 1) + j] += p * (1.0 - p) * row[i] * row[j];
                    }
                }
            }
            for i in 0..d {
                g[i] += th[i] / c;
                h[i * (d + 1) + i] += 1.0 / c;
            }
            cholesky_solve(&h, d + 1, &mut g).unwrap();
            for i in 0..=d {
                th[i] -= g[i];
            }
        }
        LogisticModel { coef: th[..d].to_vec(), intercept: th[d], c, threshold: 0.5, steps: 100 }
    }

    fn fixed_5x3() -> (Tensor, Vec<f64>) {
        let x = mat(&[
            &[1.0, 0.5, -0.2],
            &[0.3, -1.0, 0.8],
            &[-0.7, 0.2, 0.1],
            &[1.5, 1.1, -0.9],
            &[0.0, -0.4, 0.6],
        ]);
        (x, vec![2.0, -0.5, 0.3, 3.1, 0.2])
    }

    #[test]
    fn noiseless_line_recovered() {
        let x = mat(&[&[1.0], &[2.0], &[3.0], &[4.0]]);
        let m = ridge_fit(&x, &[2.0, 4.0, 6.0, 8.0], 1e-10).unwrap();
        assert!((m.coef[0] - 2.0).abs() <= 1e-6);
        assert!(m.intercept.abs() <= 1e-6);
    }

    #[test]
    fn ridge_matches_gradient_descent_oracle() {
        let (x, y) = fixed_5x3();
        let m = ridge_fit(&x, &y, 1.0).unwrap();
        let (w, b) = ridge_gd_oracle(&x, &y, 1.0, 200_000);
        for (a, o) in m.coef.iter().zip(&w) {
            assert!((a - o).abs() <= 1e-6, "{a} vs {o}");
        }
        assert!((m.intercept - b).abs() <= 1e-6);
        let oracle = RidgeModel { coef: w, intercept: b, alpha: 1.0 };
        assert!(ridge_objective(&m, &x, &y) <= ridge_objective(&oracle, &x, &y) + 1e-6);
    }

    #[test]
    fn huge_alpha_predicts_the_mean() {
        let (x, y) = fixed_5x3();
        let m = ridge_fit(&x, &y, 1e12).unwrap();
        let mean = y.iter().sum::<f64>() / 5.0;
        assert!(m.coef.iter().all(|w| w.abs() < 1e-9));
        assert!((m.predict_one(&[9.0, -3.0, 1.0]) - mean).abs() < 1e-9);
    }

    #[test]
    fn ridge_errors() {
        assert!(matches!(ridge_fit(&Tensor::zeros(0, 3), &[], 1.0), Err(ModelError::EmptyFit)));
        let (x, y) = fixed_5x3();
        assert!(matches!(ridge_fit(&x, &y, 0.0), Err(ModelError::Config(_))));
    }

    #[test]
    fn origin_fit_maps_zero_to_zero() {
        let (x, y) = fixed_5x3();
        let m = ridge_fit_origin(&x, &y, 1.0).unwrap();
        assert_eq!(m.predict_one(&[0.0; 3]), 0.0);
    }

    fn pool_from(x: Tensor, hours: Vec<f64>) -> Pool {
        let labels = hours.iter().map(|&h| h >= 10.0).collect();
        Pool { x, hours, labels }
    }

    fn noisy_pool(n: usize, d: usize, noise: f64, seed: u64) -> Pool {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f64> = (0..d).map(|j| if j == 0 { 0.3 } else { 0.0 }).collect();
        let mut data = Vec::new();
        let mut hours = Vec::new();
        for _ in 0..n {
            let row: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let e: f64 = rng.sample::<f64, _>(rand_distr::StandardNormal) * noise;
            hours.push(clamp_hours(12.0 + dot(&w, &row) + e));
            data.extend(row);
        }
        pool_from(Tensor::new(n, d, data).unwrap(), hours)
    }

    #[test]
    fn grid_has_five_candidates_and_ties_pick_smallest() {
        assert_eq!(ALPHA_GRID.len(), 5);
        assert_eq!(C_GRID.len(), 5);
        // Constant features: every alpha predicts the training mean.
        let train = pool_from(Tensor::filled(6, 2, 1.0), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let val = pool_from(Tensor::filled(3, 2, 1.0), vec![2.0, 3.0, 4.0]);
        let (m, grid) = tune_cs_regression(&train, &val, Exec::Sequential).unwrap();
        assert_eq!(grid.len(), 5);
        assert!(grid.windows(2).all(|w| w[0].score == w[1].score));
        assert_eq!(m.alpha, 0.1);
    }

    #[test]
    fn high_noise_selects_heavy_shrinkage() {
        let train = noisy_pool(60, 30, 5.0, 1);
        let val = noisy_pool(400, 30, 5.0, 2);
        let (m, grid) = tune_cs_regression(&train, &val, Exec::Parallel).unwrap();
        // Exhaustive re-evaluation agrees with the selection.
        let best = grid.iter().fold(grid[0], |b, g| if g.score < b.score { *g } else { b });
        assert_eq!(best.value, m.alpha);
        assert!(m.alpha >= 100.0, "selected {}", m.alpha);
    }

    #[test]
    fn tuning_is_deterministic_and_rejects_empty_val() {
        let train = noisy_pool(50, 5, 1.0, 3);
        let val = noisy_pool(30, 5, 1.0, 4);
        let a = tune_cs_regression(&train, &val, Exec::Parallel).unwrap();
        let b = tune_cs_regression(&train, &val, Exec::Sequential).unwrap();
        assert_eq!(a, b);
        let empty = pool_from(Tensor::zeros(0, 5), vec![]);
        assert!(matches!(tune_cs_regression(&train, &empty, Exec::Sequential), Err(ModelError::EmptyValidation)));
    }

    #[test]
    fn logistic_reaches_newton_optimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 80;
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.gen_range(-2.0..2.0) + 1.0).collect()).collect();
        let labels: Vec<bool> = rows.iter().map(|r| r[0] - 0.5 * r[1] + rng.gen_range(-1.0..1.0) > 0.7).collect();
        let x = Tensor::from_rows(&rows).unwrap();
        for c in [0.01, 1.0] {
            let m = logistic_fit(&x, &labels, c).unwrap();
            let oracle = logistic_newton_oracle(&x, &labels, c);
            let (fm, fo) = (logistic_objective(&m, &x, &labels), logistic_objective(&oracle, &x, &labels));
            assert!(fm <= fo + 1e-6, "C={c}: {fm} vs oracle {fo}");
        }
    }

    #[test]
    fn separable_pair_gives_perfect_auc() {
        let x = mat(&[&[-1.0], &[1.0]]);
        let pool = Pool { x: x.clone(), hours: vec![2.0, 14.0], labels: vec![false, true] };
        let (m, _) = tune_cs_classifier(&pool, &pool, Exec::Sequential).unwrap();
        assert_eq!(metrics::auc(&m.predict_proba(&x), &pool.labels).unwrap(), 1.0);
        let big = logistic_fit(&x, &pool.labels, 10.0).unwrap();
        assert!(big.predict_proba_one(&[1.0]) > 0.8);
    }

    #[test]
    fn single_class_training_is_degenerate() {
        let x = mat(&[&[0.0], &[1.0]]);
        assert!(matches!(logistic_fit(&x, &[true, true], 1.0), Err(ModelError::DegenerateLabels)));
    }

    fn obs(id: &str, i: usize, x: Vec<f64>, hours: f64) -> Observation {
        Observation {
            speaker_id: id.into(),
            seq_index: i,
            embedding: Embedding::new(x).unwrap(),
            target: Target::new(hours).unwrap(),
            demographics: Demographics { sex: Sex::Female, age_group: AgeGroup::Under40, language: Language::Us },
        }
    }

    #[test]
    fn me_identical_history_predicts_mean() {
        let h = [obs("a", 0, vec![1.0, 2.0], 4.0), obs("a", 1, vec![1.0, 2.0], 6.0)];
        let support = SupportSet::new(h.iter().collect());
        let me = MixedEffects::default();
        for q in [[0.0, 0.0], [5.0, -3.0]] {
            assert!((me.predict_hours(&support, &q).unwrap().unwrap() - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn me_recovers_linear_personal_response() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = [0.5, -1.0, 2.0];
        let h: Vec<Observation> = (0..6)
            .map(|i| {
                let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let y = 10.0 + dot(&w, &x);
                obs("a", i, x, y)
            })
            .collect();
        let support = SupportSet::new(h.iter().collect());
        let me = MixedEffects::new(1e-9);
        let q = [0.2, 0.1, -0.3];
        let p = me.predict_hours(&support, &q).unwrap().unwrap();
        assert!((p - (10.0 + dot(&w, &q))).abs() <= 1e-6);
    }

    #[test]
    fn me_refits_every_call_and_skips_short_history() {
        let h = [obs("a", 0, vec![0.0], 4.0), obs("a", 1, vec![1.0], 12.0), obs("a", 2, vec![2.0], 13.0)];
        let me = MixedEffects::default();
        assert_eq!(me.predict_hours(&SupportSet::new(vec![&h[0]]), &[0.0]).unwrap(), None);
        assert_eq!(me.fit_count(), 0);
        for t in 2..=3 {
            me.predict_hours(&SupportSet::new(h[..t].iter().collect()), &[0.5]).unwrap();
            me.predict_score(&SupportSet::new(h[..t].iter().collect()), &[0.5]).unwrap();
        }
        assert_eq!(me.fit_count(), 4);
        let same_class = SupportSet::new(h[1..].iter().collect());
        assert_eq!(me.predict_score(&same_class, &[0.5]).unwrap(), None);
    }

    proptest! {
        #[test]
        fn ridge_invariant_to_row_permutation(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows: Vec<Vec<f64>> = (0..8).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let y: Vec<f64> = (0..8).map(|_| rng.gen_range(0.0..24.0)).collect();
            let mut perm: Vec<usize> = (0..8).collect();
            rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
            let a = ridge_fit(&Tensor::from_rows(&rows).unwrap(), &y, 1.0).unwrap();
            let prow: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
            let py: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
            let b = ridge_fit(&Tensor::from_rows(&prow).unwrap(), &py, 1.0).unwrap();
            let q = [0.3, -0.2, 0.9];
            prop_assert!((a.predict_one(&q) - b.predict_one(&q)).abs() < 1e-10);
        }
    }
}
