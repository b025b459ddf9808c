//! Linear probes over frozen representations: a multinomial logistic head
//! for classification on max-pooled features and a closed-form ridge head
//! for forecasting on last-step features. Both select their regularization
//! strength by seeded k-fold cross-validation and refit on everything.
//!
//! All probe math runs in f64 regardless of the model element type.

use ndgrad::{Scalar, Tensor};
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Error, Result};
use crate::rngutil::rand_below;

// ── feature extraction ──────────────────────────────────────────────────────

/// Max over real timesteps of a [B, T, W] activation, one row per series.
pub fn max_pool_features<E: Scalar>(
    last: &Tensor<E>,
    valid: Option<&[bool]>,
) -> Result<Vec<f64>> {
    let shape = last.shape();
    if shape.len() != 3 {
        return Err(Error::Data(format!(
            "pooling expects [B, T, W], got {shape:?}"
        )));
    }
    let (b_n, t_n, w_n) = (shape[0], shape[1], shape[2]);
    let d = last.data();
    let mut out = vec![f64::NEG_INFINITY; b_n * w_n];
    for b in 0..b_n {
        let mut any = false;
        for t in 0..t_n {
            if let Some(v) = valid {
                if !v[b * t_n + t] {
                    continue;
                }
            }
            any = true;
            let row = &d[(b * t_n + t) * w_n..(b * t_n + t + 1) * w_n];
            let acc = &mut out[b * w_n..(b + 1) * w_n];
            for (a, &v) in acc.iter_mut().zip(row.iter()) {
                let v = Scalar::to_f64(v);
                if v > *a {
                    *a = v;
                }
            }
        }
        if !any {
            return Err(Error::Data(format!(
                "series {b} has no valid timesteps to pool"
            )));
        }
    }
    Ok(out)
}

/// The feature row at each series' final real timestep.
pub fn last_step_features<E: Scalar>(last: &Tensor<E>, lengths: &[usize]) -> Result<Vec<f64>> {
    let shape = last.shape();
    if shape.len() != 3 || shape[0] != lengths.len() {
        return Err(Error::Data(format!(
            "last-step features expect [B, T, W] with one length per series, got {shape:?} and {}",
            lengths.len()
        )));
    }
    let (t_n, w_n) = (shape[1], shape[2]);
    let d = last.data();
    let mut out = Vec::with_capacity(lengths.len() * w_n);
    for (b, &len) in lengths.iter().enumerate() {
        if len == 0 || len > t_n {
            return Err(Error::Data(format!(
                "series {b} has length {len} outside 1..={t_n}"
            )));
        }
        let t = len - 1;
        out.extend(
            d[(b * t_n + t) * w_n..(b * t_n + t + 1) * w_n]
                .iter()
                .map(|&v| Scalar::to_f64(v)),
        );
    }
    Ok(out)
}

// ── shared cross-validation plumbing ────────────────────────────────────────

/// Shuffled assignment of `n` rows to `folds` near-equal validation folds.
fn make_folds(n: usize, folds: usize, rng: &mut (impl RngCore + ?Sized)) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        idx.swap(i, rand_below(rng, i + 1));
    }
    let mut out = vec![Vec::new(); folds];
    for (pos, row) in idx.into_iter().enumerate() {
        out[pos % folds].push(row);
    }
    out
}

fn gather(x: &[f64], d: usize, rows: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        out.extend_from_slice(&x[r * d..(r + 1) * d]);
    }
    out
}

fn column_means(x: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut mean = vec![0.0; d];
    for row in 0..n {
        for j in 0..d {
            mean[j] += x[row * d + j];
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    mean
}

// ── logistic probe ──────────────────────────────────────────────────────────

pub const LAMBDA_GRID: [f64; 7] = [1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3];

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    /// l2 norm of the full gradient at the returned parameters
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            tol: 1e-6,
            max_iter: 20_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LogisticModel {
    pub num_classes: usize,
    pub dim: usize,
    /// [C, d] over centered inputs
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub x_mean: Vec<f64>,
    pub lambda: f64,
}

impl LogisticModel {
    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        let mut s = self.bias.clone();
        for c in 0..self.num_classes {
            let w = &self.weights[c * self.dim..(c + 1) * self.dim];
            for j in 0..self.dim {
                s[c] += w[j] * (x[j] - self.x_mean[j]);
            }
        }
        s
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let s = self.scores(x);
        let mut best = 0;
        for c in 1..self.num_classes {
            if s[c] > s[best] {
                best = c;
            }
        }
        best
    }

    pub fn accuracy(&self, x: &[f64], n: usize, y: &[usize]) -> f64 {
        let hits = (0..n)
            .filter(|&i| self.predict(&x[i * self.dim..(i + 1) * self.dim]) == y[i])
            .count();
        hits as f64 / n as f64
    }
}

/// Largest singular value squared of the intercept-augmented design [X | 1],
/// by power iteration. Deterministic start, slight inflation to keep the
/// derived step size valid even before full convergence.
fn augmented_sigma2(x: &[f64], n: usize, d: usize) -> f64 {
    let dim = d + 1;
    let mut v = vec![1.0 / (dim as f64).sqrt(); dim];
    let mut sigma2 = 0.0;
    for _ in 0..60 {
        // u = A v  (length n)
        let mut u = vec![0.0; n];
        for (row, slot) in u.iter_mut().enumerate() {
            let mut s = v[d]; // intercept column
            for j in 0..d {
                s += x[row * d + j] * v[j];
            }
            *slot = s;
        }
        // w = A^T u (length dim)
        let mut w = vec![0.0; dim];
        for row in 0..n {
            for j in 0..d {
                w[j] += x[row * d + j] * u[row];
            }
            w[d] += u[row];
        }
        let norm = w.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-300 {
            return 0.0;
        }
        sigma2 = norm; // |A^T A v| with |v| = 1
        for (a, b) in v.iter_mut().zip(&w) {
            *a = b / norm;
        }
    }
    sigma2 * 1.02
}

/// Softmax cross-entropy gradient with an l2 penalty on the weights only.
/// Returns the squared l2 norm of the full gradient.
fn logistic_grad(
    xc: &[f64],
    n: usize,
    d: usize,
    y: &[usize],
    c_n: usize,
    lambda: f64,
    w: &[f64],
    b: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
) -> f64 {
    for (g, &wv) in gw.iter_mut().zip(w.iter()) {
        *g = lambda * wv;
    }
    gb.fill(0.0);
    let inv_n = 1.0 / n as f64;
    let mut logits = vec![0.0; c_n];
    for row in 0..n {
        let xr = &xc[row * d..(row + 1) * d];
        for c in 0..c_n {
            let wc = &w[c * d..(c + 1) * d];
            let mut s = b[c];
            for j in 0..d {
                s += wc[j] * xr[j];
            }
            logits[c] = s;
        }
        let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for l in logits.iter_mut() {
            *l = (*l - top).exp();
            z += *l;
        }
        for c in 0..c_n {
            let delta = (logits[c] / z - if y[row] == c { 1.0 } else { 0.0 }) * inv_n;
            gb[c] += delta;
            let gc = &mut gw[c * d..(c + 1) * d];
            for j in 0..d {
                gc[j] += delta * xr[j];
            }
        }
    }
    gw.iter().chain(gb.iter()).map(|g| g * g).sum()
}

/// Accelerated then plain gradient descent on centered inputs, run until the
/// gradient l2 norm sits under `tol` (or the iteration budget runs out).
fn logistic_descent(
    xc: &[f64],
    n: usize,
    d: usize,
    y: &[usize],
    c_n: usize,
    lambda: f64,
    opts: &FitOptions,
) -> (Vec<f64>, Vec<f64>) {
    let lip = 0.5 * augmented_sigma2(xc, n, d) / n as f64 + lambda;
    let step = 1.0 / lip.max(1e-300);
    let mut w = vec![0.0; c_n * d];
    let mut b = vec![0.0; c_n];
    let mut pw = w.clone();
    let mut pb = b.clone();
    let mut gw = vec![0.0; c_n * d];
    let mut gb = vec![0.0; c_n];
    let tol2 = opts.tol * opts.tol;
    let mut accelerated = true;
    for k in 0..opts.max_iter {
        if accelerated {
            // gradient at the extrapolated point drives the update
            let mom = k as f64 / (k as f64 + 3.0);
            let zw: Vec<f64> = w.iter().zip(&pw).map(|(a, p)| a + mom * (a - p)).collect();
            let zb: Vec<f64> = b.iter().zip(&pb).map(|(a, p)| a + mom * (a - p)).collect();
            let g2 = logistic_grad(xc, n, d, y, c_n, lambda, &zw, &zb, &mut gw, &mut gb);
            pw.copy_from_slice(&w);
            pb.copy_from_slice(&b);
            for ((wv, z), g) in w.iter_mut().zip(&zw).zip(&gw) {
                *wv = z - step * g;
            }
            for ((bv, z), g) in b.iter_mut().zip(&zb).zip(&gb) {
                *bv = z - step * g;
            }
            // once the extrapolated gradient settles, finish unaccelerated so
            // the stopping rule measures the returned point itself
            if g2 < 0.25 * tol2 {
                accelerated = false;
            }
        } else {
            let g2 = logistic_grad(xc, n, d, y, c_n, lambda, &w, &b, &mut gw, &mut gb);
            if g2 <= tol2 {
                break;
            }
            for (wv, g) in w.iter_mut().zip(&gw) {
                *wv -= step * g;
            }
            for (bv, g) in b.iter_mut().zip(&gb) {
                *bv -= step * g;
            }
        }
    }
    (w, b)
}

/// Fit at one fixed penalty (no cross-validation). Features are centered
/// inside; since the intercept is unpenalized this is a pure
/// reparameterization and leaves the decision function unchanged.
pub fn fit_logistic_at(
    x: &[f64],
    n: usize,
    d: usize,
    y: &[usize],
    num_classes: usize,
    lambda: f64,
    opts: &FitOptions,
) -> Result<LogisticModel> {
    if n == 0 || d == 0 || y.len() != n || x.len() != n * d {
        return Err(Error::Data("logistic fit: inconsistent feature matrix".into()));
    }
    if num_classes == 0 || y.iter().any(|&c| c >= num_classes) {
        return Err(Error::Data("logistic fit: labels outside the class range".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("logistic fit: non-finite feature".into()));
    }
    let x_mean = column_means(x, n, d);
    let mut xc = x.to_vec();
    for row in 0..n {
        for j in 0..d {
            xc[row * d + j] -= x_mean[j];
        }
    }
    let (weights, bias) = logistic_descent(&xc, n, d, y, num_classes, lambda, opts);
    if weights.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("logistic fit diverged".into()));
    }
    Ok(LogisticModel {
        num_classes,
        dim: d,
        weights,
        bias,
        x_mean,
        lambda,
    })
}

/// Cross-validated fit: the decade grid of penalties, seeded 5-fold splits,
/// mean validation accuracy, ties broken toward the stronger penalty, then a
/// refit on everything at the winner.
pub fn fit_logistic(
    x: &[f64],
    n: usize,
    d: usize,
    y: &[usize],
    num_classes: usize,
    rng: &mut (impl RngCore + ?Sized),
) -> Result<LogisticModel> {
    fit_logistic_with(x, n, d, y, num_classes, rng, &FitOptions::default())
}

pub fn fit_logistic_with(
    x: &[f64],
    n: usize,
    d: usize,
    y: &[usize],
    num_classes: usize,
    rng: &mut (impl RngCore + ?Sized),
    opts: &FitOptions,
) -> Result<LogisticModel> {
    if n == 0 || y.len() != n {
        return Err(Error::Data("logistic fit: no rows".into()));
    }
    // degenerate single-class data admits a trivial exact classifier
    let first = y[0];
    if y.iter().all(|&c| c == first) {
        let mut bias = vec![0.0; num_classes];
        bias[first] = 1.0;
        return Ok(LogisticModel {
            num_classes,
            dim: d,
            weights: vec![0.0; num_classes * d],
            bias,
            x_mean: vec![0.0; d],
            lambda: f64::INFINITY,
        });
    }
    let folds = make_folds(n, 5.min(n), rng);
    let mut best = (f64::NEG_INFINITY, LAMBDA_GRID[0]);
    for &lambda in LAMBDA_GRID.iter() {
        let mut acc_sum = 0.0;
        for fold in &folds {
            let train: Vec<usize> = (0..n).filter(|i| !fold.contains(i)).collect();
            if train.is_empty() {
                continue;
            }
            let xt = gather(x, d, &train);
            let yt: Vec<usize> = train.iter().map(|&i| y[i]).collect();
            let model = fit_logistic_at(&xt, train.len(), d, &yt, num_classes, lambda, opts)?;
            let xv = gather(x, d, fold);
            let yv: Vec<usize> = fold.iter().map(|&i| y[i]).collect();
            acc_sum += model.accuracy(&xv, fold.len(), &yv);
        }
        let acc = acc_sum / folds.len() as f64;
        if acc >= best.0 {
            best = (acc, lambda); // grid ascends, >= prefers the larger tie
        }
    }
    fit_logistic_at(x, n, d, y, num_classes, best.1, opts)
}

// ── ridge probe ─────────────────────────────────────────────────────────────

pub const ALPHA_GRID: [f64; 13] = [
    0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0, 200.0, 500.0, 1000.0,
];

#[derive(Debug, Clone)]
pub struct RidgeModel {
    pub dim: usize,
    pub out_dim: usize,
    /// [d, k] over centered inputs
    pub weights: Vec<f64>,
    pub x_mean: Vec<f64>,
    pub y_mean: Vec<f64>,
    pub alpha: f64,
}

impl RidgeModel {
    pub fn predict(&self, x: &[f64], m: usize) -> Vec<f64> {
        let (d, k) = (self.dim, self.out_dim);
        let mut out = vec![0.0; m * k];
        for row in 0..m {
            let xr = &x[row * d..(row + 1) * d];
            let yr = &mut out[row * k..(row + 1) * k];
            yr.copy_from_slice(&self.y_mean);
            for j in 0..d {
                let xj = xr[j] - self.x_mean[j];
                if xj == 0.0 {
                    continue;
                }
                let wr = &self.weights[j * k..(j + 1) * k];
                for (o, &w) in yr.iter_mut().zip(wr.iter()) {
                    *o += xj * w;
                }
            }
        }
        out
    }
}

/// In-place lower Cholesky factorization and solve for `k` right-hand sides.
/// `a` is [d, d] symmetric positive definite, `b` is [d, k]; `b` ends up
/// holding the solution.
fn cholesky_solve(a: &mut [f64], d: usize, b: &mut [f64], k: usize) -> Result<()> {
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            for p in 0..j {
                s -= a[i * d + p] * a[j * d + p];
            }
            if i == j {
                if !(s > 0.0) {
                    return Err(Error::Numeric(format!(
                        "ridge normal equations lost positive definiteness at pivot {i} ({s})"
                    )));
                }
                a[i * d + i] = s.sqrt();
            } else {
                a[i * d + j] = s / a[j * d + j];
            }
        }
    }
    // forward: L z = b
    for i in 0..d {
        for p in 0..i {
            let l = a[i * d + p];
            for c in 0..k {
                b[i * k + c] -= l * b[p * k + c];
            }
        }
        let inv = 1.0 / a[i * d + i];
        for c in 0..k {
            b[i * k + c] *= inv;
        }
    }
    // backward: L^T w = z
    for i in (0..d).rev() {
        for p in i + 1..d {
            let l = a[p * d + i];
            for c in 0..k {
                b[i * k + c] -= l * b[p * k + c];
            }
        }
        let inv = 1.0 / a[i * d + i];
        for c in 0..k {
            b[i * k + c] *= inv;
        }
    }
    Ok(())
}

/// Closed-form ridge at one fixed penalty: centered normal equations
/// (Xc^T Xc + alpha I) W = Xc^T Yc, Cholesky-solved.
pub fn fit_ridge_at(
    x: &[f64],
    n: usize,
    d: usize,
    y: &[f64],
    k: usize,
    alpha: f64,
) -> Result<RidgeModel> {
    if n == 0 || d == 0 || k == 0 || x.len() != n * d || y.len() != n * k {
        return Err(Error::Data("ridge fit: inconsistent matrices".into()));
    }
    if alpha <= 0.0 {
        return Err(Error::Data(format!("ridge penalty must be > 0, got {alpha}")));
    }
    if x.iter().any(|v| !v.is_finite()) || y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("ridge fit: non-finite input".into()));
    }
    let x_mean = column_means(x, n, d);
    let y_mean = column_means(y, n, k);
    let mut gram = vec![0.0; d * d];
    let mut rhs = vec![0.0; d * k];
    let mut xr = vec![0.0; d];
    let mut yr = vec![0.0; k];
    for row in 0..n {
        for j in 0..d {
            xr[j] = x[row * d + j] - x_mean[j];
        }
        for c in 0..k {
            yr[c] = y[row * k + c] - y_mean[c];
        }
        for i in 0..d {
            if xr[i] == 0.0 {
                continue;
            }
            let gi = &mut gram[i * d..i * d + i + 1];
            for (j, g) in gi.iter_mut().enumerate() {
                *g += xr[i] * xr[j];
            }
            let ri = &mut rhs[i * k..(i + 1) * k];
            for (r, &yv) in ri.iter_mut().zip(yr.iter()) {
                *r += xr[i] * yv;
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            gram[j * d + i] = gram[i * d + j];
        }
        gram[i * d + i] += alpha;
    }
    cholesky_solve(&mut gram, d, &mut rhs, k)?;
    if rhs.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("ridge solution is non-finite".into()));
    }
    Ok(RidgeModel {
        dim: d,
        out_dim: k,
        weights: rhs,
        x_mean,
        y_mean,
        alpha,
    })
}

/// Cross-validated ridge: fixed penalty grid, seeded 5-fold splits, smallest
/// mean validation MSE with ties toward the stronger penalty, refit on all.
pub fn fit_ridge(
    x: &[f64],
    n: usize,
    d: usize,
    y: &[f64],
    k: usize,
    rng: &mut (impl RngCore + ?Sized),
) -> Result<RidgeModel> {
    if n < 2 {
        return fit_ridge_at(x, n, d, y, k, ALPHA_GRID[0]);
    }
    let folds = make_folds(n, 5.min(n), rng);
    let mut best = (f64::INFINITY, ALPHA_GRID[0]);
    for &alpha in ALPHA_GRID.iter() {
        let mut err_sum = 0.0;
        for fold in &folds {
            let train: Vec<usize> = (0..n).filter(|i| !fold.contains(i)).collect();
            let xt = gather(x, d, &train);
            let yt = gather(y, k, &train);
            let model = fit_ridge_at(&xt, train.len(), d, &yt, k, alpha)?;
            let xv = gather(x, d, fold);
            let yv = gather(y, k, fold);
            let pred = model.predict(&xv, fold.len());
            err_sum += mse(&pred, &yv);
        }
        let err = err_sum / folds.len() as f64;
        if err <= best.0 {
            best = (err, alpha); // grid ascends, <= prefers the larger tie
        }
    }
    fit_ridge_at(x, n, d, y, k, best.1)
}

// ── evaluation metrics ──────────────────────────────────────────────────────

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    assert_eq!(pred.len(), truth.len(), "prediction/label count");
    if pred.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / pred.len() as f64
}

pub fn mse(pred: &[f64], truth: &[f64]) -> f64 {
    assert_eq!(pred.len(), truth.len(), "prediction/target count");
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter()
        .zip(truth)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / pred.len() as f64
}

pub fn mae(pred: &[f64], truth: &[f64]) -> f64 {
    assert_eq!(pred.len(), truth.len(), "prediction/target count");
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).map(|(a, b)| (a - b).abs()).sum::<f64>() / pred.len() as f64
}

// ── probe bookkeeping ───────────────────────────────────────────────────────

/// Running maximum of probe scores.
#[derive(Debug, Default, Clone)]
pub struct BestTracker {
    best: Option<f64>,
}

impl BestTracker {
    pub fn new() -> Self {
        BestTracker::default()
    }

    /// Records a score; true when it strictly beats everything seen so far.
    pub fn observe(&mut self, score: f64) -> bool {
        let improved = self.best.is_none_or(|b| score > b);
        if improved {
            self.best = Some(score);
        }
        improved
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }
}

pub fn default_probe_every(total_steps: u64) -> u64 {
    (total_steps / 10).max(50)
}

/// Probe after the step with this 0-based index? Fires every `every`
/// completed steps and always after the final one, so a cadence longer than
/// the run still probes exactly once.
pub fn is_probe_step(step_index: u64, total_steps: u64, every: u64) -> bool {
    let done = step_index + 1;
    done == total_steps || (every > 0 && done % every == 0)
}

/// Probe randomness is derived from the run seed and the step so probing
/// never advances the training stream: a probed and an unprobed run share
/// bit-identical training trajectories.
pub fn probe_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mixed = seed
        ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17)
        ^ 0xA076_1D64_78BD_642F;
    ChaCha8Rng::seed_from_u64(mixed)
}
