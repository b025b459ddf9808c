//! Forward implementations. Each op validates shapes, computes its output,
//! and records itself on the tape when (a) the tape is recording and (b) at
//! least one input needs a gradient. Outputs inherit that flag, which is how
//! reachability propagates through the graph.

use std::rc::Rc;

use rand_core::RngCore;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{shifted_range, Op, Tape};
use crate::tensor::Tensor;

/// tanh-approximation constants, shared with the backward pass
pub(crate) const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
pub(crate) const GELU_CUBIC: f64 = 0.044_715;

/// Forward semantics toggle: training uses batch statistics and active
/// dropout, eval uses running statistics and identity dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel running mean/variance owned by a batch-norm layer.
/// Initialized to (0, 1) so an untrained eval pass is a plain identity
/// up to the affine parameters.
#[derive(Debug, Clone)]
pub struct RunningStats<E: Scalar> {
    pub mean: Vec<E>,
    pub var: Vec<E>,
}

impl<E: Scalar> RunningStats<E> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![E::zero(); channels],
            var: vec![E::one(); channels],
        }
    }
}

#[inline]
fn u01(rng: &mut dyn RngCore) -> f64 {
    // 53 uniform mantissa bits in [0, 1)
    (rng.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
}

fn should_record<E: Scalar>(tape: &Tape<E>, inputs: &[&Tensor<E>]) -> bool {
    tape.is_recording() && inputs.iter().any(|t| t.needs_grad())
}

// ── convolution ─────────────────────────────────────────────────────────────

/// Same-length dilated 1D convolution over [B, C_in, T] with kernel
/// [C_out, C_in, k] and bias [C_out]. Symmetric zero padding dilation*(k-1)/2
/// keeps the output at [B, C_out, T]; k must be odd for that symmetry.
pub fn conv1d<E: Scalar>(
    tape: &mut Tape<E>,
    input: &Tensor<E>,
    weight: &Tensor<E>,
    bias: &Tensor<E>,
    dilation: usize,
) -> Result<Tensor<E>> {
    if input.shape().len() != 3 || weight.shape().len() != 3 {
        return Err(Error::Dim(format!(
            "conv1d expects input [B,C,T] and weight [O,C,k], got {:?} and {:?}",
            input.shape(),
            weight.shape()
        )));
    }
    let (b_n, c_in, t_n) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (c_out, w_cin, k) = (weight.shape()[0], weight.shape()[1], weight.shape()[2]);
    if w_cin != c_in {
        return Err(Error::Dim(format!(
            "conv1d channel mismatch: input has {c_in}, weight expects {w_cin}"
        )));
    }
    if bias.shape() != [c_out] {
        return Err(Error::Dim(format!(
            "conv1d bias shape {:?} does not match {c_out} output channels",
            bias.shape()
        )));
    }
    if dilation == 0 {
        return Err(Error::Param("conv1d dilation must be >= 1".into()));
    }
    if k % 2 == 0 {
        return Err(Error::Param(format!(
            "conv1d kernel size {k} must be odd for symmetric same-length padding"
        )));
    }
    let pad = (dilation * (k - 1) / 2) as isize;

    let x = input.data();
    let w = weight.data();
    let bv = bias.data();
    let mut out = vec![E::zero(); b_n * c_out * t_n];
    for (row_idx, orow) in out.chunks_mut(t_n).enumerate() {
        let b = row_idx / c_out;
        let o = row_idx % c_out;
        orow.fill(bv[o]);
        for c in 0..c_in {
            let xrow = &x[(b * c_in + c) * t_n..(b * c_in + c + 1) * t_n];
            for j in 0..k {
                let wv = w[(o * c_in + c) * k + j];
                let shift = (j * dilation) as isize - pad;
                let (t0, t1) = shifted_range(t_n, shift);
                if t0 >= t1 {
                    continue;
                }
                let src = &xrow[(t0 as isize + shift) as usize..(t1 as isize + shift) as usize];
                for (d, s) in orow[t0..t1].iter_mut().zip(src) {
                    *d += wv * *s;
                }
            }
        }
    }
    drop((x, w, bv));

    let out = Tensor::from_vec(&[b_n, c_out, t_n], out)?;
    out.debug_assert_finite("conv1d");
    if should_record(tape, &[input, weight, bias]) {
        out.set_requires_grad(true);
        tape.record(Op::Conv1d {
            input: input.clone(),
            weight: weight.clone(),
            bias: bias.clone(),
            out: out.clone(),
            dilation,
        });
    }
    Ok(out)
}

// ── batch normalization ─────────────────────────────────────────────────────

/// Batch norm over [B, C, T], statistics per channel across (B, T).
///
/// Train mode normalizes with batch statistics restricted to `valid`
/// positions (padding must not pollute the statistics), updates the running
/// buffers with `momentum` (unbiased variance, matching the usual
/// running-average convention), and records the op. Eval mode applies the
/// frozen running statistics. Every position is normalized either way; only
/// the statistic set shrinks.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm1d<E: Scalar>(
    tape: &mut Tape<E>,
    input: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    running: &mut RunningStats<E>,
    mode: Mode,
    valid: Option<&Rc<Vec<bool>>>,
    eps: f64,
    momentum: f64,
) -> Result<Tensor<E>> {
    if input.shape().len() != 3 {
        return Err(Error::Dim(format!(
            "batch_norm1d expects [B,C,T], got {:?}",
            input.shape()
        )));
    }
    let (b_n, c_n, t_n) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    if gamma.shape() != [c_n] || beta.shape() != [c_n] || running.mean.len() != c_n {
        return Err(Error::Dim(format!(
            "batch_norm1d affine/running buffers must have length {c_n}"
        )));
    }
    if let Some(v) = valid {
        if v.len() != b_n * t_n {
            return Err(Error::Dim(format!(
                "validity mask length {} does not match B*T = {}",
                v.len(),
                b_n * t_n
            )));
        }
    }
    if eps <= 0.0 {
        return Err(Error::Param("batch_norm1d eps must be > 0".into()));
    }
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::Param("batch_norm1d momentum must be in [0,1]".into()));
    }

    let x = input.data();
    let g = gamma.data();
    let be = beta.data();
    let mut out = vec![E::zero(); b_n * c_n * t_n];

    match mode {
        Mode::Train => {
            let n_stat = match valid {
                Some(v) => v.iter().filter(|&&f| f).count(),
                None => b_n * t_n,
            };
            if n_stat < 2 {
                return Err(Error::Contract(format!(
                    "batch_norm1d train mode needs at least 2 statistic samples, got {n_stat}"
                )));
            }
            let n = E::from_f64(n_stat as f64);
            let mut mean = vec![E::zero(); c_n];
            let mut invstd = vec![E::zero(); c_n];
            let eps_e = E::from_f64(eps);
            let mom = E::from_f64(momentum);
            let one_m = E::from_f64(1.0 - momentum);
            let bessel = E::from_f64(n_stat as f64 / (n_stat as f64 - 1.0));

            for c in 0..c_n {
                let mut s = E::zero();
                for b in 0..b_n {
                    let base = (b * c_n + c) * t_n;
                    match valid {
                        Some(v) => {
                            for t in 0..t_n {
                                if v[b * t_n + t] {
                                    s += x[base + t];
                                }
                            }
                        }
                        None => {
                            for t in 0..t_n {
                                s += x[base + t];
                            }
                        }
                    }
                }
                let mu = s / n;
                let mut sq = E::zero();
                for b in 0..b_n {
                    let base = (b * c_n + c) * t_n;
                    match valid {
                        Some(v) => {
                            for t in 0..t_n {
                                if v[b * t_n + t] {
                                    let d = x[base + t] - mu;
                                    sq += d * d;
                                }
                            }
                        }
                        None => {
                            for t in 0..t_n {
                                let d = x[base + t] - mu;
                                sq += d * d;
                            }
                        }
                    }
                }
                let var = sq / n;
                let is = E::one() / (var + eps_e).sqrt();
                mean[c] = mu;
                invstd[c] = is;
                running.mean[c] = one_m * running.mean[c] + mom * mu;
                running.var[c] = one_m * running.var[c] + mom * var * bessel;

                let gc = g[c];
                let bc = be[c];
                for b in 0..b_n {
                    let base = (b * c_n + c) * t_n;
                    for t in 0..t_n {
                        out[base + t] = gc * (x[base + t] - mu) * is + bc;
                    }
                }
            }
            drop((x, g, be));
            let out = Tensor::from_vec(&[b_n, c_n, t_n], out)?;
            out.debug_assert_finite("batch_norm1d[train]");
            if should_record(tape, &[input, gamma, beta]) {
                out.set_requires_grad(true);
                tape.record(Op::BatchNormTrain {
                    input: input.clone(),
                    gamma: gamma.clone(),
                    beta: beta.clone(),
                    out: out.clone(),
                    mean,
                    invstd,
                    valid: valid.cloned(),
                    n_stat,
                });
            }
            Ok(out)
        }
        Mode::Eval => {
            let eps_e = E::from_f64(eps);
            let mut rinvstd = vec![E::zero(); c_n];
            for c in 0..c_n {
                rinvstd[c] = E::one() / (running.var[c] + eps_e).sqrt();
                let rm = running.mean[c];
                let ri = rinvstd[c];
                let gc = g[c];
                let bc = be[c];
                for b in 0..b_n {
                    let base = (b * c_n + c) * t_n;
                    for t in 0..t_n {
                        out[base + t] = gc * (x[base + t] - rm) * ri + bc;
                    }
                }
            }
            let rmean = running.mean.clone();
            drop((x, g, be));
            let out = Tensor::from_vec(&[b_n, c_n, t_n], out)?;
            out.debug_assert_finite("batch_norm1d[eval]");
            if should_record(tape, &[input, gamma, beta]) {
                out.set_requires_grad(true);
                tape.record(Op::BatchNormEval {
                    input: input.clone(),
                    gamma: gamma.clone(),
                    beta: beta.clone(),
                    out: out.clone(),
                    rmean,
                    rinvstd,
                });
            }
            Ok(out)
        }
    }
}

// ── activations ─────────────────────────────────────────────────────────────

/// GELU, tanh approximation: 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³))).
pub fn gelu<E: Scalar>(tape: &mut Tape<E>, input: &Tensor<E>) -> Tensor<E> {
    let c0 = E::from_f64(GELU_SQRT_2_OVER_PI);
    let c1 = E::from_f64(GELU_CUBIC);
    let half = E::from_f64(0.5);
    let x = input.data();
    let mut out = vec![E::zero(); x.len()];
    for i in 0..x.len() {
        let xi = x[i];
        let u = c0 * (xi + c1 * xi * xi * xi);
        out[i] = half * xi * (E::one() + u.tanh());
    }
    drop(x);
    let out = Tensor::from_vec(input.shape(), out).expect("gelu preserves shape");
    out.debug_assert_finite("gelu");
    if should_record(tape, &[input]) {
        out.set_requires_grad(true);
        tape.record(Op::Gelu {
            input: input.clone(),
            out: out.clone(),
        });
    }
    out
}

pub fn relu<E: Scalar>(tape: &mut Tape<E>, input: &Tensor<E>) -> Tensor<E> {
    let x = input.data();
    let mut out = vec![E::zero(); x.len()];
    for i in 0..x.len() {
        out[i] = if x[i] > E::zero() { x[i] } else { E::zero() };
    }
    drop(x);
    let out = Tensor::from_vec(input.shape(), out).expect("relu preserves shape");
    if should_record(tape, &[input]) {
        out.set_requires_grad(true);
        tape.record(Op::Relu {
            input: input.clone(),
            out: out.clone(),
        });
    }
    out
}

// ── dropout ─────────────────────────────────────────────────────────────────

/// Inverted dropout: kept elements are scaled by 1/(1-rate) so the expected
/// value is preserved. Eval mode and rate 0 are exact identities that draw
/// nothing from the RNG.
pub fn dropout<E: Scalar>(
    tape: &mut Tape<E>,
    input: &Tensor<E>,
    rate: f64,
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<Tensor<E>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Param(format!(
            "dropout rate must be in [0, 1), got {rate}"
        )));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(input.clone());
    }
    let scale = E::from_f64(1.0 / (1.0 - rate));
    let x = input.data();
    let mut keep = vec![false; x.len()];
    let mut out = vec![E::zero(); x.len()];
    for i in 0..x.len() {
        if u01(rng) >= rate {
            keep[i] = true;
            out[i] = x[i] * scale;
        }
    }
    drop(x);
    let out = Tensor::from_vec(input.shape(), out).expect("dropout preserves shape");
    out.debug_assert_finite("dropout");
    if should_record(tape, &[input]) {
        out.set_requires_grad(true);
        tape.record(Op::Dropout {
            input: input.clone(),
            out: out.clone(),
            keep,
            scale,
        });
    }
    Ok(out)
}

// ── elementwise and reductions ──────────────────────────────────────────────

pub fn add<E: Scalar>(tape: &mut Tape<E>, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    if a.shape() != b.shape() {
        return Err(Error::Dim(format!(
            "add shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let av = a.data();
    let bv = b.data();
    let out: Vec<E> = av.iter().zip(bv.iter()).map(|(x, y)| *x + *y).collect();
    drop((av, bv));
    let out = Tensor::from_vec(a.shape(), out)?;
    out.debug_assert_finite("add");
    if should_record(tape, &[a, b]) {
        out.set_requires_grad(true);
        tape.record(Op::Add {
            a: a.clone(),
            b: b.clone(),
            out: out.clone(),
        });
    }
    Ok(out)
}

pub fn mul<E: Scalar>(tape: &mut Tape<E>, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    if a.shape() != b.shape() {
        return Err(Error::Dim(format!(
            "mul shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let av = a.data();
    let bv = b.data();
    let out: Vec<E> = av.iter().zip(bv.iter()).map(|(x, y)| *x * *y).collect();
    drop((av, bv));
    let out = Tensor::from_vec(a.shape(), out)?;
    out.debug_assert_finite("mul");
    if should_record(tape, &[a, b]) {
        out.set_requires_grad(true);
        tape.record(Op::Mul {
            a: a.clone(),
            b: b.clone(),
            out: out.clone(),
        });
    }
    Ok(out)
}

/// Sum of all elements, as a scalar tensor.
pub fn sum<E: Scalar>(tape: &mut Tape<E>, input: &Tensor<E>) -> Tensor<E> {
    let x = input.data();
    let mut acc = E::zero();
    for v in x.iter() {
        acc += *v;
    }
    drop(x);
    let out = Tensor::scalar(acc);
    if should_record(tape, &[input]) {
        out.set_requires_grad(true);
        tape.record(Op::Sum {
            input: input.clone(),
            out: out.clone(),
        });
    }
    out
}

pub fn scale<E: Scalar>(tape: &mut Tape<E>, input: &Tensor<E>, factor: f64) -> Tensor<E> {
    let f = E::from_f64(factor);
    let x = input.data();
    let out: Vec<E> = x.iter().map(|v| *v * f).collect();
    drop(x);
    let out = Tensor::from_vec(input.shape(), out).expect("scale preserves shape");
    if should_record(tape, &[input]) {
        out.set_requires_grad(true);
        tape.record(Op::Scale {
            input: input.clone(),
            out: out.clone(),
            factor: f,
        });
    }
    out
}

/// [B, D1, D2] -> [B, D2, D1]. Used to hand [B,W,T] activations to consumers
/// that want per-timestep feature vectors contiguous.
pub fn swap_bt<E: Scalar>(tape: &mut Tape<E>, input: &Tensor<E>) -> Result<Tensor<E>> {
    if input.shape().len() != 3 {
        return Err(Error::Dim(format!(
            "swap_bt expects a rank-3 tensor, got {:?}",
            input.shape()
        )));
    }
    let (b_n, d1, d2) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let x = input.data();
    let mut out = vec![E::zero(); x.len()];
    for b in 0..b_n {
        for i in 0..d1 {
            let base = (b * d1 + i) * d2;
            for j in 0..d2 {
                out[(b * d2 + j) * d1 + i] = x[base + j];
            }
        }
    }
    drop(x);
    let out = Tensor::from_vec(&[b_n, d2, d1], out)?;
    if should_record(tape, &[input]) {
        out.set_requires_grad(true);
        tape.record(Op::SwapBt {
            input: input.clone(),
            out: out.clone(),
        });
    }
    Ok(out)
}

/// Replaces the feature column of a [B, W, T] tensor by `emb` ([W]) at each
/// flattened b*T + t position. Gradients flow to the embedding at replaced
/// columns and to the input everywhere else.
pub fn fill_masked<E: Scalar>(
    tape: &mut Tape<E>,
    input: &Tensor<E>,
    emb: &Tensor<E>,
    positions: Rc<Vec<usize>>,
) -> Result<Tensor<E>> {
    if input.shape().len() != 3 {
        return Err(Error::Dim(format!(
            "fill_masked expects [B,W,T], got {:?}",
            input.shape()
        )));
    }
    let (b_n, w_n, t_n) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    if emb.shape() != [w_n] {
        return Err(Error::Dim(format!(
            "fill_masked embedding shape {:?} does not match width {w_n}",
            emb.shape()
        )));
    }
    if let Some(&bad) = positions.iter().find(|&&p| p >= b_n * t_n) {
        return Err(Error::Param(format!(
            "fill_masked position {bad} out of range for B*T = {}",
            b_n * t_n
        )));
    }
    let x = input.data();
    let e = emb.data();
    let mut out = x.clone();
    for &pos in positions.iter() {
        let (b, t) = (pos / t_n, pos % t_n);
        for w in 0..w_n {
            out[(b * w_n + w) * t_n + t] = e[w];
        }
    }
    drop((x, e));
    let out = Tensor::from_vec(&[b_n, w_n, t_n], out)?;
    if should_record(tape, &[input, emb]) {
        out.set_requires_grad(true);
        tape.record(Op::FillMasked {
            input: input.clone(),
            emb: emb.clone(),
            out: out.clone(),
            positions,
        });
    }
    Ok(out)
}

// ── losses ──────────────────────────────────────────────────────────────────

#[inline]
fn huber<E: Scalar>(d: E, beta: E, half: E) -> E {
    if d.abs() < beta {
        half * d * d / beta
    } else {
        d.abs() - half * beta
    }
}

/// Mean smooth-L1 (Huber) over all elements. The target is a constant:
/// no gradient ever flows into it.
pub fn smooth_l1<E: Scalar>(
    tape: &mut Tape<E>,
    pred: &Tensor<E>,
    target: &Tensor<E>,
    beta: f64,
) -> Result<Tensor<E>> {
    if pred.shape() != target.shape() {
        return Err(Error::Dim(format!(
            "smooth_l1 shape mismatch: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    if beta <= 0.0 {
        return Err(Error::Param(format!("smooth_l1 beta must be > 0, got {beta}")));
    }
    let b = E::from_f64(beta);
    let half = E::from_f64(0.5);
    let p = pred.data();
    let t = target.data();
    let count = p.len();
    let mut diff = vec![E::zero(); count];
    let mut acc = E::zero();
    for i in 0..count {
        let d = p[i] - t[i];
        diff[i] = d;
        acc += huber(d, b, half);
    }
    drop((p, t));
    let out = Tensor::scalar(acc / E::from_f64(count as f64));
    out.debug_assert_finite("smooth_l1");
    if should_record(tape, &[pred]) {
        out.set_requires_grad(true);
        tape.record(Op::SmoothL1 {
            pred: pred.clone(),
            out: out.clone(),
            diff,
            beta: b,
            count,
        });
    }
    Ok(out)
}

/// Mean smooth-L1 restricted to selected (b, t) positions of a [B, T, W]
/// prediction; the mean divides by selected_positions * W. Errors if the
/// selection is empty.
pub fn smooth_l1_masked<E: Scalar>(
    tape: &mut Tape<E>,
    pred: &Tensor<E>,
    target: &Tensor<E>,
    selected: &[bool],
    beta: f64,
) -> Result<Tensor<E>> {
    if pred.shape() != target.shape() || pred.shape().len() != 3 {
        return Err(Error::Dim(format!(
            "smooth_l1_masked expects matching [B,T,W] tensors, got {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let (b_n, t_n, w_n) = (pred.shape()[0], pred.shape()[1], pred.shape()[2]);
    if selected.len() != b_n * t_n {
        return Err(Error::Dim(format!(
            "selection length {} does not match B*T = {}",
            selected.len(),
            b_n * t_n
        )));
    }
    if beta <= 0.0 {
        return Err(Error::Param(format!("smooth_l1 beta must be > 0, got {beta}")));
    }
    let n_sel = selected.iter().filter(|&&s| s).count();
    if n_sel == 0 {
        return Err(Error::Param(
            "smooth_l1_masked requires a non-empty selection".into(),
        ));
    }
    let b = E::from_f64(beta);
    let half = E::from_f64(0.5);
    let count = n_sel * w_n;
    let p = pred.data();
    let t = target.data();
    let mut diff = vec![E::zero(); p.len()];
    let mut acc = E::zero();
    for bt in 0..b_n * t_n {
        if !selected[bt] {
            continue;
        }
        let base = bt * w_n;
        for w in 0..w_n {
            let d = p[base + w] - t[base + w];
            diff[base + w] = d;
            acc += huber(d, b, half);
        }
    }
    drop((p, t));
    let out = Tensor::scalar(acc / E::from_f64(count as f64));
    out.debug_assert_finite("smooth_l1_masked");
    if should_record(tape, &[pred]) {
        out.set_requires_grad(true);
        tape.record(Op::SmoothL1 {
            pred: pred.clone(),
            out: out.clone(),
            diff,
            beta: b,
            count,
        });
    }
    Ok(out)
}

/// Arithmetic mean of scalar tensors (per-student losses).
pub fn mean_scalars<E: Scalar>(tape: &mut Tape<E>, inputs: &[Tensor<E>]) -> Result<Tensor<E>> {
    if inputs.is_empty() {
        return Err(Error::Param("mean_scalars requires at least one input".into()));
    }
    let mut acc = E::zero();
    for t in inputs {
        if t.numel() != 1 {
            return Err(Error::Dim(format!(
                "mean_scalars inputs must be scalars, got {:?}",
                t.shape()
            )));
        }
        acc += t.data()[0];
    }
    let out = Tensor::scalar(acc / E::from_f64(inputs.len() as f64));
    if tape.is_recording() && inputs.iter().any(|t| t.needs_grad()) {
        out.set_requires_grad(true);
        tape.record(Op::MeanScalars {
            inputs: inputs.to_vec(),
            out: out.clone(),
        });
    }
    Ok(out)
}
