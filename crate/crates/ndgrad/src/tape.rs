//! Wengert tape: the ordered record of executed ops, replayed in reverse by
//! `backward` to accumulate vector-Jacobian products into leaf gradients.
//!
//! Each `Op` variant stores handles to the tensors the forward pass touched
//! plus whatever per-op context the reverse pass needs (saved statistics,
//! dropout masks, residuals). Gradients flow only into tensors whose
//! `needs_grad` flag is set; everything else is treated as a constant.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

// ── op record ───────────────────────────────────────────────────────────────

pub(crate) enum Op<E: Scalar> {
    /// out[b,o,t] = bias[o] + sum_{c,j} w[o,c,j] * x[b,c,t + j*dil - pad]
    Conv1d {
        input: Tensor<E>,
        weight: Tensor<E>,
        bias: Tensor<E>,
        out: Tensor<E>,
        dilation: usize,
    },
    /// Train-mode batch norm. `mean`/`invstd` are the statistics actually
    /// used for normalization; `valid` restricts the statistic set (padded
    /// timesteps excluded), `n_stat` is its size.
    BatchNormTrain {
        input: Tensor<E>,
        gamma: Tensor<E>,
        beta: Tensor<E>,
        out: Tensor<E>,
        mean: Vec<E>,
        invstd: Vec<E>,
        valid: Option<Rc<Vec<bool>>>,
        n_stat: usize,
    },
    /// Eval-mode batch norm: a per-channel affine map with frozen statistics.
    BatchNormEval {
        input: Tensor<E>,
        gamma: Tensor<E>,
        beta: Tensor<E>,
        out: Tensor<E>,
        rmean: Vec<E>,
        rinvstd: Vec<E>,
    },
    Gelu {
        input: Tensor<E>,
        out: Tensor<E>,
    },
    Relu {
        input: Tensor<E>,
        out: Tensor<E>,
    },
    Dropout {
        input: Tensor<E>,
        out: Tensor<E>,
        keep: Vec<bool>,
        scale: E,
    },
    Add {
        a: Tensor<E>,
        b: Tensor<E>,
        out: Tensor<E>,
    },
    Mul {
        a: Tensor<E>,
        b: Tensor<E>,
        out: Tensor<E>,
    },
    Sum {
        input: Tensor<E>,
        out: Tensor<E>,
    },
    Scale {
        input: Tensor<E>,
        out: Tensor<E>,
        factor: E,
    },
    /// [B,D1,D2] -> [B,D2,D1]
    SwapBt {
        input: Tensor<E>,
        out: Tensor<E>,
    },
    /// Replaces whole feature columns of a [B,W,T] tensor by `emb`.
    /// `positions` holds flattened b*T + t indices.
    FillMasked {
        input: Tensor<E>,
        emb: Tensor<E>,
        out: Tensor<E>,
        positions: Rc<Vec<usize>>,
    },
    /// Mean smooth-L1 over the selected elements. `diff` is pred - target,
    /// already zeroed outside the selection (huber'(0) = 0, so unselected
    /// entries contribute no gradient).
    SmoothL1 {
        pred: Tensor<E>,
        out: Tensor<E>,
        diff: Vec<E>,
        beta: E,
        count: usize,
    },
    /// Arithmetic mean of scalar inputs.
    MeanScalars {
        inputs: Vec<Tensor<E>>,
        out: Tensor<E>,
    },
}

// ── tape ────────────────────────────────────────────────────────────────────

pub struct Tape<E: Scalar> {
    ops: Vec<Op<E>>,
    recording: bool,
}

impl<E: Scalar> Tape<E> {
    /// Tape that records every grad-relevant op.
    pub fn new() -> Self {
        Tape {
            ops: Vec::new(),
            recording: true,
        }
    }

    /// Tape that records nothing; forwards run detached (teacher, probes).
    pub fn no_grad() -> Self {
        Tape {
            ops: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub(crate) fn record(&mut self, op: Op<E>) {
        debug_assert!(self.recording, "record called on a no-grad tape");
        self.ops.push(op);
    }
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Tape::new()
    }
}

/// Reverse pass. Seeds the scalar loss with 1, then visits every recorded op
/// exactly once in reverse execution order, draining the tape. Gradients
/// accumulate (`+=`) so shared subexpressions and repeated leaves add up.
pub fn backward<E: Scalar>(loss: &Tensor<E>, tape: &mut Tape<E>) -> Result<()> {
    if loss.numel() != 1 {
        return Err(Error::Contract(format!(
            "backward requires a scalar loss, shape is {:?}",
            loss.shape()
        )));
    }
    if loss.needs_grad() {
        loss.accum_grad(&[E::one()]);
    }
    for op in tape.ops.drain(..).rev() {
        backward_op(&op);
    }
    Ok(())
}

// ── per-op vector-Jacobian products ─────────────────────────────────────────

fn backward_op<E: Scalar>(op: &Op<E>) {
    match op {
        Op::Conv1d {
            input,
            weight,
            bias,
            out,
            dilation,
        } => {
            let og = out.grad();
            let Some(og) = og else { return };
            let (b_n, c_in, t_n) = (input.shape()[0], input.shape()[1], input.shape()[2]);
            let c_out = weight.shape()[0];
            let k = weight.shape()[2];
            let pad = (dilation * (k - 1) / 2) as isize;

            if bias.needs_grad() {
                let mut db = bias.grad_slot();
                for b in 0..b_n {
                    for o in 0..c_out {
                        let row = &og[(b * c_out + o) * t_n..(b * c_out + o + 1) * t_n];
                        let mut acc = E::zero();
                        for v in row {
                            acc += *v;
                        }
                        db[o] += acc;
                    }
                }
            }
            if weight.needs_grad() {
                let x = input.data();
                let mut dw = weight.grad_slot();
                for o in 0..c_out {
                    for c in 0..c_in {
                        for j in 0..k {
                            let shift = (j * dilation) as isize - pad;
                            let (t0, t1) = shifted_range(t_n, shift);
                            if t0 >= t1 {
                                continue;
                            }
                            let mut acc = E::zero();
                            for b in 0..b_n {
                                let orow = &og[(b * c_out + o) * t_n..(b * c_out + o + 1) * t_n];
                                let xrow = &x[(b * c_in + c) * t_n..(b * c_in + c + 1) * t_n];
                                let src = &xrow[(t0 as isize + shift) as usize
                                    ..(t1 as isize + shift) as usize];
                                for (g, xv) in orow[t0..t1].iter().zip(src) {
                                    acc += *g * *xv;
                                }
                            }
                            dw[(o * c_in + c) * k + j] += acc;
                        }
                    }
                }
            }
            if input.needs_grad() {
                let w = weight.data();
                let mut dx = input.grad_slot();
                for b in 0..b_n {
                    for c in 0..c_in {
                        let drow = &mut dx[(b * c_in + c) * t_n..(b * c_in + c + 1) * t_n];
                        for o in 0..c_out {
                            let orow = &og[(b * c_out + o) * t_n..(b * c_out + o + 1) * t_n];
                            for j in 0..k {
                                // d_x[s] += w[o,c,j] * d_out[s - (j*dil - pad)]
                                let shift = pad - (j * dilation) as isize;
                                let (t0, t1) = shifted_range(t_n, shift);
                                if t0 >= t1 {
                                    continue;
                                }
                                let wv = w[(o * c_in + c) * k + j];
                                let src = &orow[(t0 as isize + shift) as usize
                                    ..(t1 as isize + shift) as usize];
                                for (d, g) in drow[t0..t1].iter_mut().zip(src) {
                                    *d += wv * *g;
                                }
                            }
                        }
                    }
                }
            }
        }

        Op::BatchNormTrain {
            input,
            gamma,
            beta,
            out,
            mean,
            invstd,
            valid,
            n_stat,
        } => {
            let og = out.grad();
            let Some(og) = og else { return };
            let (b_n, c_n, t_n) = (input.shape()[0], input.shape()[1], input.shape()[2]);
            let x = input.data();
            let g = gamma.data();
            let n = E::from_f64(*n_stat as f64);

            for c in 0..c_n {
                let mu = mean[c];
                let is = invstd[c];
                let mut s1 = E::zero();
                let mut s2 = E::zero();
                for b in 0..b_n {
                    let base = (b * c_n + c) * t_n;
                    for t in 0..t_n {
                        let d = og[base + t];
                        let xh = (x[base + t] - mu) * is;
                        s1 += d;
                        s2 += d * xh;
                    }
                }
                if gamma.needs_grad() {
                    gamma.grad_slot()[c] += s2;
                }
                if beta.needs_grad() {
                    beta.grad_slot()[c] += s1;
                }
                if input.needs_grad() {
                    // Inside the statistic set the normalization couples every
                    // position through mean and variance; outside it only the
                    // direct affine term survives.
                    let k1 = s1 / n;
                    let k2 = s2 / n;
                    let gis = g[c] * is;
                    let mut dx = input.grad_slot();
                    for b in 0..b_n {
                        let base = (b * c_n + c) * t_n;
                        for t in 0..t_n {
                            let d = og[base + t];
                            let in_stats = valid.as_ref().map_or(true, |v| v[b * t_n + t]);
                            if in_stats {
                                let xh = (x[base + t] - mu) * is;
                                dx[base + t] += gis * (d - k1 - xh * k2);
                            } else {
                                dx[base + t] += gis * d;
                            }
                        }
                    }
                }
            }
        }

        Op::BatchNormEval {
            input,
            gamma,
            beta,
            out,
            rmean,
            rinvstd,
        } => {
            let og = out.grad();
            let Some(og) = og else { return };
            let (b_n, c_n, t_n) = (input.shape()[0], input.shape()[1], input.shape()[2]);
            let x = input.data();
            let g = gamma.data();
            for c in 0..c_n {
                let rm = rmean[c];
                let ri = rinvstd[c];
                let mut s1 = E::zero();
                let mut s2 = E::zero();
                for b in 0..b_n {
                    let base = (b * c_n + c) * t_n;
                    for t in 0..t_n {
                        let d = og[base + t];
                        s1 += d;
                        s2 += d * (x[base + t] - rm) * ri;
                    }
                }
                if gamma.needs_grad() {
                    gamma.grad_slot()[c] += s2;
                }
                if beta.needs_grad() {
                    beta.grad_slot()[c] += s1;
                }
                if input.needs_grad() {
                    let gri = g[c] * ri;
                    let mut dx = input.grad_slot();
                    for b in 0..b_n {
                        let base = (b * c_n + c) * t_n;
                        for t in 0..t_n {
                            dx[base + t] += gri * og[base + t];
                        }
                    }
                }
            }
        }

        Op::Gelu { input, out } => {
            let og = out.grad();
            let Some(og) = og else { return };
            if !input.needs_grad() {
                return;
            }
            let x = input.data();
            let mut dx = input.grad_slot();
            let c0 = E::from_f64(crate::ops::GELU_SQRT_2_OVER_PI);
            let c1 = E::from_f64(crate::ops::GELU_CUBIC);
            let half = E::from_f64(0.5);
            let three = E::from_f64(3.0);
            for i in 0..x.len() {
                let xi = x[i];
                let u = c0 * (xi + c1 * xi * xi * xi);
                let th = u.tanh();
                let sech2 = E::one() - th * th;
                let du = c0 * (E::one() + three * c1 * xi * xi);
                let d = half * (E::one() + th) + half * xi * sech2 * du;
                dx[i] += og[i] * d;
            }
        }

        Op::Relu { input, out } => {
            let og = out.grad();
            let Some(og) = og else { return };
            if !input.needs_grad() {
                return;
            }
            let x = input.data();
            let mut dx = input.grad_slot();
            for i in 0..x.len() {
                // subgradient 0 at the kink
                if x[i] > E::zero() {
                    dx[i] += og[i];
                }
            }
        }

        Op::Dropout {
            input,
            out,
            keep,
            scale,
        } => {
            let og = out.grad();
            let Some(og) = og else { return };
            if !input.needs_grad() {
                return;
            }
            let mut dx = input.grad_slot();
            for i in 0..keep.len() {
                if keep[i] {
                    dx[i] += og[i] * *scale;
                }
            }
        }

        Op::Add { a, b, out } => {
            let og = out.grad();
            let Some(og) = og else { return };
            if a.needs_grad() {
                a.accum_grad(&og);
            }
            if b.needs_grad() {
                b.accum_grad(&og);
            }
        }

        Op::Mul { a, b, out } => {
            let og = out.grad();
            let Some(og) = og else { return };
            if a.needs_grad() {
                let bv = b.data();
                let mut da = a.grad_slot();
                for i in 0..og.len() {
                    da[i] += og[i] * bv[i];
                }
            }
            if b.needs_grad() {
                let av = a.data();
                let mut db = b.grad_slot();
                for i in 0..og.len() {
                    db[i] += og[i] * av[i];
                }
            }
        }

        Op::Sum { input, out } => {
            let og = out.grad();
            let Some(og) = og else { return };
            if !input.needs_grad() {
                return;
            }
            let seed = og[0];
            let mut dx = input.grad_slot();
            for d in dx.iter_mut() {
                *d += seed;
            }
        }

        Op::Scale { input, out, factor } => {
            let og = out.grad();
            let Some(og) = og else { return };
            if !input.needs_grad() {
                return;
            }
            let mut dx = input.grad_slot();
            for i in 0..og.len() {
                dx[i] += og[i] * *factor;
            }
        }

        Op::SwapBt { input, out } => {
            let og = out.grad();
            let Some(og) = og else { return };
            if !input.needs_grad() {
                return;
            }
            let (b_n, d1, d2) = (input.shape()[0], input.shape()[1], input.shape()[2]);
            let mut dx = input.grad_slot();
            for b in 0..b_n {
                for i in 0..d1 {
                    for j in 0..d2 {
                        dx[(b * d1 + i) * d2 + j] += og[(b * d2 + j) * d1 + i];
                    }
                }
            }
        }

        Op::FillMasked {
            input,
            emb,
            out,
            positions,
        } => {
            let og = out.grad();
            let Some(og) = og else { return };
            let (b_n, w_n, t_n) = (input.shape()[0], input.shape()[1], input.shape()[2]);
            if emb.needs_grad() {
                let mut de = emb.grad_slot();
                for &pos in positions.iter() {
                    let (b, t) = (pos / t_n, pos % t_n);
                    for w in 0..w_n {
                        de[w] += og[(b * w_n + w) * t_n + t];
                    }
                }
            }
            if input.needs_grad() {
                // masked columns took their value from emb, not input
                let mut replaced = vec![false; b_n * t_n];
                for &pos in positions.iter() {
                    replaced[pos] = true;
                }
                let mut dx = input.grad_slot();
                for b in 0..b_n {
                    for w in 0..w_n {
                        let base = (b * w_n + w) * t_n;
                        for t in 0..t_n {
                            if !replaced[b * t_n + t] {
                                dx[base + t] += og[base + t];
                            }
                        }
                    }
                }
            }
        }

        Op::SmoothL1 {
            pred,
            out,
            diff,
            beta,
            count,
        } => {
            let og = out.grad();
            let Some(og) = og else { return };
            if !pred.needs_grad() {
                return;
            }
            let upstream = og[0] / E::from_f64(*count as f64);
            let mut dp = pred.grad_slot();
            for i in 0..diff.len() {
                let d = diff[i];
                let g = if d.abs() < *beta {
                    d / *beta
                } else if d > E::zero() {
                    E::one()
                } else if d < E::zero() {
                    -E::one()
                } else {
                    E::zero()
                };
                dp[i] += upstream * g;
            }
        }

        Op::MeanScalars { inputs, out } => {
            let og = out.grad();
            let Some(og) = og else { return };
            let share = og[0] / E::from_f64(inputs.len() as f64);
            for inp in inputs {
                if inp.needs_grad() {
                    inp.accum_grad(&[share]);
                }
            }
        }
    }
}

/// Valid output range [t0, t1) such that t + shift stays inside [0, t_n)
/// for every t in the range.
#[inline]
pub(crate) fn shifted_range(t_n: usize, shift: isize) -> (usize, usize) {
    if shift >= 0 {
        let s = shift as usize;
        if s >= t_n {
            (0, 0)
        } else {
            (0, t_n - s)
        }
    } else {
        let s = (-shift) as usize;
        if s >= t_n {
            (0, 0)
        } else {
            (s, t_n)
        }
    }
}
