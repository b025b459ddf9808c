//! Self-distillation pretraining. A student encoder predicts, at masked
//! timesteps, latent targets produced by an exponential-moving-average
//! teacher running on the unmasked input. Several masked views per batch
//! share one target computation; the teacher follows the student through a
//! schedule of growing decay so it ages from fast follower to near-frozen.

use std::rc::Rc;

use ndgrad::{
    adam_step, backward, mean_scalars, smooth_l1_masked, AdamState, Mode, OneCycleSchedule,
    Scalar, Tape, Tensor,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_core::RngCore;

use crate::data::Batch;
use crate::encoder::{Encoder, EncoderConfig, HiddenStack};
use crate::error::{Error, Result};
use crate::rngutil::rand_below;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const ONECYCLE_START_DIV: f64 = 25.0;
pub const ONECYCLE_FINAL_DIV: f64 = 1e4;

// ── masking ─────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct MaskConfig {
    /// target masked fraction of the batch grid
    pub mask_prob: f64,
    /// cap on one block as a fraction of T (rounded up)
    pub max_block_frac: f64,
    pub min_block_len: usize,
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::Config(format!(
                "mask probability must be in [0, 1], got {}",
                self.mask_prob
            )));
        }
        if !(self.max_block_frac > 0.0 && self.max_block_frac <= 1.0) {
            return Err(Error::Config(format!(
                "max block fraction must be in (0, 1], got {}",
                self.max_block_frac
            )));
        }
        if self.min_block_len == 0 {
            return Err(Error::Config("min block length must be >= 1".into()));
        }
        Ok(())
    }
}

/// One sampled set of masked timesteps over a [B, T] grid.
#[derive(Debug, Clone)]
pub struct MaskPlan {
    pub b: usize,
    pub t: usize,
    /// per-cell flag, row-major b*T + t
    pub mask: Vec<bool>,
    /// the same cells as sorted flat indices (the fill order)
    pub positions: Rc<Vec<usize>>,
}

impl MaskPlan {
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn fraction(&self) -> f64 {
        self.positions.len() as f64 / (self.b * self.t) as f64
    }
}

/// Samples contiguous mask blocks round-robin over the batch until the
/// masked fraction first exceeds `mask_prob`. Each injection picks one of
/// the series' maximal unmasked gaps with probability proportional to gap
/// length, a block length uniform up to the cap, and a uniform start inside
/// the gap, so a single stop check bounds the overshoot by one block.
pub fn sample_mask_plan(
    cfg: &MaskConfig,
    b: usize,
    t: usize,
    rng: &mut (impl RngCore + ?Sized),
) -> Result<MaskPlan> {
    cfg.validate()?;
    if b == 0 || t == 0 {
        return Err(Error::Config("mask plans need b, t >= 1".into()));
    }
    let mut mask = vec![false; b * t];
    if cfg.mask_prob > 0.0 {
        let cap = ((cfg.max_block_frac * t as f64).ceil() as usize).max(cfg.min_block_len);
        let target = cfg.mask_prob * (b * t) as f64;
        let mut count = 0usize;
        'outer: loop {
            let mut injected = false;
            for series in 0..b {
                let row = &mut mask[series * t..(series + 1) * t];
                // maximal unmasked runs that can hold a minimum block
                let mut gaps: Vec<(usize, usize)> = Vec::new();
                let mut run_start = None;
                for (i, &m) in row.iter().chain(std::iter::once(&true)).enumerate() {
                    match (m, run_start) {
                        (false, None) => run_start = Some(i),
                        (true, Some(s)) => {
                            if i - s >= cfg.min_block_len {
                                gaps.push((s, i - s));
                            }
                            run_start = None;
                        }
                        _ => {}
                    }
                }
                if gaps.is_empty() {
                    continue;
                }
                let total: usize = gaps.iter().map(|g| g.1).sum();
                let mut pick = rand_below(rng, total);
                let &(gap_start, gap_len) = gaps
                    .iter()
                    .find(|g| {
                        if pick < g.1 {
                            true
                        } else {
                            pick -= g.1;
                            false
                        }
                    })
                    .expect("cumulative walk ends inside a gap");
                let len_hi = gap_len.min(cap);
                let len = cfg.min_block_len + rand_below(rng, len_hi - cfg.min_block_len + 1);
                let start = gap_start + rand_below(rng, gap_len - len + 1);
                for cell in &mut row[start..start + len] {
                    debug_assert!(!*cell, "blocks land in unmasked gaps only");
                    *cell = true;
                }
                count += len;
                injected = true;
                if count as f64 > target {
                    break 'outer;
                }
            }
            if !injected {
                break;
            }
        }
    }
    let positions: Vec<usize> = mask
        .iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect();
    Ok(MaskPlan {
        b,
        t,
        mask,
        positions: Rc::new(positions),
    })
}

// ── teacher decay schedule ──────────────────────────────────────────────────

/// Linear ramp of the teacher decay over training, endpoints exact.
#[derive(Debug, Clone, PartialEq)]
pub struct EMASchedule {
    pub start: f64,
    pub end: f64,
    pub total_steps: u64,
}

impl EMASchedule {
    pub fn new(start: f64, end: f64, total_steps: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&start) || !(0.0..=1.0).contains(&end) || start > end {
            return Err(Error::Config(format!(
                "decay schedule needs 0 <= start <= end <= 1, got {start}..{end}"
            )));
        }
        if total_steps == 0 {
            return Err(Error::Config("decay schedule needs total_steps >= 1".into()));
        }
        Ok(EMASchedule {
            start,
            end,
            total_steps,
        })
    }

    pub fn delta(&self, step: u64) -> f64 {
        if step == 0 {
            self.start
        } else if step >= self.total_steps {
            self.end
        } else {
            let f = step as f64 / self.total_steps as f64;
            self.start + (self.end - self.start) * f
        }
    }
}

/// teacher <- delta*teacher + (1-delta)*student, over every trainable
/// parameter and every batch-norm running buffer.
pub fn ema_update<E: Scalar>(
    teacher: &Encoder<E>,
    student: &Encoder<E>,
    delta: f64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::Config(format!("decay must be in [0, 1], got {delta}")));
    }
    let d = E::from_f64(delta);
    let one_d = E::from_f64(1.0 - delta);
    let tp = teacher.parameters();
    let sp = student.parameters();
    if tp.len() != sp.len() {
        return Err(Error::Config(
            "teacher and student parameter lists diverge".into(),
        ));
    }
    for (t, s) in tp.iter().zip(&sp) {
        let mut td = t.data_mut();
        let sd = s.data();
        debug_assert_eq!(td.len(), sd.len(), "parameter shapes agree");
        for (a, b) in td.iter_mut().zip(sd.iter()) {
            *a = d * *a + one_d * *b;
        }
    }
    for ((_, tb), (_, sb)) in teacher.named_bn().iter().zip(student.named_bn().iter()) {
        let mut tr = tb.running.borrow_mut();
        let sr = sb.running.borrow();
        for (a, b) in tr.mean.iter_mut().zip(sr.mean.iter()) {
            *a = d * *a + one_d * *b;
        }
        for (a, b) in tr.var.iter_mut().zip(sr.var.iter()) {
            *a = d * *a + one_d * *b;
        }
    }
    Ok(())
}

// ── targets ─────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct TargetConfig {
    /// how many of the deepest block activations to average
    pub num_layers: usize,
    /// standardize each (series, timestep) feature row before averaging
    pub layer_norm: bool,
}

/// Distillation targets from a teacher forward pass: the mean of the last K
/// block activations, each optionally standardized per (series, timestep)
/// row so no single layer's scale dominates. Returns a grad-free [B, T, W]
/// tensor.
pub fn compute_targets<E: Scalar>(
    stack: &HiddenStack<E>,
    cfg: &TargetConfig,
) -> Result<Tensor<E>> {
    let k = cfg.num_layers;
    if k == 0 || k > stack.layers.len() {
        return Err(Error::Config(format!(
            "target layer count {k} out of range for a {}-block stack",
            stack.layers.len()
        )));
    }
    let (b, t, w) = (stack.b, stack.t, stack.w);
    let mut acc = vec![0.0f64; b * t * w];
    for layer in &stack.layers[stack.layers.len() - k..] {
        let d = layer.data();
        for row in 0..b * t {
            let src = &d[row * w..(row + 1) * w];
            let dst = &mut acc[row * w..(row + 1) * w];
            if cfg.layer_norm {
                let mut mean = 0.0;
                for &v in src {
                    mean += Scalar::to_f64(v);
                }
                mean /= w as f64;
                let mut var = 0.0;
                for &v in src {
                    let c = Scalar::to_f64(v) - mean;
                    var += c * c;
                }
                var /= w as f64;
                if var > 0.0 {
                    let inv = 1.0 / var.sqrt();
                    for (a, &v) in dst.iter_mut().zip(src.iter()) {
                        *a += (Scalar::to_f64(v) - mean) * inv;
                    }
                }
                // zero-variance rows contribute their centered zeros
            } else {
                for (a, &v) in dst.iter_mut().zip(src.iter()) {
                    *a += Scalar::to_f64(v);
                }
            }
        }
    }
    let inv_k = 1.0 / k as f64;
    let data: Vec<E> = acc.into_iter().map(|v| E::from_f64(v * inv_k)).collect();
    Tensor::from_vec(&[b, t, w], data).map_err(Error::from)
}

/// Representation-collapse indicator: per feature, the spread of the target
/// across every (series, timestep) cell that holds real data, averaged over
/// features. Healthy targets keep this well away from zero.
pub fn collapse_metric<E: Scalar>(targets: &Tensor<E>, valid: Option<&[bool]>) -> f64 {
    let shape = targets.shape();
    let (bt, w) = (shape[0] * shape[1], shape[2]);
    let d = targets.data();
    let rows: Vec<usize> = match valid {
        Some(v) => (0..bt).filter(|&r| v[r]).collect(),
        None => (0..bt).collect(),
    };
    if rows.is_empty() {
        return 0.0;
    }
    let n = rows.len() as f64;
    let mut acc = 0.0;
    for feat in 0..w {
        let mut mean = 0.0;
        for &r in &rows {
            mean += d[r * w + feat].to_f64();
        }
        mean /= n;
        let mut var = 0.0;
        for &r in &rows {
            let c = d[r * w + feat].to_f64() - mean;
            var += c * c;
        }
        acc += (var / n).sqrt();
    }
    acc / w as f64
}

// ── training state ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    pub mask: MaskConfig,
    pub target: TargetConfig,
    /// masked views per step sharing one target computation
    pub num_students: usize,
    pub smooth_l1_beta: f64,
    pub weight_decay: f64,
    pub max_lr: f64,
    pub warmup_frac: f64,
    pub total_steps: u64,
    pub ema_start: f64,
    pub ema_end: f64,
}

/// Scaling rule for the step budget: a fixed rate per thousand training
/// timesteps, floored so tiny sets still train long enough to settle.
pub fn total_steps_for(series_length: usize, steps_per_kilostep: u64) -> u64 {
    let scaled = (steps_per_kilostep as f64 * series_length as f64 / 1000.0).ceil() as u64;
    scaled.max(200)
}

/// What one training step reports for the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    /// index of the step just taken (0-based)
    pub step: u64,
    /// None when every sampled view was empty and the step was a no-op
    pub loss: Option<f64>,
    pub lr: f64,
    pub delta: f64,
    /// mean masked fraction over the sampled views
    pub masked_frac: f64,
    /// None on no-op steps: no targets were computed
    pub collapse: Option<f64>,
}

pub struct TrainState<E: Scalar> {
    pub student: Encoder<E>,
    pub teacher: Encoder<E>,
    pub mask_emb: Tensor<E>,
    pub adam: AdamState<E>,
    pub schedule: OneCycleSchedule,
    pub ema: EMASchedule,
    pub cfg: DistillConfig,
    pub rng: ChaCha8Rng,
    pub step: u64,
}

impl<E: Scalar> TrainState<E> {
    pub fn new(encoder_cfg: EncoderConfig, cfg: DistillConfig, seed: u64) -> Result<Self> {
        cfg.mask.validate()?;
        if cfg.num_students == 0 {
            return Err(Error::Config("need at least one masked view per step".into()));
        }
        if cfg.smooth_l1_beta <= 0.0 {
            return Err(Error::Config(format!(
                "smooth-l1 beta must be > 0, got {}",
                cfg.smooth_l1_beta
            )));
        }
        if cfg.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be >= 0".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let student = Encoder::init(encoder_cfg.clone(), &mut rng)?;
        // the mask embedding follows the same uniform law as a conv weight
        // whose fan-in is the model width
        let bound = encoder_cfg.init_scale * (1.0 / encoder_cfg.width as f64).sqrt();
        let emb: Vec<E> = (0..encoder_cfg.width)
            .map(|_| E::from_f64(crate::rngutil::uniform(&mut rng, -bound, bound)))
            .collect();
        let mask_emb = Tensor::from_vec(&[encoder_cfg.width], emb)
            .expect("embedding buffer matches width")
            .requires_grad(true);
        let teacher = student.clone_detached();
        let schedule = OneCycleSchedule::new(
            cfg.max_lr,
            cfg.total_steps,
            cfg.warmup_frac,
            ONECYCLE_START_DIV,
            ONECYCLE_FINAL_DIV,
        )?;
        let ema = EMASchedule::new(cfg.ema_start, cfg.ema_end, cfg.total_steps)?;
        let trainable: Vec<Tensor<E>> = student
            .parameters()
            .into_iter()
            .chain(std::iter::once(mask_emb.clone()))
            .collect();
        let adam = AdamState::new(&trainable, ADAM_BETA1, ADAM_BETA2, ADAM_EPS)?;
        Ok(TrainState {
            student,
            teacher,
            mask_emb,
            adam,
            schedule,
            ema,
            cfg,
            rng,
            step: 0,
        })
    }

    /// Optimized tensors in checkpoint order: student parameters, then the
    /// mask embedding.
    pub fn trainable(&self) -> Vec<Tensor<E>> {
        self.student
            .parameters()
            .into_iter()
            .chain(std::iter::once(self.mask_emb.clone()))
            .collect()
    }

    /// One optimization step: teacher targets once, several masked student
    /// views, shared backward, Adam, teacher EMA. A step whose views all
    /// came up empty (tiny p) advances the counter and does nothing else.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepMetrics> {
        let lr = self.schedule.lr(self.step);
        let delta = self.ema.delta(self.step);

        let mut plans = Vec::with_capacity(self.cfg.num_students);
        for _ in 0..self.cfg.num_students {
            plans.push(sample_mask_plan(
                &self.cfg.mask,
                batch.b,
                batch.t,
                &mut self.rng,
            )?);
        }
        let masked_frac =
            plans.iter().map(|p| p.fraction()).sum::<f64>() / plans.len() as f64;

        // a view is useful only where masked cells hold real data
        let selections: Vec<Option<Vec<bool>>> = plans
            .iter()
            .map(|plan| {
                let sel: Vec<bool> = match &batch.valid {
                    Some(v) => plan.mask.iter().zip(v.iter()).map(|(&m, &ok)| m && ok).collect(),
                    None => plan.mask.clone(),
                };
                sel.iter().any(|&s| s).then_some(sel)
            })
            .collect();
        if selections.iter().all(|s| s.is_none()) {
            let step = self.step;
            self.step += 1;
            return Ok(StepMetrics {
                step,
                loss: None,
                lr,
                delta,
                masked_frac,
                collapse: None,
            });
        }

        let x = batch.to_tensor::<E>();
        let valid = batch.valid.as_ref();

        // targets from the unmasked input, gradient-free
        let (targets, collapse) = {
            let mut tape = Tape::no_grad();
            let stack =
                self.teacher
                    .encode(&mut tape, &x, valid, Mode::Eval, None, &mut self.rng)?;
            let targets = compute_targets(&stack, &self.cfg.target)?;
            let collapse = collapse_metric(&targets, batch.valid.as_deref().map(|v| &v[..]));
            (targets, collapse)
        };

        let mut tape = Tape::new();
        let mut losses = Vec::new();
        for (plan, sel) in plans.iter().zip(&selections) {
            let Some(sel) = sel else { continue };
            let stack = self.student.encode(
                &mut tape,
                &x,
                valid,
                Mode::Train,
                Some((&plan.positions, &self.mask_emb)),
                &mut self.rng,
            )?;
            losses.push(smooth_l1_masked(
                &mut tape,
                stack.last(),
                &targets,
                sel,
                self.cfg.smooth_l1_beta,
            )?);
        }
        let loss = mean_scalars(&mut tape, &losses)?;
        let loss_value = loss.item()?.to_f64();
        if !loss_value.is_finite() {
            return Err(Error::Numeric(format!(
                "loss became non-finite at step {}",
                self.step
            )));
        }
        backward(&loss, &mut tape)?;
        let trainable = self.trainable();
        adam_step(&mut self.adam, &trainable, lr, self.cfg.weight_decay)?;
        ema_update(&self.teacher, &self.student, delta)?;

        let step = self.step;
        self.step += 1;
        Ok(StepMetrics {
            step,
            loss: Some(loss_value),
            lr,
            delta,
            masked_frac,
            collapse: Some(collapse),
        })
    }

    /// Uniform with-replacement batch indices drawn from the training rng.
    pub fn sample_indices(&mut self, n_series: usize, batch_size: usize) -> Vec<usize> {
        (0..batch_size)
            .map(|_| rand_below(&mut self.rng, n_series))
            .collect()
    }
}
