//! Dilated convolutional encoder. A 1x1 input projection lifts the series to
//! the model width, then a stack of residual blocks with exponentially
//! growing dilation widens the receptive field; every block's activation is
//! kept so targets can average the last few layers.
//!
//! Layout conventions: batches enter as [B, C, T], every internal activation
//! is [B, W, T], and the returned stack stores each layer as [B, T, W] so
//! per-timestep feature rows are contiguous for the losses and probes.

use std::cell::RefCell;
use std::rc::Rc;

use ndgrad::{
    add, batch_norm1d, conv1d, dropout, fill_masked, gelu, relu, swap_bt, Mode, RunningStats,
    Scalar, Tape, Tensor,
};
use rand_core::RngCore;

use crate::error::{Error, Result};
use crate::rngutil::uniform;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Relu,
    /// pass-through, for tests that need a linear network
    Identity,
}

impl Activation {
    fn apply<E: Scalar>(self, tape: &mut Tape<E>, x: &Tensor<E>) -> Tensor<E> {
        match self {
            Activation::Gelu => gelu(tape, x),
            Activation::Relu => relu(tape, x),
            Activation::Identity => x.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub width: usize,
    pub num_blocks: usize,
    pub kernel_size: usize,
    pub dropout_rate: f64,
    pub init_scale: f64,
    pub activation: Activation,
    pub batch_norm: bool,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.width == 0 || self.num_blocks == 0 {
            return Err(Error::Config(
                "encoder needs in_channels, width, num_blocks >= 1".into(),
            ));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!(
                "kernel size must be odd for symmetric padding, got {}",
                self.kernel_size
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if !self.init_scale.is_finite() || self.init_scale < 0.0 {
            return Err(Error::Config(format!(
                "init scale must be finite and >= 0, got {}",
                self.init_scale
            )));
        }
        Ok(())
    }

    /// Total receptive field of the stack: each block applies two convs at
    /// dilation 2^l, so reach grows by (k-1)*2^l per side per block.
    pub fn receptive_field(&self) -> usize {
        let mut rf = 1usize;
        for l in 0..self.num_blocks {
            rf += 2 * (self.kernel_size - 1) * (1usize << l);
        }
        rf
    }

    /// One-sided reach after block `l` (inclusive): how far a single input
    /// perturbation can travel by that depth.
    pub fn reach_after(&self, l: usize) -> usize {
        (0..=l).map(|j| (self.kernel_size - 1) * (1usize << j)).sum()
    }
}

// ── layers ──────────────────────────────────────────────────────────────────

#[derive(Debug)]
pub struct ConvLayer<E: Scalar> {
    pub weight: Tensor<E>, // [C_out, C_in, k]
    pub bias: Tensor<E>,   // [C_out]
    pub dilation: usize,
}

impl<E: Scalar> ConvLayer<E> {
    /// Weights uniform in +-sqrt(1/fan_in) scaled by `init_scale`, biases 0.
    fn init(
        rng: &mut dyn RngCore,
        c_out: usize,
        c_in: usize,
        k: usize,
        dilation: usize,
        init_scale: f64,
    ) -> Self {
        let bound = init_scale * (1.0 / (c_in * k) as f64).sqrt();
        let data: Vec<E> = (0..c_out * c_in * k)
            .map(|_| E::from_f64(uniform(rng, -bound, bound)))
            .collect();
        ConvLayer {
            weight: Tensor::from_vec(&[c_out, c_in, k], data)
                .expect("weight buffer matches shape")
                .requires_grad(true),
            bias: Tensor::zeros(&[c_out]).requires_grad(true),
            dilation,
        }
    }

    fn detached(&self) -> Self {
        ConvLayer {
            weight: self.weight.detached_copy(),
            bias: self.bias.detached_copy(),
            dilation: self.dilation,
        }
    }
}

#[derive(Debug)]
pub struct BatchNorm<E: Scalar> {
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
    pub running: RefCell<RunningStats<E>>,
}

impl<E: Scalar> BatchNorm<E> {
    fn init(channels: usize) -> Self {
        BatchNorm {
            gamma: Tensor::full(&[channels], E::one()).requires_grad(true),
            beta: Tensor::zeros(&[channels]).requires_grad(true),
            running: RefCell::new(RunningStats::new(channels)),
        }
    }

    fn detached(&self) -> Self {
        BatchNorm {
            gamma: self.gamma.detached_copy(),
            beta: self.beta.detached_copy(),
            running: RefCell::new(self.running.borrow().clone()),
        }
    }

    fn forward(
        &self,
        tape: &mut Tape<E>,
        x: &Tensor<E>,
        mode: Mode,
        valid: Option<&Rc<Vec<bool>>>,
    ) -> Result<Tensor<E>> {
        let mut running = self.running.borrow_mut();
        Ok(batch_norm1d(
            tape,
            x,
            &self.gamma,
            &self.beta,
            &mut running,
            mode,
            valid,
            BN_EPS,
            BN_MOMENTUM,
        )?)
    }
}

#[derive(Debug)]
pub struct Block<E: Scalar> {
    pub conv1: ConvLayer<E>,
    pub bn1: Option<BatchNorm<E>>,
    pub conv2: ConvLayer<E>,
    pub bn2: Option<BatchNorm<E>>,
}

// ── encoder ─────────────────────────────────────────────────────────────────

/// All per-block activations of one forward pass, each stored [B, T, W].
#[derive(Debug)]
pub struct HiddenStack<E: Scalar> {
    pub layers: Vec<Tensor<E>>,
    pub b: usize,
    pub t: usize,
    pub w: usize,
}

impl<E: Scalar> HiddenStack<E> {
    pub fn last(&self) -> &Tensor<E> {
        self.layers.last().expect("stack is never empty")
    }
}

#[derive(Debug)]
pub struct Encoder<E: Scalar> {
    pub cfg: EncoderConfig,
    pub input_proj: ConvLayer<E>,
    pub blocks: Vec<Block<E>>,
}

impl<E: Scalar> Encoder<E> {
    pub fn init(cfg: EncoderConfig, rng: &mut dyn RngCore) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.width;
        let input_proj = ConvLayer::init(rng, w, cfg.in_channels, 1, 1, cfg.init_scale);
        let mut blocks = Vec::with_capacity(cfg.num_blocks);
        for l in 0..cfg.num_blocks {
            let dil = 1usize << l;
            blocks.push(Block {
                conv1: ConvLayer::init(rng, w, w, cfg.kernel_size, dil, cfg.init_scale),
                bn1: cfg.batch_norm.then(|| BatchNorm::init(w)),
                conv2: ConvLayer::init(rng, w, w, cfg.kernel_size, dil, cfg.init_scale),
                bn2: cfg.batch_norm.then(|| BatchNorm::init(w)),
            });
        }
        Ok(Encoder {
            cfg,
            input_proj,
            blocks,
        })
    }

    /// Runs the stack. `mask` replaces whole timestep columns of the
    /// projected input with the given embedding before any block runs;
    /// `valid` keeps padded timesteps out of batch-norm statistics.
    pub fn encode(
        &self,
        tape: &mut Tape<E>,
        input: &Tensor<E>,
        valid: Option<&Rc<Vec<bool>>>,
        mode: Mode,
        mask: Option<(&Rc<Vec<usize>>, &Tensor<E>)>,
        rng: &mut dyn RngCore,
    ) -> Result<HiddenStack<E>> {
        if input.shape().len() != 3 || input.shape()[1] != self.cfg.in_channels {
            return Err(Error::Data(format!(
                "encoder built for {} channels got input shape {:?}",
                self.cfg.in_channels,
                input.shape()
            )));
        }
        let (b, t) = (input.shape()[0], input.shape()[2]);
        let mut h = conv1d(
            tape,
            input,
            &self.input_proj.weight,
            &self.input_proj.bias,
            1,
        )?;
        if let Some((positions, emb)) = mask {
            h = fill_masked(tape, &h, emb, Rc::clone(positions))?;
        }
        let mut layers = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let mut y = conv1d(tape, &h, &block.conv1.weight, &block.conv1.bias, block.conv1.dilation)?;
            if let Some(bn) = &block.bn1 {
                y = bn.forward(tape, &y, mode, valid)?;
            }
            y = self.cfg.activation.apply(tape, &y);
            y = dropout(tape, &y, self.cfg.dropout_rate, mode, rng)?;
            y = conv1d(tape, &y, &block.conv2.weight, &block.conv2.bias, block.conv2.dilation)?;
            if let Some(bn) = &block.bn2 {
                y = bn.forward(tape, &y, mode, valid)?;
            }
            y = add(tape, &y, &h)?;
            y = self.cfg.activation.apply(tape, &y);
            layers.push(swap_bt(tape, &y)?);
            h = y;
        }
        Ok(HiddenStack {
            layers,
            b,
            t,
            w: self.cfg.width,
        })
    }

    /// Trainable tensors in a stable order (the checkpoint and EMA order).
    pub fn named_parameters(&self) -> Vec<(String, Tensor<E>)> {
        let mut out = vec![
            ("input_proj.weight".to_string(), self.input_proj.weight.clone()),
            ("input_proj.bias".to_string(), self.input_proj.bias.clone()),
        ];
        for (l, block) in self.blocks.iter().enumerate() {
            out.push((format!("block{l}.conv1.weight"), block.conv1.weight.clone()));
            out.push((format!("block{l}.conv1.bias"), block.conv1.bias.clone()));
            if let Some(bn) = &block.bn1 {
                out.push((format!("block{l}.bn1.gamma"), bn.gamma.clone()));
                out.push((format!("block{l}.bn1.beta"), bn.beta.clone()));
            }
            out.push((format!("block{l}.conv2.weight"), block.conv2.weight.clone()));
            out.push((format!("block{l}.conv2.bias"), block.conv2.bias.clone()));
            if let Some(bn) = &block.bn2 {
                out.push((format!("block{l}.bn2.gamma"), bn.gamma.clone()));
                out.push((format!("block{l}.bn2.beta"), bn.beta.clone()));
            }
        }
        out
    }

    pub fn parameters(&self) -> Vec<Tensor<E>> {
        self.named_parameters().into_iter().map(|(_, t)| t).collect()
    }

    /// Batch-norm layers in the same stable order, for EMA tracking of the
    /// running statistics and for checkpoints.
    pub fn named_bn(&self) -> Vec<(String, &BatchNorm<E>)> {
        let mut out = Vec::new();
        for (l, block) in self.blocks.iter().enumerate() {
            if let Some(bn) = &block.bn1 {
                out.push((format!("block{l}.bn1"), bn));
            }
            if let Some(bn) = &block.bn2 {
                out.push((format!("block{l}.bn2"), bn));
            }
        }
        out
    }

    /// Deep copy whose tensors share nothing with `self` and take no
    /// gradients (the teacher construction).
    pub fn clone_detached(&self) -> Self {
        Encoder {
            cfg: self.cfg.clone(),
            input_proj: self.input_proj.detached(),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    conv1: b.conv1.detached(),
                    bn1: b.bn1.as_ref().map(|bn| bn.detached()),
                    conv2: b.conv2.detached(),
                    bn2: b.bn2.as_ref().map(|bn| bn.detached()),
                })
                .collect(),
        }
    }

    pub fn set_requires_grad(&self, flag: bool) {
        for p in self.parameters() {
            p.set_requires_grad(flag);
        }
    }

    pub fn zero_grad(&self) {
        for p in self.parameters() {
            p.clear_grad();
        }
    }
}
