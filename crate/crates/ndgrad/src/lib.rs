//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! The op set is exactly what a dilated-convolution trainer needs: conv1d,
//! batch norm, GELU/ReLU, dropout, residual adds, a masked smooth-L1 loss,
//! and a few glue ops. Forwards run at f32 for training or f64 for oracle
//! and finite-difference checks; the graph is generic over [`Scalar`].
//!
//! Execution model: ops execute eagerly and append an entry to a [`Tape`];
//! [`backward`] replays the tape in reverse exactly once, accumulating
//! gradients into every reachable tensor whose `needs_grad` flag is set.
//! Tapes and parameter updates are single-threaded; tensors are safe to
//! share read-only.

mod adam;
mod error;
mod onecycle;
mod ops;
mod scalar;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use error::{Error, Result};
pub use onecycle::{onecycle_lr, OneCycleSchedule};
pub use ops::{
    add, batch_norm1d, conv1d, dropout, fill_masked, gelu, mean_scalars, mul, relu, scale,
    smooth_l1, smooth_l1_masked, sum, swap_bt, Mode, RunningStats,
};
pub use scalar::Scalar;
pub use tape::{backward, Tape};
pub use tensor::Tensor;
