//! A small deterministic CNN engine.
//!
//! Everything runs in `f64` on the CPU. Activations are laid out
//! `[N, C, H, W]` (row-major); dense layers see `[N, F]`. Convolutions go
//! through im2col and a GEMM. Reductions over the batch (parameter
//! gradients, batch statistics) always run in the same fixed order, so a
//! fixed seed gives a bit-identical training trajectory.

mod checkpoint;
mod layers;
mod model;
mod optim;
mod train;

pub use crate::shaping::NormStats;
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use layers::{Layer, LayerCache, LayerSpec};
pub use model::{build_25d_model, build_model, Architecture, Grads, ModelState, Tape};
pub use optim::{optimizer_step, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use train::{bce_loss, predict, predict_many, train, Target, TrainConfig, TrainHistory, TrainSet};

/// Forward mode for batch normalisation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated by the caller.
    Train,
    /// Running statistics; a pure function of the input.
    Eval,
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor data length does not match shape {shape:?}");
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading (batch) dimension.
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    /// Elements per sample.
    pub fn per_sample(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
