use super::layers::{Layer, LayerCache, LayerSpec};
use super::optim::AdamState;
use super::{Mode, NormStats, Tensor};
use crate::error::{Error, Result};
use crate::seed;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Input shape (per sample, `[C, H, W]`) plus the layer stack. The network
/// emits one logit per sample; the sigmoid is applied outside the stack.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    /// Three `conv 3×3 → bn → ReLU → max-pool 2×2` blocks with 16, 32 and 64
    /// channels, then `dense → 128 → ReLU → dense → 1`.
    ///
    /// For the default `[2, 64, 32]` input the flattened feature vector has
    /// `64·8·4 = 2048` entries.
    pub fn two_slice(input: [usize; 3]) -> Result<Self> {
        let [c, h, w] = input;
        if c != 2 || h < 8 || w < 8 {
            return Err(Error::ArchitectureMismatch(format!("2.5D model needs a [2, >=8, >=8] input, got {input:?}")));
        }
        Self::conv_stack(input, &[16, 32, 64], 128)
    }

    /// Generic `conv → bn → ReLU → pool` stack followed by a hidden dense
    /// layer and a single-logit head.
    pub fn conv_stack(input: [usize; 3], channels: &[usize], hidden: usize) -> Result<Self> {
        let mut layers = Vec::new();
        let (mut cin, mut h, mut w) = (input[0], input[1], input[2]);
        for &cout in channels {
            layers.extend([
                LayerSpec::Conv3x3 { cin, cout },
                LayerSpec::BatchNorm { channels: cout },
                LayerSpec::Relu,
                LayerSpec::MaxPool2,
            ]);
            cin = cout;
            h /= 2;
            w /= 2;
        }
        let features = cin * h * w;
        layers.extend([
            LayerSpec::Flatten,
            LayerSpec::Dense { inputs: features, outputs: hidden },
            LayerSpec::Relu,
            LayerSpec::Dense { inputs: hidden, outputs: 1 },
        ]);
        let arch = Self { input, layers };
        arch.validate()?;
        Ok(arch)
    }

    /// Checks that every layer accepts its predecessor's output and that the
    /// network ends in a single logit.
    pub fn validate(&self) -> Result<()> {
        let mut shape = vec![1, self.input[0], self.input[1], self.input[2]];
        for spec in &self.layers {
            shape = Layer::from_spec(*spec)
                .output_shape(&shape)
                .ok_or_else(|| Error::ArchitectureMismatch(format!("{spec:?} cannot take input {shape:?}")))?;
        }
        if shape != [1, 1] {
            return Err(Error::ArchitectureMismatch(format!("network output shape {shape:?}, expected [N, 1]")));
        }
        Ok(())
    }
}

/// Everything needed to resume or evaluate a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub arch: Architecture,
    pub layers: Vec<Layer>,
    pub adam: AdamState,
    /// Initialisation seed.
    pub seed: u64,
    /// Shuffle seed of the last `train` call, if any.
    pub train_seed: Option<u64>,
    /// Completed training epochs.
    pub epoch: u64,
    /// Input normalisation applied by `train` and `predict`.
    pub norm: Option<NormStats>,
}

/// Per-layer forward caches plus output diagnostics.
#[derive(Debug, Clone)]
pub struct Tape {
    caches: Vec<LayerCache>,
    diagnostics: Vec<(LayerSpec, f64, usize)>,
}

impl Tape {
    /// `layer k (spec): max |x| = …, non-finite = …` for every layer.
    pub fn diagnostics(&self) -> String {
        self.diagnostics
            .iter()
            .enumerate()
            .map(|(i, (spec, max, bad))| format!("layer {i} {spec:?}: max|out|={max:.3e} non-finite={bad}"))
            .collect::<Vec<_>>()
            .join("; ")
    }

    /// Whether two passes took the same piecewise-linear branch: identical
    /// ReLU activity and max-pool winners everywhere.
    pub fn same_branches(&self, other: &Tape) -> bool {
        self.caches.len() == other.caches.len()
            && self.caches.iter().zip(&other.caches).all(|(a, b)| match (a, b) {
                (LayerCache::Relu { active: x }, LayerCache::Relu { active: y }) => x == y,
                (LayerCache::MaxPool { argmax: x, .. }, LayerCache::MaxPool { argmax: y, .. }) => x == y,
                _ => true,
            })
    }
}

/// Gradients in parameter declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub tensors: Vec<Vec<f64>>,
    /// Gradient with respect to the network input.
    pub input: Tensor,
}

/// He-uniform initialised model for an architecture.
pub fn build_model(arch: Architecture, seed: u64) -> Result<ModelState> {
    arch.validate()?;
    let mut rng = seed::rng(&[seed, 0x1417]);
    let mut layers = Vec::with_capacity(arch.layers.len());
    for spec in &arch.layers {
        let mut layer = Layer::from_spec(*spec);
        let fan_in = match *spec {
            LayerSpec::Conv3x3 { cin, .. } => Some(cin * 9),
            LayerSpec::Dense { inputs, .. } => Some(inputs),
            _ => None,
        };
        if let Some(fan_in) = fan_in {
            let bound = (6.0 / fan_in as f64).sqrt();
            // weights only; biases start at zero
            for w in layer.params_mut()[0].iter_mut() {
                *w = rng.random_range(-bound..bound);
            }
        }
        layers.push(layer);
    }
    let adam = AdamState::zeros_like(&layers);
    Ok(ModelState { arch, layers, adam, seed, train_seed: None, epoch: 0, norm: None })
}

/// The 2.5D two-slice classifier for a `[2, L, W]` input.
pub fn build_25d_model(input: [usize; 3], seed: u64) -> Result<ModelState> {
    build_model(Architecture::two_slice(input)?, seed)
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl ModelState {
    pub fn param_count(&self) -> usize {
        self.params().map(<[f64]>::len).sum()
    }

    /// Parameter tensors in declaration order.
    pub fn params(&self) -> impl Iterator<Item = &[f64]> {
        self.layers.iter().flat_map(|l| l.params())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Vec<f64>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut())
    }

    pub fn param_shapes(&self) -> Vec<usize> {
        self.params().map(<[f64]>::len).collect()
    }

    fn check_input(&self, batch: &Tensor) -> Result<()> {
        let want = [self.arch.input[0], self.arch.input[1], self.arch.input[2]];
        if batch.shape.len() != 4 || batch.shape[1..] != want || batch.shape[0] == 0 {
            return Err(Error::ArchitectureMismatch(format!(
                "batch shape {:?}, model expects [N, {}, {}, {}]",
                batch.shape, want[0], want[1], want[2]
            )));
        }
        if !batch.all_finite() {
            return Err(Error::NumericalFailure("non-finite input batch".into()));
        }
        Ok(())
    }

    /// Forward pass producing logits and the tape, without touching any
    /// running statistics.
    pub fn forward_tape(&self, batch: &Tensor, mode: Mode) -> Result<(Vec<f64>, Tape)> {
        self.check_input(batch)?;
        if mode == Mode::Train && batch.batch() < 2 {
            return Err(Error::BatchTooSmall(batch.batch()));
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut diagnostics = Vec::with_capacity(self.layers.len());
        let mut x = batch.clone();
        for layer in &self.layers {
            let (y, cache) = layer.forward(&x, mode);
            let max = y.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let bad = y.data.iter().filter(|v| !v.is_finite()).count();
            debug_assert!(bad == 0 || !batch.all_finite(), "non-finite output in {:?}", layer.spec());
            diagnostics.push((layer.spec(), max, bad));
            caches.push(cache);
            x = y;
        }
        Ok((x.data, Tape { caches, diagnostics }))
    }

    /// Sigmoid probabilities. Train mode uses batch statistics and folds them
    /// into the running averages (momentum 0.9); eval mode is pure.
    pub fn forward(&mut self, batch: &Tensor, mode: Mode) -> Result<Vec<f64>> {
        let (logits, tape) = self.forward_tape(batch, mode)?;
        if mode == Mode::Train {
            self.commit(&tape);
        }
        Ok(logits.into_iter().map(sigmoid).collect())
    }

    /// Eval-mode probabilities.
    pub fn predict_proba(&self, batch: &Tensor) -> Result<Vec<f64>> {
        let (logits, _) = self.forward_tape(batch, Mode::Eval)?;
        Ok(logits.into_iter().map(sigmoid).collect())
    }

    fn commit(&mut self, tape: &Tape) {
        for (layer, cache) in self.layers.iter_mut().zip(&tape.caches) {
            layer.commit_running_stats(cache);
        }
    }

    /// Reverse pass from a gradient on the logits.
    pub fn backward(&self, tape: &Tape, dlogits: &[f64]) -> Grads {
        let mut tensors: Vec<Vec<f64>> = self.params().map(|p| vec![0.0; p.len()]).collect();
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut k = 0;
        for layer in &self.layers {
            offsets.push(k);
            k += layer.params().len();
        }
        let mut g = Tensor::new(vec![dlogits.len(), 1], dlogits.to_vec());
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let np = layer.params().len();
            g = layer.backward(&tape.caches[i], &g, &mut tensors[offsets[i]..offsets[i] + np]);
        }
        Grads { tensors, input: g }
    }

    /// Mean binary cross-entropy under batch statistics, without updating
    /// running statistics.
    pub fn loss(&self, batch: &Tensor, labels: &[f64]) -> Result<f64> {
        let (logits, _) = self.forward_tape(batch, Mode::Train)?;
        Ok(super::train::bce_loss(&logits, labels).0)
    }

    /// Train-mode forward, running-statistics update and reverse pass.
    pub fn loss_and_grads(&mut self, batch: &Tensor, labels: &[f64]) -> Result<(f64, Grads)> {
        if labels.len() != batch.batch() {
            return Err(Error::InvalidArgument(format!("{} labels for a batch of {}", labels.len(), batch.batch())));
        }
        if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(Error::InvalidArgument("labels must be 0 or 1".into()));
        }
        let (logits, tape) = self.forward_tape(batch, Mode::Train)?;
        let (loss, dlogits) = super::train::bce_loss(&logits, labels);
        if !loss.is_finite() {
            return Err(Error::NumericalFailure(format!("loss {loss}; {}", tape.diagnostics())));
        }
        self.commit(&tape);
        Ok((loss, self.backward(&tape, &dlogits)))
    }
}
