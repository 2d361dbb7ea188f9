use super::model::{sigmoid, ModelState};
use super::optim::optimizer_step;
use super::Tensor;
use crate::error::{Error, Result};
use crate::seed;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use crate::labels::Target;

const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub target: Target,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, batch_size: 32, epochs: 4, seed: 0, target: Target::Significant }
    }
}

/// Borrowed training samples: flat `[C, H, W]` tensors and 0/1 labels.
#[derive(Debug, Clone, Default)]
pub struct TrainSet<'a> {
    pub inputs: Vec<&'a [f32]>,
    pub labels: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Sample-weighted mean loss of every epoch run.
    pub epoch_losses: Vec<f64>,
}

/// Mean binary cross-entropy of sigmoid(logits) and its gradient with
/// respect to the logits. Probabilities are clamped to `[1e-7, 1 − 1e-7]`;
/// the clamped region has zero gradient.
pub fn bce_loss(logits: &[f64], labels: &[f64]) -> (f64, Vec<f64>) {
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &y) in logits.iter().zip(labels) {
        let p = sigmoid(z);
        let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        loss -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
        grad.push(if p == pc { (p - y) / n } else { 0.0 });
    }
    (loss / n, grad)
}

/// Stacks samples into a `[N, C, H, W]` batch, applying the model's input
/// normalisation.
pub(crate) fn make_batch(model: &ModelState, inputs: &[&[f32]]) -> Result<Tensor> {
    let per = model.arch.input.iter().product::<usize>();
    let (mean, std) = model.norm.map_or((0.0, 1.0), |s| (s.mean, s.std));
    let mut data = Vec::with_capacity(inputs.len() * per);
    for x in inputs {
        if x.len() != per {
            return Err(Error::ArchitectureMismatch(format!(
                "sample with {} values, model expects {:?}",
                x.len(),
                model.arch.input
            )));
        }
        data.extend(x.iter().map(|&v| (f64::from(v) - mean) / std));
    }
    let [c, h, w] = model.arch.input;
    Ok(Tensor::new(vec![inputs.len(), c, h, w], data))
}

/// Splits a shuffled order into mini-batches; a trailing single sample joins
/// the previous batch so batch statistics stay defined.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let start = (out.len() - 1) * size;
        *out.last_mut().unwrap() = &order[start..];
    }
    out
}

/// Runs `cfg.epochs` further epochs of shuffled mini-batch training.
///
/// The order of epoch `e` (counted over the model's lifetime) depends only on
/// `(cfg.seed, e)`, so stopping, checkpointing and resuming reproduces an
/// uninterrupted run. Classes are used at their natural frequencies.
pub fn train(model: &mut ModelState, set: &TrainSet<'_>, cfg: &TrainConfig) -> Result<TrainHistory> {
    if cfg.epochs == 0 {
        return Ok(TrainHistory::default());
    }
    if set.inputs.is_empty() {
        return Err(Error::NoSamples);
    }
    if set.inputs.len() != set.labels.len() {
        return Err(Error::InvalidArgument("inputs and labels differ in length".into()));
    }
    if !(cfg.learning_rate > 0.0) || cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("learning rate and batch size must be positive".into()));
    }
    if set.inputs.len() < 2 {
        return Err(Error::BatchTooSmall(set.inputs.len()));
    }
    let n = set.inputs.len();
    let mut history = TrainHistory::default();
    model.train_seed = Some(cfg.seed);
    for _ in 0..cfg.epochs {
        let epoch = model.epoch;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seed::rng(&[cfg.seed, 0xE90C, epoch]));
        let mut total = 0.0;
        for (b, idx) in batches(&order, cfg.batch_size).into_iter().enumerate() {
            let inputs: Vec<&[f32]> = idx.iter().map(|&i| set.inputs[i]).collect();
            let labels: Vec<f64> = idx.iter().map(|&i| set.labels[i]).collect();
            let batch = make_batch(model, &inputs)?;
            let (loss, grads) = model.loss_and_grads(&batch, &labels).map_err(|e| match e {
                Error::NumericalFailure(msg) => Error::NumericalFailure(format!("epoch {epoch} batch {b}: {msg}")),
                other => other,
            })?;
            optimizer_step(model, &grads, cfg.learning_rate)?;
            total += loss * idx.len() as f64;
        }
        model.epoch += 1;
        let mean = total / n as f64;
        log::debug!("epoch {epoch}: loss {mean:.5}");
        history.epoch_losses.push(mean);
    }
    Ok(history)
}

/// Eval-mode probabilities for many samples.
pub fn predict_many(model: &ModelState, inputs: &[&[f32]]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(64) {
        out.extend(model.predict_proba(&make_batch(model, chunk)?)?);
    }
    Ok(out)
}

/// Lesion-level probability from its views: the first view alone, or with
/// `tta` the arithmetic mean over all views.
pub fn predict(model: &ModelState, views: &[&[f32]], tta: bool) -> Result<f64> {
    if views.is_empty() {
        return Err(Error::NoViews);
    }
    let used = if tta { views } else { &views[..1] };
    let probs = predict_many(model, used)?;
    Ok(probs.iter().sum::<f64>() / probs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_at_half_is_ln2() {
        let (l, g) = bce_loss(&[0.0, 0.0, 0.0], &[1.0, 0.0, 1.0]);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(g, vec![-0.5 / 3.0, 0.5 / 3.0, -0.5 / 3.0]);
    }

    #[test]
    fn bce_clamps_saturated_probabilities() {
        let (l, g) = bce_loss(&[-100.0], &[1.0]);
        assert!((l - -(1e-7f64).ln()).abs() < 1e-9);
        assert_eq!(g, vec![0.0]);
    }

    #[test]
    fn trailing_singleton_joins_previous_batch() {
        let order: Vec<usize> = (0..9).collect();
        let b = batches(&order, 4);
        assert_eq!(b.iter().map(|b| b.len()).collect::<Vec<_>>(), vec![4, 5]);
        let b = batches(&order[..6], 4);
        assert_eq!(b.iter().map(|b| b.len()).collect::<Vec<_>>(), vec![4, 2]);
    }
}
