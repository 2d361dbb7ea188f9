//! Adaptive-moment (Adam) updates with bias correction.

use super::layers::Layer;
use super::model::{Grads, ModelState};
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub(crate) fn zeros_like(layers: &[Layer]) -> Self {
        let shapes: Vec<usize> = layers.iter().flat_map(|l| l.params()).map(<[f64]>::len).collect();
        Self {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }
}

/// One Adam step (β1 = 0.9, β2 = 0.999, ε = 1e-8).
pub fn optimizer_step(model: &mut ModelState, grads: &Grads, lr: f64) -> Result<()> {
    let shapes = model.param_shapes();
    let grad_shapes: Vec<usize> = grads.tensors.iter().map(Vec::len).collect();
    if shapes != grad_shapes {
        return Err(Error::CorruptGradient(format!(
            "{} gradient tensors for {} parameters (or sizes differ)",
            grad_shapes.len(),
            shapes.len()
        )));
    }
    if grads.tensors.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::CorruptGradient("non-finite gradient".into()));
    }
    let mut adam = std::mem::replace(&mut model.adam, AdamState { m: vec![], v: vec![], step: 0 });
    adam.step += 1;
    let t = adam.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for (((p, g), m), v) in model.params_mut().zip(&grads.tensors).zip(&mut adam.m).zip(&mut adam.v) {
        for i in 0..p.len() {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
    model.adam = adam;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_model, Architecture, LayerSpec, Tensor};

    fn scalar_model() -> ModelState {
        // flatten + dense 1→1: a single weight and a bias
        let arch = Architecture {
            input: [1, 1, 1],
            layers: vec![LayerSpec::Flatten, LayerSpec::Dense { inputs: 1, outputs: 1 }],
        };
        build_model(arch, 0).unwrap()
    }

    fn grads_for(model: &ModelState, value: f64) -> Grads {
        Grads {
            tensors: model.params().map(|p| vec![value; p.len()]).collect(),
            input: Tensor::zeros(vec![1, 1, 1, 1]),
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut m = build_model(Architecture::two_slice([2, 16, 16]).unwrap(), 2).unwrap();
        let before: Vec<Vec<f64>> = m.params().map(<[f64]>::to_vec).collect();
        let g = grads_for(&m, 0.0);
        optimizer_step(&mut m, &g, 1e-3).unwrap();
        let after: Vec<Vec<f64>> = m.params().map(<[f64]>::to_vec).collect();
        assert_eq!(before, after);
        assert_eq!(m.adam.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        for g in [3.0, -0.02, 1e-3] {
            let mut m = scalar_model();
            let w0 = m.params().next().unwrap()[0];
            let lr = 1e-3;
            let grads = grads_for(&m, g);
            optimizer_step(&mut m, &grads, lr).unwrap();
            let delta = m.params().next().unwrap()[0] - w0;
            // m̂ = g, v̂ = g², Δ = −lr·g/(|g|+ε)
            assert!(delta.signum() == -g.signum());
            assert!(delta.abs() <= lr && delta.abs() >= 0.99 * lr, "{delta}");
        }
    }

    #[test]
    fn identical_inputs_give_identical_updates() {
        let mut a = scalar_model();
        let mut b = scalar_model();
        let g = grads_for(&a, 0.37);
        for _ in 0..3 {
            optimizer_step(&mut a, &g, 0.01).unwrap();
            optimizer_step(&mut b, &g, 0.01).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn shape_mismatch_is_corrupt_gradient() {
        let mut m = scalar_model();
        let mut g = grads_for(&m, 1.0);
        g.tensors.pop();
        let err = optimizer_step(&mut m, &g, 0.01).unwrap_err();
        assert!(err.to_string().starts_with("corrupt gradient"));
    }
}
