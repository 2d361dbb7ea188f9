use super::{Mode, Tensor};
use serde::{Deserialize, Serialize};

pub(crate) const BN_EPS: f64 = 1e-5;
/// Weight of the previous running statistic in the exponential average.
pub(crate) const BN_MOMENTUM: f64 = 0.9;

/// Serializable description of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// 3×3 convolution, stride 1, zero "same" padding.
    Conv3x3 {
        cin: usize,
        cout: usize,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    /// 2×2 max-pool, stride 2.
    MaxPool2,
    Flatten,
    Dense {
        inputs: usize,
        outputs: usize,
    },
}

/// A layer with its parameters (and, for batch norm, running buffers).
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv3x3 {
        cin: usize,
        cout: usize,
        /// `[cout, cin, 3, 3]`
        weight: Vec<f64>,
        bias: Vec<f64>,
    },
    BatchNorm {
        channels: usize,
        gamma: Vec<f64>,
        beta: Vec<f64>,
        running_mean: Vec<f64>,
        running_var: Vec<f64>,
    },
    Relu,
    MaxPool2,
    Flatten,
    Dense {
        inputs: usize,
        outputs: usize,
        /// `[outputs, inputs]`
        weight: Vec<f64>,
        bias: Vec<f64>,
    },
}

/// What a layer keeps from its forward pass for the backward pass.
#[derive(Debug, Clone)]
pub enum LayerCache {
    Conv {
        in_shape: Vec<usize>,
        /// im2col matrices, one `[cin·9, H·W]` block per sample.
        cols: Vec<f64>,
    },
    BatchNorm {
        mode: Mode,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_mean: Vec<f64>,
        /// Unbiased batch variance, used for the running average.
        batch_var: Vec<f64>,
    },
    Relu {
        active: Vec<bool>,
    },
    MaxPool {
        in_shape: Vec<usize>,
        argmax: Vec<usize>,
    },
    Flatten {
        in_shape: Vec<usize>,
    },
    Dense {
        input: Vec<f64>,
    },
}

/// `c = alpha·a·b + beta·c` for strided `a: m×k`, `b: k×n`, row-major `c: m×n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "gemm: lhs out of bounds");
        assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "gemm: rhs out of bounds");
    }
    assert!(c.len() >= m * n, "gemm: output out of bounds");
    // SAFETY: the asserts above bound every strided access of all three
    // operands, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(x: &[f64], cin: usize, h: usize, w: usize, cols: &mut [f64]) {
    let hw = h * w;
    for ci in 0..cin {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x_, d) in dst.iter_mut().enumerate() {
                        let sx = x_ as isize + kx as isize - 1;
                        *d = if sx < 0 || sx >= w as isize { 0.0 } else { src[sx as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(dcols: &[f64], cin: usize, h: usize, w: usize, dx: &mut [f64]) {
    let hw = h * w;
    for ci in 0..cin {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &dcols[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x_ in 0..w {
                        let sx = x_ as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            plane[sy as usize * w + sx as usize] += row[y * w + x_];
                        }
                    }
                }
            }
        }
    }
}

impl Layer {
    pub fn spec(&self) -> LayerSpec {
        match *self {
            Layer::Conv3x3 { cin, cout, .. } => LayerSpec::Conv3x3 { cin, cout },
            Layer::BatchNorm { channels, .. } => LayerSpec::BatchNorm { channels },
            Layer::Relu => LayerSpec::Relu,
            Layer::MaxPool2 => LayerSpec::MaxPool2,
            Layer::Flatten => LayerSpec::Flatten,
            Layer::Dense { inputs, outputs, .. } => LayerSpec::Dense { inputs, outputs },
        }
    }

    /// A layer with zero weights, unit batch-norm scale and unit running
    /// variance.
    pub fn from_spec(spec: LayerSpec) -> Layer {
        match spec {
            LayerSpec::Conv3x3 { cin, cout } => {
                Layer::Conv3x3 { cin, cout, weight: vec![0.0; cout * cin * 9], bias: vec![0.0; cout] }
            }
            LayerSpec::BatchNorm { channels } => Layer::BatchNorm {
                channels,
                gamma: vec![1.0; channels],
                beta: vec![0.0; channels],
                running_mean: vec![0.0; channels],
                running_var: vec![1.0; channels],
            },
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::MaxPool2 => Layer::MaxPool2,
            LayerSpec::Flatten => Layer::Flatten,
            LayerSpec::Dense { inputs, outputs } => {
                Layer::Dense { inputs, outputs, weight: vec![0.0; outputs * inputs], bias: vec![0.0; outputs] }
            }
        }
    }

    /// Trainable parameter tensors in declaration order.
    pub fn params(&self) -> Vec<&[f64]> {
        match self {
            Layer::Conv3x3 { weight, bias, .. } | Layer::Dense { weight, bias, .. } => {
                vec![weight, bias]
            }
            Layer::BatchNorm { gamma, beta, .. } => vec![gamma, beta],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        match self {
            Layer::Conv3x3 { weight, bias, .. } | Layer::Dense { weight, bias, .. } => {
                vec![weight, bias]
            }
            Layer::BatchNorm { gamma, beta, .. } => vec![gamma, beta],
            _ => Vec::new(),
        }
    }

    /// Non-trainable state persisted with the model.
    pub fn buffers(&self) -> Vec<&[f64]> {
        match self {
            Layer::BatchNorm { running_mean, running_var, .. } => vec![running_mean, running_var],
            _ => Vec::new(),
        }
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Vec<f64>> {
        match self {
            Layer::BatchNorm { running_mean, running_var, .. } => vec![running_mean, running_var],
            _ => Vec::new(),
        }
    }

    /// Output shape for a given input shape, or `None` if incompatible.
    pub fn output_shape(&self, input: &[usize]) -> Option<Vec<usize>> {
        match *self {
            Layer::Conv3x3 { cin, cout, .. } => {
                (input.len() == 4 && input[1] == cin).then(|| vec![input[0], cout, input[2], input[3]])
            }
            Layer::BatchNorm { channels, .. } => (input.len() == 4 && input[1] == channels).then(|| input.to_vec()),
            Layer::Relu => Some(input.to_vec()),
            Layer::MaxPool2 => (input.len() == 4 && input[2] >= 2 && input[3] >= 2)
                .then(|| vec![input[0], input[1], input[2] / 2, input[3] / 2]),
            Layer::Flatten => (input.len() >= 2).then(|| vec![input[0], input[1..].iter().product()]),
            Layer::Dense { inputs, outputs, .. } => {
                (input.len() == 2 && input[1] == inputs).then(|| vec![input[0], outputs])
            }
        }
    }

    /// Forward pass. The input shape must have been validated with
    /// [`Layer::output_shape`].
    pub fn forward(&self, x: &Tensor, mode: Mode) -> (Tensor, LayerCache) {
        let out_shape =
            self.output_shape(&x.shape).unwrap_or_else(|| panic!("{:?} cannot take input {:?}", self.spec(), x.shape));
        match self {
            Layer::Conv3x3 { cin, cout, weight, bias } => {
                let (n, h, w) = (x.shape[0], x.shape[2], x.shape[3]);
                let hw = h * w;
                let k = cin * 9;
                let mut cols = vec![0.0; n * k * hw];
                let mut out = vec![0.0; n * cout * hw];
                for s in 0..n {
                    let c = &mut cols[s * k * hw..(s + 1) * k * hw];
                    im2col(&x.data[s * cin * hw..(s + 1) * cin * hw], *cin, h, w, c);
                    let o = &mut out[s * cout * hw..(s + 1) * cout * hw];
                    for (co, row) in o.chunks_exact_mut(hw).enumerate() {
                        row.fill(bias[co]);
                    }
                    gemm(*cout, k, hw, weight, (k, 1), c, (hw, 1), 1.0, o);
                }
                (Tensor::new(out_shape, out), LayerCache::Conv { in_shape: x.shape.clone(), cols })
            }
            Layer::BatchNorm { channels, gamma, beta, running_mean, running_var } => {
                let (n, hw) = (x.shape[0], x.shape[2] * x.shape[3]);
                let c = *channels;
                let m = (n * hw) as f64;
                let mut out = vec![0.0; x.len()];
                let mut xhat = vec![0.0; x.len()];
                let mut inv_std = vec![0.0; c];
                let mut batch_mean = vec![0.0; c];
                let mut batch_var = vec![0.0; c];
                for ch in 0..c {
                    let (mean, istd) = match mode {
                        Mode::Train => {
                            let mut sum = 0.0;
                            for s in 0..n {
                                sum += x.data[(s * c + ch) * hw..][..hw].iter().sum::<f64>();
                            }
                            let mean = sum / m;
                            let mut sq = 0.0;
                            for s in 0..n {
                                sq += x.data[(s * c + ch) * hw..][..hw]
                                    .iter()
                                    .map(|v| (v - mean) * (v - mean))
                                    .sum::<f64>();
                            }
                            let var = sq / m;
                            batch_mean[ch] = mean;
                            batch_var[ch] = if m > 1.0 { sq / (m - 1.0) } else { var };
                            (mean, 1.0 / (var + BN_EPS).sqrt())
                        }
                        Mode::Eval => (running_mean[ch], 1.0 / (running_var[ch] + BN_EPS).sqrt()),
                    };
                    inv_std[ch] = istd;
                    for s in 0..n {
                        let off = (s * c + ch) * hw;
                        for i in off..off + hw {
                            let xh = (x.data[i] - mean) * istd;
                            xhat[i] = xh;
                            out[i] = gamma[ch] * xh + beta[ch];
                        }
                    }
                }
                (Tensor::new(out_shape, out), LayerCache::BatchNorm { mode, xhat, inv_std, batch_mean, batch_var })
            }
            Layer::Relu => {
                let out: Vec<f64> = x.data.iter().map(|&v| v.max(0.0)).collect();
                let active = x.data.iter().map(|&v| v > 0.0).collect();
                (Tensor::new(out_shape, out), LayerCache::Relu { active })
            }
            Layer::MaxPool2 => {
                let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
                let (oh, ow) = (h / 2, w / 2);
                let mut out = vec![0.0; n * c * oh * ow];
                let mut argmax = vec![0usize; out.len()];
                for plane in 0..n * c {
                    let base = plane * h * w;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = base + (2 * oy) * w + 2 * ox;
                            for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                                let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                                // strict: ties keep the first element in scan order
                                if x.data[idx] > x.data[best] {
                                    best = idx;
                                }
                            }
                            let o = plane * oh * ow + oy * ow + ox;
                            out[o] = x.data[best];
                            argmax[o] = best;
                        }
                    }
                }
                (Tensor::new(out_shape, out), LayerCache::MaxPool { in_shape: x.shape.clone(), argmax })
            }
            Layer::Flatten => {
                (Tensor::new(out_shape, x.data.clone()), LayerCache::Flatten { in_shape: x.shape.clone() })
            }
            Layer::Dense { inputs, outputs, weight, bias } => {
                let n = x.shape[0];
                let mut out = Vec::with_capacity(n * outputs);
                for _ in 0..n {
                    out.extend_from_slice(bias);
                }
                gemm(n, *inputs, *outputs, &x.data, (*inputs, 1), weight, (1, *inputs), 1.0, &mut out);
                (Tensor::new(out_shape, out), LayerCache::Dense { input: x.data.clone() })
            }
        }
    }

    /// Backward pass: accumulates parameter gradients into `param_grads`
    /// (one buffer per tensor of [`Layer::params`]) and returns the gradient
    /// with respect to the layer input.
    pub fn backward(&self, cache: &LayerCache, grad_out: &Tensor, param_grads: &mut [Vec<f64>]) -> Tensor {
        match (self, cache) {
            (Layer::Conv3x3 { cin, cout, weight, .. }, LayerCache::Conv { in_shape, cols }) => {
                let (n, h, w) = (in_shape[0], in_shape[2], in_shape[3]);
                let hw = h * w;
                let k = cin * 9;
                let (gw, rest) = param_grads.split_at_mut(1);
                let (gw, gb) = (&mut gw[0], &mut rest[0]);
                let mut dx = vec![0.0; n * cin * hw];
                let mut dcols = vec![0.0; k * hw];
                for s in 0..n {
                    let dout = &grad_out.data[s * cout * hw..(s + 1) * cout * hw];
                    let c = &cols[s * k * hw..(s + 1) * k * hw];
                    gemm(*cout, hw, k, dout, (hw, 1), c, (1, hw), 1.0, gw);
                    for (co, row) in dout.chunks_exact(hw).enumerate() {
                        gb[co] += row.iter().sum::<f64>();
                    }
                    gemm(k, *cout, hw, weight, (1, k), dout, (hw, 1), 0.0, &mut dcols);
                    col2im(&dcols, *cin, h, w, &mut dx[s * cin * hw..(s + 1) * cin * hw]);
                }
                Tensor::new(in_shape.clone(), dx)
            }
            (Layer::BatchNorm { channels, gamma, .. }, LayerCache::BatchNorm { mode, xhat, inv_std, .. }) => {
                let shape = grad_out.shape.clone();
                let (n, hw) = (shape[0], shape[2] * shape[3]);
                let c = *channels;
                let m = (n * hw) as f64;
                let (gg, rest) = param_grads.split_at_mut(1);
                let (gg, gbeta) = (&mut gg[0], &mut rest[0]);
                let dy = &grad_out.data;
                let mut dx = vec![0.0; dy.len()];
                for ch in 0..c {
                    let mut sum_dy = 0.0;
                    let mut sum_dy_xhat = 0.0;
                    for s in 0..n {
                        let off = (s * c + ch) * hw;
                        for i in off..off + hw {
                            sum_dy += dy[i];
                            sum_dy_xhat += dy[i] * xhat[i];
                        }
                    }
                    gg[ch] += sum_dy_xhat;
                    gbeta[ch] += sum_dy;
                    let scale = gamma[ch] * inv_std[ch];
                    for s in 0..n {
                        let off = (s * c + ch) * hw;
                        for i in off..off + hw {
                            dx[i] = match mode {
                                Mode::Train => scale * (dy[i] - sum_dy / m - xhat[i] * sum_dy_xhat / m),
                                Mode::Eval => scale * dy[i],
                            };
                        }
                    }
                }
                Tensor::new(shape, dx)
            }
            (Layer::Relu, LayerCache::Relu { active }) => {
                let dx = grad_out.data.iter().zip(active).map(|(&g, &a)| if a { g } else { 0.0 }).collect();
                Tensor::new(grad_out.shape.clone(), dx)
            }
            (Layer::MaxPool2, LayerCache::MaxPool { in_shape, argmax }) => {
                let mut dx = vec![0.0; in_shape.iter().product()];
                for (g, &src) in grad_out.data.iter().zip(argmax) {
                    dx[src] += g;
                }
                Tensor::new(in_shape.clone(), dx)
            }
            (Layer::Flatten, LayerCache::Flatten { in_shape }) => Tensor::new(in_shape.clone(), grad_out.data.clone()),
            (Layer::Dense { inputs, outputs, weight, .. }, LayerCache::Dense { input }) => {
                let n = grad_out.shape[0];
                let (gw, rest) = param_grads.split_at_mut(1);
                let (gw, gb) = (&mut gw[0], &mut rest[0]);
                let dy = &grad_out.data;
                gemm(*outputs, n, *inputs, dy, (1, *outputs), input, (*inputs, 1), 1.0, gw);
                for row in dy.chunks_exact(*outputs) {
                    for (b, g) in gb.iter_mut().zip(row) {
                        *b += g;
                    }
                }
                let mut dx = vec![0.0; n * inputs];
                gemm(n, *outputs, *inputs, dy, (*outputs, 1), weight, (*inputs, 1), 0.0, &mut dx);
                Tensor::new(vec![n, *inputs], dx)
            }
            (layer, cache) => {
                panic!("cache {:?} does not belong to layer {:?}", std::mem::discriminant(cache), layer.spec())
            }
        }
    }

    /// Folds the batch statistics of a train-mode forward pass into the
    /// running averages.
    pub fn commit_running_stats(&mut self, cache: &LayerCache) {
        if let (
            Layer::BatchNorm { running_mean, running_var, .. },
            LayerCache::BatchNorm { mode: Mode::Train, batch_mean, batch_var, .. },
        ) = (self, cache)
        {
            for (r, b) in running_mean.iter_mut().zip(batch_mean) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
            for (r, b) in running_var.iter_mut().zip(batch_var) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
        }
    }
}
