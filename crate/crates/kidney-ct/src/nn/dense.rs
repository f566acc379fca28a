//! Dense layers, activations, normalization, and pooling.

use ndarray::{Array1, Array2, Axis, Ix2, IxDyn};
use rand_chacha::ChaCha8Rng;

use super::{child_name, init, Layer, Param, TensorD};

/// Collapse all leading axes so a tensor reads as (rows, features).
fn as_2d(x: &TensorD) -> Array2<f32> {
    let features = x.shape()[x.ndim() - 1];
    let rows = x.len() / features;
    x.to_shape((rows, features))
        .expect("contiguous reshape")
        .to_owned()
}

fn restore_shape(y: Array2<f32>, like: &[usize], features: usize) -> TensorD {
    let mut shape = like.to_vec();
    let last = shape.len() - 1;
    shape[last] = features;
    y.into_shape_with_order(IxDyn(&shape))
        .expect("shape product preserved")
}

/// Fully connected layer over the last axis; accepts any leading shape.
pub struct Dense {
    pub weight: Param,
    pub bias: Param,
    cache_x: Option<Array2<f32>>,
    in_dim: usize,
    out_dim: usize,
}

impl Dense {
    pub fn new(rng: &mut ChaCha8Rng, in_dim: usize, out_dim: usize) -> Self {
        Dense {
            weight: Param::new(init::glorot_normal(
                rng,
                &[in_dim, out_dim],
                in_dim,
                out_dim,
            )),
            bias: Param::new(init::zeros(&[out_dim])),
            cache_x: None,
            in_dim,
            out_dim,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    fn apply(&self, x2: &Array2<f32>) -> Array2<f32> {
        let w = self
            .weight
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("dense weight is 2-D");
        let mut y = x2.dot(&w);
        let b = self
            .bias
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("dense bias is 1-D");
        y += &b;
        y
    }
}

impl Layer for Dense {
    fn infer(&self, x: &TensorD) -> TensorD {
        let x2 = as_2d(x);
        restore_shape(self.apply(&x2), x.shape(), self.out_dim)
    }

    fn forward(&mut self, x: &TensorD) -> TensorD {
        let x2 = as_2d(x);
        let y = self.apply(&x2);
        self.cache_x = Some(x2);
        restore_shape(y, x.shape(), self.out_dim)
    }

    fn backward(&mut self, grad_out: &TensorD) -> TensorD {
        let x2 = self.cache_x.take().expect("backward follows forward");
        let g2 = as_2d(grad_out);
        let w = self
            .weight
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap();

        let dw = x2.t().dot(&g2);
        let db = g2.sum_axis(Axis(0));
        self.weight.grad += &dw.into_dyn();
        self.bias.grad += &db.into_dyn();

        let dx = g2.dot(&w.t());
        let mut shape = grad_out.shape().to_vec();
        let last = shape.len() - 1;
        shape[last] = self.in_dim;
        dx.into_shape_with_order(IxDyn(&shape)).unwrap()
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&child_name(prefix, "weight"), &self.weight);
        f(&child_name(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&child_name(prefix, "weight"), &mut self.weight);
        f(&child_name(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActivationKind {
    Relu,
    Relu6,
    Silu,
    Gelu,
    Sigmoid,
}

/// Elementwise activation.
pub struct Activation {
    kind: ActivationKind,
    cache_x: Option<TensorD>,
}

impl Activation {
    pub fn new(kind: ActivationKind) -> Self {
        Activation {
            kind,
            cache_x: None,
        }
    }

    fn eval(kind: ActivationKind, x: f32) -> f32 {
        match kind {
            ActivationKind::Relu => x.max(0.0),
            ActivationKind::Relu6 => x.clamp(0.0, 6.0),
            ActivationKind::Silu => x * sigmoid(x),
            ActivationKind::Gelu => gelu(x),
            ActivationKind::Sigmoid => sigmoid(x),
        }
    }

    fn grad(kind: ActivationKind, x: f32) -> f32 {
        match kind {
            ActivationKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::Relu6 => {
                if x > 0.0 && x < 6.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            ActivationKind::Gelu => gelu_grad(x),
            ActivationKind::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
        }
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

// tanh approximation of GELU
const GELU_C: f32 = 0.797_884_56; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Layer for Activation {
    fn infer(&self, x: &TensorD) -> TensorD {
        x.mapv(|v| Self::eval(self.kind, v))
    }

    fn forward(&mut self, x: &TensorD) -> TensorD {
        self.cache_x = Some(x.clone());
        self.infer(x)
    }

    fn backward(&mut self, grad_out: &TensorD) -> TensorD {
        let x = self.cache_x.take().expect("backward follows forward");
        let mut g = x.mapv(|v| Self::grad(self.kind, v));
        g *= grad_out;
        g
    }

    fn visit_params(&self, _prefix: &str, _f: &mut dyn FnMut(&str, &Param)) {}

    fn visit_params_mut(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, &mut Param)) {}
}

/// Row-wise softmax over the last axis.
pub struct Softmax {
    cache_y: Option<TensorD>,
}

impl Softmax {
    pub fn new() -> Self {
        Softmax { cache_y: None }
    }

    pub fn apply(x: &TensorD) -> TensorD {
        let mut y = as_2d(x);
        for mut row in y.rows_mut() {
            let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|v| (v - max).exp());
            let sum: f32 = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        restore_shape(y, x.shape(), x.shape()[x.ndim() - 1])
    }
}

impl Default for Softmax {
    fn default() -> Self {
        Self::new()
    }
}

impl Layer for Softmax {
    fn infer(&self, x: &TensorD) -> TensorD {
        Self::apply(x)
    }

    fn forward(&mut self, x: &TensorD) -> TensorD {
        let y = Self::apply(x);
        self.cache_y = Some(y.clone());
        y
    }

    fn backward(&mut self, grad_out: &TensorD) -> TensorD {
        let y = self.cache_y.take().expect("backward follows forward");
        let y2 = as_2d(&y);
        let g2 = as_2d(grad_out);
        let mut dx = Array2::<f32>::zeros(y2.raw_dim());
        for ((y_row, g_row), mut dx_row) in y2
            .rows()
            .into_iter()
            .zip(g2.rows())
            .zip(dx.rows_mut())
        {
            let dot: f32 = y_row.iter().zip(g_row.iter()).map(|(a, b)| a * b).sum();
            for ((d, &yv), &gv) in dx_row.iter_mut().zip(y_row).zip(g_row) {
                *d = yv * (gv - dot);
            }
        }
        dx.into_shape_with_order(IxDyn(grad_out.shape())).unwrap()
    }

    fn visit_params(&self, _prefix: &str, _f: &mut dyn FnMut(&str, &Param)) {}

    fn visit_params_mut(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, &mut Param)) {}
}

/// Per-channel scale and shift over the last axis. Stands in for batch
/// normalization with folded statistics, so inference and training see
/// the same deterministic function.
pub struct ChannelAffine {
    pub gamma: Param,
    pub beta: Param,
    cache_x: Option<TensorD>,
}

impl ChannelAffine {
    pub fn new(channels: usize) -> Self {
        ChannelAffine {
            gamma: Param::new(init::ones(&[channels])),
            beta: Param::new(init::zeros(&[channels])),
            cache_x: None,
        }
    }
}

impl Layer for ChannelAffine {
    fn infer(&self, x: &TensorD) -> TensorD {
        let c = x.shape()[x.ndim() - 1];
        let mut y = as_2d(x);
        let gamma = self.gamma.value.as_slice().unwrap();
        let beta = self.beta.value.as_slice().unwrap();
        for mut row in y.rows_mut() {
            for (i, v) in row.iter_mut().enumerate() {
                *v = *v * gamma[i] + beta[i];
            }
        }
        restore_shape(y, x.shape(), c)
    }

    fn forward(&mut self, x: &TensorD) -> TensorD {
        self.cache_x = Some(x.clone());
        self.infer(x)
    }

    fn backward(&mut self, grad_out: &TensorD) -> TensorD {
        let x = self.cache_x.take().expect("backward follows forward");
        let x2 = as_2d(&x);
        let g2 = as_2d(grad_out);
        let dgamma = (&x2 * &g2).sum_axis(Axis(0));
        let dbeta = g2.sum_axis(Axis(0));
        self.gamma.grad += &dgamma.into_dyn();
        self.beta.grad += &dbeta.into_dyn();

        let gamma = self.gamma.value.as_slice().unwrap();
        let mut dx = g2;
        for mut row in dx.rows_mut() {
            for (i, v) in row.iter_mut().enumerate() {
                *v *= gamma[i];
            }
        }
        dx.into_shape_with_order(IxDyn(grad_out.shape())).unwrap()
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&child_name(prefix, "gamma"), &self.gamma);
        f(&child_name(prefix, "beta"), &self.beta);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&child_name(prefix, "gamma"), &mut self.gamma);
        f(&child_name(prefix, "beta"), &mut self.beta);
    }
}

/// Layer normalization over the last axis.
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
    eps: f32,
    cache: Option<(Array2<f32>, Array1<f32>)>, // normalized x, 1/std per row
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Param::new(init::ones(&[dim])),
            beta: Param::new(init::zeros(&[dim])),
            eps: 1e-6,
            cache: None,
        }
    }

    fn normalize(&self, x: &TensorD) -> (Array2<f32>, Array1<f32>) {
        let x2 = as_2d(x);
        let d = x2.ncols() as f32;
        let mut normed = x2;
        let mut inv_std = Array1::<f32>::zeros(normed.nrows());
        for (mut row, s) in normed.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f32>() / d;
            let inv = 1.0 / (var + self.eps).sqrt();
            row.mapv_inplace(|v| v * inv);
            *s = inv;
        }
        (normed, inv_std)
    }
}

impl Layer for LayerNorm {
    fn infer(&self, x: &TensorD) -> TensorD {
        let (normed, _) = self.normalize(x);
        let gamma = self.gamma.value.as_slice().unwrap();
        let beta = self.beta.value.as_slice().unwrap();
        let mut y = normed;
        for mut row in y.rows_mut() {
            for (i, v) in row.iter_mut().enumerate() {
                *v = *v * gamma[i] + beta[i];
            }
        }
        restore_shape(y, x.shape(), x.shape()[x.ndim() - 1])
    }

    fn forward(&mut self, x: &TensorD) -> TensorD {
        let (normed, inv_std) = self.normalize(x);
        let gamma = self.gamma.value.as_slice().unwrap();
        let beta = self.beta.value.as_slice().unwrap();
        let mut y = normed.clone();
        for mut row in y.rows_mut() {
            for (i, v) in row.iter_mut().enumerate() {
                *v = *v * gamma[i] + beta[i];
            }
        }
        self.cache = Some((normed, inv_std));
        restore_shape(y, x.shape(), x.shape()[x.ndim() - 1])
    }

    fn backward(&mut self, grad_out: &TensorD) -> TensorD {
        let (normed, inv_std) = self.cache.take().expect("backward follows forward");
        let g2 = as_2d(grad_out);
        let d = normed.ncols() as f32;

        let dgamma = (&normed * &g2).sum_axis(Axis(0));
        let dbeta = g2.sum_axis(Axis(0));
        self.gamma.grad += &dgamma.into_dyn();
        self.beta.grad += &dbeta.into_dyn();

        let gamma = self.gamma.value.as_slice().unwrap();
        let mut dx = Array2::<f32>::zeros(g2.raw_dim());
        for ((g_row, n_row), (mut dx_row, &inv)) in g2
            .rows()
            .into_iter()
            .zip(normed.rows())
            .zip(dx.rows_mut().into_iter().zip(inv_std.iter()))
        {
            // dL/dxhat per element
            let gh: Vec<f32> = g_row
                .iter()
                .enumerate()
                .map(|(i, &g)| g * gamma[i])
                .collect();
            let mean_gh: f32 = gh.iter().sum::<f32>() / d;
            let mean_gh_xhat: f32 = gh
                .iter()
                .zip(n_row.iter())
                .map(|(a, b)| a * b)
                .sum::<f32>()
                / d;
            for (i, v) in dx_row.iter_mut().enumerate() {
                *v = inv * (gh[i] - mean_gh - n_row[i] * mean_gh_xhat);
            }
        }
        dx.into_shape_with_order(IxDyn(grad_out.shape())).unwrap()
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&child_name(prefix, "gamma"), &self.gamma);
        f(&child_name(prefix, "beta"), &self.beta);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&child_name(prefix, "gamma"), &mut self.gamma);
        f(&child_name(prefix, "beta"), &mut self.beta);
    }
}

/// Fixed per-channel input normalization: y = (x - mean) / std.
/// Carries no trainable parameters; the constants come from the
/// backbone's preprocessing spec.
pub struct Normalize {
    mean: [f32; 3],
    std: [f32; 3],
}

impl Normalize {
    pub fn new(mean: [f32; 3], std: [f32; 3]) -> Self {
        Normalize { mean, std }
    }

    pub fn identity() -> Self {
        Normalize {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

impl Layer for Normalize {
    fn infer(&self, x: &TensorD) -> TensorD {
        let c = x.shape()[x.ndim() - 1];
        debug_assert_eq!(c, 3);
        let mut y = as_2d(x);
        for mut row in y.rows_mut() {
            for (i, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[i]) / self.std[i];
            }
        }
        restore_shape(y, x.shape(), c)
    }

    fn forward(&mut self, x: &TensorD) -> TensorD {
        self.infer(x)
    }

    fn backward(&mut self, grad_out: &TensorD) -> TensorD {
        let c = grad_out.shape()[grad_out.ndim() - 1];
        let mut g = as_2d(grad_out);
        for mut row in g.rows_mut() {
            for (i, v) in row.iter_mut().enumerate() {
                *v /= self.std[i];
            }
        }
        restore_shape(g, grad_out.shape(), c)
    }

    fn visit_params(&self, _prefix: &str, _f: &mut dyn FnMut(&str, &Param)) {}

    fn visit_params_mut(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, &mut Param)) {}
}

/// (N, H, W, C) -> (N, C) spatial mean.
pub struct GlobalAvgPool {
    cache_shape: Option<Vec<usize>>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        GlobalAvgPool { cache_shape: None }
    }
}

impl Default for GlobalAvgPool {
    fn default() -> Self {
        Self::new()
    }
}

impl Layer for GlobalAvgPool {
    fn infer(&self, x: &TensorD) -> TensorD {
        let shape = x.shape();
        let (n, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
        let x4 = x.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let mut out = Array2::<f32>::zeros((n, c));
        for i in 0..n {
            for ch in 0..c {
                let mut sum = 0.0;
                for r in 0..h {
                    for col in 0..w {
                        sum += x4[[i, r, col, ch]];
                    }
                }
                out[[i, ch]] = sum / (h * w) as f32;
            }
        }
        out.into_dyn()
    }

    fn forward(&mut self, x: &TensorD) -> TensorD {
        self.cache_shape = Some(x.shape().to_vec());
        self.infer(x)
    }

    fn backward(&mut self, grad_out: &TensorD) -> TensorD {
        let shape = self.cache_shape.take().expect("backward follows forward");
        let (n, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
        let g2 = grad_out.view().into_dimensionality::<Ix2>().unwrap();
        let scale = 1.0 / (h * w) as f32;
        let mut dx = ndarray::Array4::<f32>::zeros((n, h, w, c));
        for i in 0..n {
            for ch in 0..c {
                let g = g2[[i, ch]] * scale;
                for r in 0..h {
                    for col in 0..w {
                        dx[[i, r, col, ch]] = g;
                    }
                }
            }
        }
        dx.into_dyn()
    }

    fn visit_params(&self, _prefix: &str, _f: &mut dyn FnMut(&str, &Param)) {}

    fn visit_params_mut(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, &mut Param)) {}
}

/// Squeeze-and-excitation channel gate: global pool, bottleneck MLP,
/// sigmoid scale.
pub struct SqueezeExcite {
    reduce: Dense,
    expand: Dense,
    cache: Option<SeCache>,
}

struct SeCache {
    x: TensorD,
    hidden_pre: TensorD,
    gate_pre: TensorD,
    gate: TensorD,
}

impl SqueezeExcite {
    pub fn new(rng: &mut ChaCha8Rng, channels: usize, reduced: usize) -> Self {
        SqueezeExcite {
            reduce: Dense::new(rng, channels, reduced),
            expand: Dense::new(rng, reduced, channels),
            cache: None,
        }
    }

    fn pool(x: &TensorD) -> TensorD {
        GlobalAvgPool::new().infer(x)
    }

    fn scale(x: &TensorD, gate: &TensorD) -> TensorD {
        let shape = x.shape();
        let (n, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
        let x4 = x.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let g2 = gate.view().into_dimensionality::<Ix2>().unwrap();
        let mut y = ndarray::Array4::<f32>::zeros((n, h, w, c));
        for i in 0..n {
            for r in 0..h {
                for col in 0..w {
                    for ch in 0..c {
                        y[[i, r, col, ch]] = x4[[i, r, col, ch]] * g2[[i, ch]];
                    }
                }
            }
        }
        y.into_dyn()
    }
}

impl Layer for SqueezeExcite {
    fn infer(&self, x: &TensorD) -> TensorD {
        let pooled = Self::pool(x);
        let hidden = self.reduce.infer(&pooled).mapv(|v| Activation::eval(ActivationKind::Silu, v));
        let gate = self.expand.infer(&hidden).mapv(sigmoid);
        Self::scale(x, &gate)
    }

    fn forward(&mut self, x: &TensorD) -> TensorD {
        let hidden_pre = self.reduce.forward(&Self::pool(x));
        let hidden = hidden_pre.mapv(|v| Activation::eval(ActivationKind::Silu, v));
        let gate_pre = self.expand.forward(&hidden);
        let gate = gate_pre.mapv(sigmoid);
        let y = Self::scale(x, &gate);
        self.cache = Some(SeCache {
            x: x.clone(),
            hidden_pre,
            gate_pre,
            gate,
        });
        y
    }

    fn backward(&mut self, grad_out: &TensorD) -> TensorD {
        let cache = self.cache.take().expect("backward follows forward");
        let shape = cache.x.shape();
        let (n, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
        let x4 = cache.x.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let g4 = grad_out.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let gate2 = cache.gate.view().into_dimensionality::<Ix2>().unwrap();

        // d/dgate and the direct x path
        let mut dgate = Array2::<f32>::zeros((n, c));
        let mut dx = ndarray::Array4::<f32>::zeros((n, h, w, c));
        for i in 0..n {
            for r in 0..h {
                for col in 0..w {
                    for ch in 0..c {
                        dgate[[i, ch]] += g4[[i, r, col, ch]] * x4[[i, r, col, ch]];
                        dx[[i, r, col, ch]] = g4[[i, r, col, ch]] * gate2[[i, ch]];
                    }
                }
            }
        }

        // through sigmoid
        let gate_pre2 = cache.gate_pre.view().into_dimensionality::<Ix2>().unwrap();
        let dgate_pre = {
            let mut d = dgate;
            for (v, &pre) in d.iter_mut().zip(gate_pre2.iter()) {
                let s = sigmoid(pre);
                *v *= s * (1.0 - s);
            }
            d.into_dyn()
        };

        // through expand dense
        let dhidden = self.expand.backward(&dgate_pre);

        // through silu
        let hidden_pre2 = cache.hidden_pre.view().into_dimensionality::<Ix2>().unwrap();
        let dhidden_pre = {
            let mut d = dhidden.view().into_dimensionality::<Ix2>().unwrap().to_owned();
            for (v, &pre) in d.iter_mut().zip(hidden_pre2.iter()) {
                *v *= Activation::grad(ActivationKind::Silu, pre);
            }
            d.into_dyn()
        };

        // through reduce dense to the pooled vector
        let dpooled = self.reduce.backward(&dhidden_pre);
        let dpooled2 = dpooled.view().into_dimensionality::<Ix2>().unwrap();

        // distribute pooled gradient back over space
        let scale = 1.0 / (h * w) as f32;
        for i in 0..n {
            for r in 0..h {
                for col in 0..w {
                    for ch in 0..c {
                        dx[[i, r, col, ch]] += dpooled2[[i, ch]] * scale;
                    }
                }
            }
        }
        dx.into_dyn()
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.reduce.visit_params(&child_name(prefix, "reduce"), f);
        self.expand.visit_params(&child_name(prefix, "expand"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.reduce
            .visit_params_mut(&child_name(prefix, "reduce"), f);
        self.expand
            .visit_params_mut(&child_name(prefix, "expand"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::{check_layer, random_tensor};
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    #[test]
    fn dense_shapes_and_gradients() {
        let mut layer = Dense::new(&mut rng(), 5, 3);
        let x = random_tensor(&[4, 5], 7, 1.0);
        let y = layer.forward(&x);
        assert_eq!(y.shape(), &[4, 3]);
        check_layer(&mut layer, &x, 1e-2, 2e-2);
    }

    #[test]
    fn dense_handles_token_inputs() {
        let mut layer = Dense::new(&mut rng(), 6, 2);
        let x = random_tensor(&[2, 3, 6], 8, 1.0);
        let y = layer.forward(&x);
        assert_eq!(y.shape(), &[2, 3, 2]);
        check_layer(&mut layer, &x, 1e-2, 2e-2);
    }

    #[test]
    fn activation_gradients() {
        for kind in [
            ActivationKind::Relu,
            ActivationKind::Relu6,
            ActivationKind::Silu,
            ActivationKind::Gelu,
            ActivationKind::Sigmoid,
        ] {
            let mut layer = Activation::new(kind);
            // keep away from the relu kinks
            let x = random_tensor(&[3, 7], 9, 1.0).mapv(|v| v + 0.3 * v.signum());
            check_layer(&mut layer, &x, 1e-3, 3e-2);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let layer = Softmax::new();
        let x = random_tensor(&[5, 4], 10, 3.0);
        let y = layer.infer(&x);
        for row in as_2d(&y).rows() {
            let sum: f32 = row.sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let layer = Softmax::new();
        let y = layer.infer(&TensorD::zeros(IxDyn(&[2, 4])));
        for v in y.iter() {
            assert!((v - 0.25).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_gradients() {
        let mut layer = Softmax::new();
        let x = random_tensor(&[4, 5], 11, 2.0);
        check_layer(&mut layer, &x, 1e-2, 2e-2);
    }

    #[test]
    fn channel_affine_gradients() {
        let mut layer = ChannelAffine::new(4);
        let x = random_tensor(&[2, 3, 3, 4], 12, 1.0);
        check_layer(&mut layer, &x, 1e-2, 2e-2);
    }

    #[test]
    fn layer_norm_normalizes_and_gradients() {
        let mut layer = LayerNorm::new(6);
        let x = random_tensor(&[3, 6], 13, 2.0);
        let y = layer.infer(&x);
        for row in as_2d(&y).rows() {
            let mean: f32 = row.sum() / 6.0;
            assert!(mean.abs() < 1e-5);
        }
        check_layer(&mut layer, &x, 1e-2, 3e-2);
    }

    #[test]
    fn normalize_applies_constants() {
        let layer = Normalize::new([0.5, 0.5, 0.5], [0.25, 0.25, 0.25]);
        let x = TensorD::from_elem(IxDyn(&[1, 2, 2, 3]), 0.75);
        let y = layer.infer(&x);
        assert!(y.iter().all(|v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn global_avg_pool_gradients() {
        let mut layer = GlobalAvgPool::new();
        let x = random_tensor(&[2, 3, 4, 5], 14, 1.0);
        let y = layer.forward(&x);
        assert_eq!(y.shape(), &[2, 5]);
        check_layer(&mut layer, &x, 1e-2, 2e-2);
    }

    #[test]
    fn squeeze_excite_gradients() {
        let mut layer = SqueezeExcite::new(&mut rng(), 6, 3);
        let x = random_tensor(&[2, 3, 3, 6], 15, 1.0);
        let y = layer.forward(&x);
        assert_eq!(y.shape(), x.shape());
        layer.backward(&TensorD::ones(y.raw_dim()));
        let mut layer2 = SqueezeExcite::new(&mut rng(), 6, 3);
        check_layer(&mut layer2, &x, 1e-2, 3e-2);
    }
}
