//! Minimal layer-graph neural network machinery.
//!
//! Every layer implements explicit forward/backward passes over f32
//! ndarray tensors (NHWC for images, NTD for token sequences). `infer`
//! is pure and cache-free so a built model can serve concurrent forward
//! passes; `forward` caches activations for one `backward`. Training
//! owns its model exclusively.

pub mod conv;
pub mod dense;
pub mod init;
pub mod vit;

use ndarray::ArrayD;

pub use conv::{AvgPool2d, Conv2d, DepthwiseConv2d, MaxPool2d, Padding};
pub use dense::{
    Activation, ActivationKind, ChannelAffine, Dense, GlobalAvgPool, LayerNorm, Normalize,
    Softmax, SqueezeExcite,
};
pub use vit::{ClsPool, ClsToken, MultiHeadAttention, PatchEmbed, PosEmbed, TransformerBlock};

pub type TensorD = ArrayD<f32>;

/// A learnable tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: TensorD,
    pub grad: TensorD,
    pub trainable: bool,
}

impl Param {
    pub fn new(value: TensorD) -> Self {
        let grad = TensorD::zeros(value.raw_dim());
        Param {
            value,
            grad,
            trainable: true,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// One differentiable computation node.
pub trait Layer: Send {
    /// Pure forward pass; never caches.
    fn infer(&self, x: &TensorD) -> TensorD;

    /// Training forward pass; caches what `backward` needs.
    fn forward(&mut self, x: &TensorD) -> TensorD;

    /// Consume the cache, accumulate parameter gradients, return the
    /// gradient with respect to the input.
    fn backward(&mut self, grad_out: &TensorD) -> TensorD;

    /// Visit parameters in a deterministic order, names scoped by prefix.
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param));

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));
}

impl dyn Layer {
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.value.len());
        n
    }
}

fn child_name(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Ordered chain of layers.
pub struct Sequential {
    children: Vec<(String, Box<dyn Layer>)>,
}

impl Sequential {
    pub fn new() -> Self {
        Sequential {
            children: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, layer: impl Layer + 'static) {
        self.children.push((name.into(), Box::new(layer)));
    }

    pub fn push_boxed(&mut self, name: impl Into<String>, layer: Box<dyn Layer>) {
        self.children.push((name.into(), layer));
    }

    pub fn len(&self) -> usize {
        self.children.len()
    }

    pub fn is_empty(&self) -> bool {
        self.children.is_empty()
    }

    pub fn child_names(&self) -> Vec<&str> {
        self.children.iter().map(|(n, _)| n.as_str()).collect()
    }

    /// Mark every parameter under the named children with the flag.
    pub fn set_trainable_for(&mut self, child_names: &[&str], trainable: bool) {
        for (name, layer) in &mut self.children {
            if child_names.contains(&name.as_str()) {
                layer.visit_params_mut("", &mut |_, p| p.trainable = trainable);
            }
        }
    }

    pub fn set_trainable_all(&mut self, trainable: bool) {
        self.visit_params_mut("", &mut |_, p| p.trainable = trainable);
    }

    pub fn into_children(self) -> Vec<(String, Box<dyn Layer>)> {
        self.children
    }
}

impl Default for Sequential {
    fn default() -> Self {
        Self::new()
    }
}

impl Layer for Sequential {
    fn infer(&self, x: &TensorD) -> TensorD {
        self.children
            .iter()
            .fold(x.clone(), |acc, (_, layer)| layer.infer(&acc))
    }

    fn forward(&mut self, x: &TensorD) -> TensorD {
        self.children
            .iter_mut()
            .fold(x.clone(), |acc, (_, layer)| layer.forward(&acc))
    }

    fn backward(&mut self, grad_out: &TensorD) -> TensorD {
        self.children
            .iter_mut()
            .rev()
            .fold(grad_out.clone(), |acc, (_, layer)| layer.backward(&acc))
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (name, layer) in &self.children {
            layer.visit_params(&child_name(prefix, name), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (name, layer) in &mut self.children {
            layer.visit_params_mut(&child_name(prefix, name), f);
        }
    }
}

/// y = x + body(x). Input and output shapes must match.
pub struct Residual {
    body: Sequential,
}

impl Residual {
    pub fn new(body: Sequential) -> Self {
        Residual { body }
    }
}

impl Layer for Residual {
    fn infer(&self, x: &TensorD) -> TensorD {
        x + &self.body.infer(x)
    }

    fn forward(&mut self, x: &TensorD) -> TensorD {
        x + &self.body.forward(x)
    }

    fn backward(&mut self, grad_out: &TensorD) -> TensorD {
        grad_out + &self.body.backward(grad_out)
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.body.visit_params(&child_name(prefix, "body"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.body.visit_params_mut(&child_name(prefix, "body"), f);
    }
}

/// Parallel branches over one input, concatenated along the channel
/// (last) axis — the multi-scale module pattern.
pub struct ConcatChannels {
    branches: Vec<(String, Sequential)>,
    widths: Vec<usize>,
}

impl ConcatChannels {
    pub fn new(branches: Vec<(String, Sequential)>) -> Self {
        ConcatChannels {
            branches,
            widths: Vec::new(),
        }
    }

    fn concat(outs: Vec<TensorD>) -> TensorD {
        let views: Vec<_> = outs.iter().map(|o| o.view()).collect();
        ndarray::concatenate(ndarray::Axis(outs[0].ndim() - 1), &views)
            .expect("branch outputs must agree on all but the channel axis")
    }
}

impl Layer for ConcatChannels {
    fn infer(&self, x: &TensorD) -> TensorD {
        let outs: Vec<TensorD> = self.branches.iter().map(|(_, b)| b.infer(x)).collect();
        Self::concat(outs)
    }

    fn forward(&mut self, x: &TensorD) -> TensorD {
        let outs: Vec<TensorD> = self
            .branches
            .iter_mut()
            .map(|(_, b)| b.forward(x))
            .collect();
        self.widths = outs.iter().map(|o| o.shape()[o.ndim() - 1]).collect();
        Self::concat(outs)
    }

    fn backward(&mut self, grad_out: &TensorD) -> TensorD {
        let axis = ndarray::Axis(grad_out.ndim() - 1);
        let mut offset = 0;
        let mut grad_in: Option<TensorD> = None;
        for ((_, branch), width) in self.branches.iter_mut().zip(&self.widths) {
            let slice = grad_out
                .slice_axis(axis, ndarray::Slice::from(offset..offset + *width))
                .to_owned();
            let g = branch.backward(&slice);
            grad_in = Some(match grad_in {
                None => g,
                Some(acc) => acc + &g,
            });
            offset += *width;
        }
        grad_in.expect("ConcatChannels has at least one branch")
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (name, branch) in &self.branches {
            branch.visit_params(&child_name(prefix, name), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (name, branch) in &mut self.branches {
            branch.visit_params_mut(&child_name(prefix, name), f);
        }
    }
}

#[cfg(test)]
pub(crate) mod gradcheck {
    //! Finite-difference harness shared by the layer tests. The scalar
    //! objective is a fixed random weighting of the outputs; analytic
    //! gradients from `backward` are compared against central
    //! differences of the objective.

    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    pub fn random_tensor(shape: &[usize], seed: u64, scale: f32) -> TensorD {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        TensorD::from_shape_fn(ndarray::IxDyn(shape), |_| {
            (rng.gen::<f32>() - 0.5) * 2.0 * scale
        })
    }

    fn objective(y: &TensorD, weights: &TensorD) -> f64 {
        y.iter()
            .zip(weights.iter())
            .map(|(a, b)| f64::from(*a) * f64::from(*b))
            .sum()
    }

    /// Check d(objective)/d(input) and d(objective)/d(params) against
    /// central differences. `h` is the absolute step.
    pub fn check_layer<L: Layer>(layer: &mut L, x: &TensorD, h: f32, tol: f64) {
        let y = layer.forward(x);
        let weights = random_tensor(y.shape(), 0xFEED, 1.0);
        let grad_in = layer.backward(&weights);

        // input gradient
        let mut x_pert = x.clone();
        let n_checks = x.len().min(24);
        let stride = (x.len() / n_checks).max(1);
        for i in (0..x.len()).step_by(stride) {
            let orig = x_pert.as_slice_mut().unwrap()[i];
            x_pert.as_slice_mut().unwrap()[i] = orig + h;
            let up = objective(&layer.infer(&x_pert), &weights);
            x_pert.as_slice_mut().unwrap()[i] = orig - h;
            let down = objective(&layer.infer(&x_pert), &weights);
            x_pert.as_slice_mut().unwrap()[i] = orig;
            let numeric = (up - down) / (2.0 * f64::from(h));
            let analytic = f64::from(grad_in.as_slice().unwrap()[i]);
            let denom = numeric.abs().max(analytic.abs()).max(1e-2);
            assert!(
                ((numeric - analytic) / denom).abs() < tol,
                "input grad {i}: numeric {numeric} vs analytic {analytic}"
            );
        }

        // parameter gradients
        let mut param_names = Vec::new();
        layer.visit_params("", &mut |name, _| param_names.push(name.to_string()));
        for target in param_names {
            let mut analytic_grads = Vec::new();
            layer.visit_params("", &mut |name, p| {
                if name == target {
                    analytic_grads = p.grad.iter().copied().collect::<Vec<f32>>();
                }
            });
            let len = analytic_grads.len();
            let stride = (len / 12).max(1);
            for i in (0..len).step_by(stride) {
                let set = |delta: f32, layer: &mut L| {
                    layer.visit_params_mut("", &mut |name, p| {
                        if name == target {
                            p.value.as_slice_mut().unwrap()[i] += delta;
                        }
                    });
                };
                set(h, layer);
                let up = objective(&layer.infer(x), &weights);
                set(-2.0 * h, layer);
                let down = objective(&layer.infer(x), &weights);
                set(h, layer);
                let numeric = (up - down) / (2.0 * f64::from(h));
                let analytic = f64::from(analytic_grads[i]);
                let denom = numeric.abs().max(analytic.abs()).max(1e-2);
                assert!(
                    ((numeric - analytic) / denom).abs() < tol,
                    "param {target}[{i}]: numeric {numeric} vs analytic {analytic}"
                );
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn residual_identity_body_doubles_input() {
        let body = Sequential::new();
        let mut res = Residual::new(body);
        let x = gradcheck::random_tensor(&[2, 3], 1, 1.0);
        let y = res.forward(&x);
        assert_eq!(y, &x + &x);
        let g = res.backward(&TensorD::ones(x.raw_dim()));
        assert_eq!(g, TensorD::ones(x.raw_dim()) * 2.0);
    }
}
