//! Transformer components: patch embedding, class token, learned
//! position embeddings, multi-head self-attention, and the pre-norm
//! encoder block.

use ndarray::{s, Array2, Array3, Ix3, IxDyn};
use rand_chacha::ChaCha8Rng;

use super::{child_name, init, Conv2d, Dense, Layer, LayerNorm, Padding, Param, TensorD};
use super::{Activation, ActivationKind};

/// Non-overlapping patch embedding: a strided convolution whose output
/// grid is flattened to a token sequence (N, T, D).
pub struct PatchEmbed {
    proj: Conv2d,
    patch: usize,
    cache_grid: Option<(usize, usize)>,
}

impl PatchEmbed {
    pub fn new(rng: &mut ChaCha8Rng, in_channels: usize, dim: usize, patch: usize) -> Self {
        PatchEmbed {
            proj: Conv2d::new(rng, in_channels, dim, (patch, patch), patch, Padding::Valid),
            patch,
            cache_grid: None,
        }
    }

    pub fn patch_size(&self) -> usize {
        self.patch
    }

    fn to_tokens(y: TensorD) -> TensorD {
        let shape = y.shape().to_vec();
        let (n, gh, gw, d) = (shape[0], shape[1], shape[2], shape[3]);
        y.into_shape_with_order(IxDyn(&[n, gh * gw, d])).unwrap()
    }
}

impl Layer for PatchEmbed {
    fn infer(&self, x: &TensorD) -> TensorD {
        Self::to_tokens(self.proj.infer(x))
    }

    fn forward(&mut self, x: &TensorD) -> TensorD {
        let y = self.proj.forward(x);
        self.cache_grid = Some((y.shape()[1], y.shape()[2]));
        Self::to_tokens(y)
    }

    fn backward(&mut self, grad_out: &TensorD) -> TensorD {
        let (gh, gw) = self.cache_grid.take().expect("backward follows forward");
        let shape = grad_out.shape().to_vec();
        let (n, _t, d) = (shape[0], shape[1], shape[2]);
        let g = grad_out
            .view()
            .into_shape_with_order(IxDyn(&[n, gh, gw, d]))
            .unwrap()
            .to_owned();
        self.proj.backward(&g)
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.proj.visit_params(&child_name(prefix, "proj"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.proj.visit_params_mut(&child_name(prefix, "proj"), f);
    }
}

/// Learnable class token prepended to the sequence.
pub struct ClsToken {
    pub token: Param,
}

impl ClsToken {
    pub fn new(rng: &mut ChaCha8Rng, dim: usize) -> Self {
        ClsToken {
            token: Param::new(init::normal(rng, &[1, 1, dim], 0.02)),
        }
    }

    fn prepend(&self, x: &TensorD) -> TensorD {
        let x3 = x.view().into_dimensionality::<Ix3>().expect("NTD input");
        let (n, t, d) = x3.dim();
        let tok = self.token.value.view().into_dimensionality::<Ix3>().unwrap();
        let mut out = Array3::<f32>::zeros((n, t + 1, d));
        for i in 0..n {
            for j in 0..d {
                out[[i, 0, j]] = tok[[0, 0, j]];
            }
        }
        out.slice_mut(s![.., 1.., ..]).assign(&x3);
        out.into_dyn()
    }
}

impl Layer for ClsToken {
    fn infer(&self, x: &TensorD) -> TensorD {
        self.prepend(x)
    }

    fn forward(&mut self, x: &TensorD) -> TensorD {
        self.prepend(x)
    }

    fn backward(&mut self, grad_out: &TensorD) -> TensorD {
        let g3 = grad_out.view().into_dimensionality::<Ix3>().unwrap();
        let (n, _t1, d) = g3.dim();
        let mut dtok = Array3::<f32>::zeros((1, 1, d));
        for i in 0..n {
            for j in 0..d {
                dtok[[0, 0, j]] += g3[[i, 0, j]];
            }
        }
        self.token.grad += &dtok.into_dyn();
        g3.slice(s![.., 1.., ..]).to_owned().into_dyn()
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&child_name(prefix, "token"), &self.token);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&child_name(prefix, "token"), &mut self.token);
    }
}

/// Learned position embeddings added to the full (class token included)
/// sequence.
pub struct PosEmbed {
    pub embedding: Param,
}

impl PosEmbed {
    pub fn new(rng: &mut ChaCha8Rng, tokens: usize, dim: usize) -> Self {
        PosEmbed {
            embedding: Param::new(init::normal(rng, &[1, tokens, dim], 0.02)),
        }
    }
}

impl Layer for PosEmbed {
    fn infer(&self, x: &TensorD) -> TensorD {
        let x3 = x.view().into_dimensionality::<Ix3>().expect("NTD input");
        let e3 = self
            .embedding
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .unwrap();
        let mut out = x3.to_owned();
        for mut sample in out.outer_iter_mut() {
            sample += &e3.index_axis(ndarray::Axis(0), 0);
        }
        out.into_dyn()
    }

    fn forward(&mut self, x: &TensorD) -> TensorD {
        self.infer(x)
    }

    fn backward(&mut self, grad_out: &TensorD) -> TensorD {
        let g3 = grad_out.view().into_dimensionality::<Ix3>().unwrap();
        let summed = g3.sum_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0));
        self.embedding.grad += &summed.into_dyn();
        grad_out.clone()
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&child_name(prefix, "embedding"), &self.embedding);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&child_name(prefix, "embedding"), &mut self.embedding);
    }
}

/// Scaled dot-product multi-head self-attention.
pub struct MultiHeadAttention {
    wq: Dense,
    wk: Dense,
    wv: Dense,
    wo: Dense,
    heads: usize,
    cache: Option<AttnCache>,
}

struct AttnCache {
    q: Array3<f32>,
    k: Array3<f32>,
    v: Array3<f32>,
    /// Row-softmax attention per (sample, head), each (T, T).
    attn: Vec<Array2<f32>>,
}

impl MultiHeadAttention {
    pub fn new(rng: &mut ChaCha8Rng, dim: usize, heads: usize) -> Self {
        assert!(dim % heads == 0, "dim must divide evenly into heads");
        MultiHeadAttention {
            wq: Dense::new(rng, dim, dim),
            wk: Dense::new(rng, dim, dim),
            wv: Dense::new(rng, dim, dim),
            wo: Dense::new(rng, dim, dim),
            heads,
            cache: None,
        }
    }

    fn head_slice(x: &Array3<f32>, n: usize, head: usize, dh: usize) -> Array2<f32> {
        x.slice(s![n, .., head * dh..(head + 1) * dh]).to_owned()
    }

    fn attend(
        &self,
        q: &Array3<f32>,
        k: &Array3<f32>,
        v: &Array3<f32>,
    ) -> (Array3<f32>, Vec<Array2<f32>>) {
        let (n, t, d) = q.dim();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let mut ctx = Array3::<f32>::zeros((n, t, d));
        let mut attns = Vec::with_capacity(n * self.heads);
        for i in 0..n {
            for h in 0..self.heads {
                let qh = Self::head_slice(q, i, h, dh);
                let kh = Self::head_slice(k, i, h, dh);
                let vh = Self::head_slice(v, i, h, dh);
                let mut scores = qh.dot(&kh.t());
                scores *= scale;
                for mut row in scores.rows_mut() {
                    let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
                    row.mapv_inplace(|s| (s - max).exp());
                    let sum: f32 = row.sum();
                    row.mapv_inplace(|s| s / sum);
                }
                let ctx_h = scores.dot(&vh);
                ctx.slice_mut(s![i, .., h * dh..(h + 1) * dh]).assign(&ctx_h);
                attns.push(scores);
            }
        }
        (ctx, attns)
    }
}

impl Layer for MultiHeadAttention {
    fn infer(&self, x: &TensorD) -> TensorD {
        let q = self.wq.infer(x).into_dimensionality::<Ix3>().unwrap();
        let k = self.wk.infer(x).into_dimensionality::<Ix3>().unwrap();
        let v = self.wv.infer(x).into_dimensionality::<Ix3>().unwrap();
        let (ctx, _) = self.attend(&q, &k, &v);
        self.wo.infer(&ctx.into_dyn())
    }

    fn forward(&mut self, x: &TensorD) -> TensorD {
        let q = self.wq.forward(x).into_dimensionality::<Ix3>().unwrap();
        let k = self.wk.forward(x).into_dimensionality::<Ix3>().unwrap();
        let v = self.wv.forward(x).into_dimensionality::<Ix3>().unwrap();
        let (ctx, attns) = self.attend(&q, &k, &v);
        let out = self.wo.forward(&ctx.into_dyn());
        self.cache = Some(AttnCache {
            q,
            k,
            v,
            attn: attns,
        });
        out
    }

    fn backward(&mut self, grad_out: &TensorD) -> TensorD {
        let cache = self.cache.take().expect("backward follows forward");
        let g_ctx = self
            .wo
            .backward(grad_out)
            .into_dimensionality::<Ix3>()
            .unwrap();
        let (n, t, d) = g_ctx.dim();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f32).sqrt();

        let mut dq = Array3::<f32>::zeros((n, t, d));
        let mut dk = Array3::<f32>::zeros((n, t, d));
        let mut dv = Array3::<f32>::zeros((n, t, d));
        for i in 0..n {
            for h in 0..self.heads {
                let attn = &cache.attn[i * self.heads + h];
                let g_ctx_h = g_ctx.slice(s![i, .., h * dh..(h + 1) * dh]).to_owned();
                let vh = Self::head_slice(&cache.v, i, h, dh);
                let qh = Self::head_slice(&cache.q, i, h, dh);
                let kh = Self::head_slice(&cache.k, i, h, dh);

                let dattn = g_ctx_h.dot(&vh.t());
                let dvh = attn.t().dot(&g_ctx_h);

                // softmax backward per row
                let mut dscores = Array2::<f32>::zeros((t, t));
                for ((a_row, da_row), mut ds_row) in attn
                    .rows()
                    .into_iter()
                    .zip(dattn.rows())
                    .zip(dscores.rows_mut())
                {
                    let dot: f32 = a_row.iter().zip(da_row.iter()).map(|(a, b)| a * b).sum();
                    for ((ds, &a), &da) in ds_row.iter_mut().zip(a_row).zip(da_row) {
                        *ds = a * (da - dot);
                    }
                }
                dscores *= scale;

                let dqh = dscores.dot(&kh);
                let dkh = dscores.t().dot(&qh);
                dq.slice_mut(s![i, .., h * dh..(h + 1) * dh]).assign(&dqh);
                dk.slice_mut(s![i, .., h * dh..(h + 1) * dh]).assign(&dkh);
                dv.slice_mut(s![i, .., h * dh..(h + 1) * dh]).assign(&dvh);
            }
        }

        let dx_q = self.wq.backward(&dq.into_dyn());
        let dx_k = self.wk.backward(&dk.into_dyn());
        let dx_v = self.wv.backward(&dv.into_dyn());
        dx_q + &dx_k + &dx_v
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.wq.visit_params(&child_name(prefix, "wq"), f);
        self.wk.visit_params(&child_name(prefix, "wk"), f);
        self.wv.visit_params(&child_name(prefix, "wv"), f);
        self.wo.visit_params(&child_name(prefix, "wo"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.wq.visit_params_mut(&child_name(prefix, "wq"), f);
        self.wk.visit_params_mut(&child_name(prefix, "wk"), f);
        self.wv.visit_params_mut(&child_name(prefix, "wv"), f);
        self.wo.visit_params_mut(&child_name(prefix, "wo"), f);
    }
}

/// Pre-norm transformer encoder block:
/// x = x + attn(ln1(x)); x = x + mlp(ln2(x)).
pub struct TransformerBlock {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    fc1: Dense,
    act: Activation,
    fc2: Dense,
}

impl TransformerBlock {
    pub fn new(rng: &mut ChaCha8Rng, dim: usize, heads: usize, mlp_dim: usize) -> Self {
        TransformerBlock {
            ln1: LayerNorm::new(dim),
            attn: MultiHeadAttention::new(rng, dim, heads),
            ln2: LayerNorm::new(dim),
            fc1: Dense::new(rng, dim, mlp_dim),
            act: Activation::new(ActivationKind::Gelu),
            fc2: Dense::new(rng, mlp_dim, dim),
        }
    }
}

impl Layer for TransformerBlock {
    fn infer(&self, x: &TensorD) -> TensorD {
        let h = x + &self.attn.infer(&self.ln1.infer(x));
        let m = self.fc2.infer(&self.act.infer(&self.fc1.infer(&self.ln2.infer(&h))));
        h + &m
    }

    fn forward(&mut self, x: &TensorD) -> TensorD {
        let h = x + &self.attn.forward(&self.ln1.forward(x));
        let m = self
            .fc2
            .forward(&self.act.forward(&self.fc1.forward(&self.ln2.forward(&h))));
        h + &m
    }

    fn backward(&mut self, grad_out: &TensorD) -> TensorD {
        let g_mlp = self
            .ln2
            .backward(&self.fc1.backward(&self.act.backward(&self.fc2.backward(grad_out))));
        let dh = grad_out + &g_mlp;
        let g_attn = self.ln1.backward(&self.attn.backward(&dh));
        dh + &g_attn
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.ln1.visit_params(&child_name(prefix, "ln1"), f);
        self.attn.visit_params(&child_name(prefix, "attn"), f);
        self.ln2.visit_params(&child_name(prefix, "ln2"), f);
        self.fc1.visit_params(&child_name(prefix, "fc1"), f);
        self.fc2.visit_params(&child_name(prefix, "fc2"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.ln1.visit_params_mut(&child_name(prefix, "ln1"), f);
        self.attn.visit_params_mut(&child_name(prefix, "attn"), f);
        self.ln2.visit_params_mut(&child_name(prefix, "ln2"), f);
        self.fc1.visit_params_mut(&child_name(prefix, "fc1"), f);
        self.fc2.visit_params_mut(&child_name(prefix, "fc2"), f);
    }
}

/// Select the class token representation: (N, T, D) -> (N, D).
pub struct ClsPool {
    cache_tokens: Option<usize>,
}

impl ClsPool {
    pub fn new() -> Self {
        ClsPool { cache_tokens: None }
    }
}

impl Default for ClsPool {
    fn default() -> Self {
        Self::new()
    }
}

impl Layer for ClsPool {
    fn infer(&self, x: &TensorD) -> TensorD {
        let x3 = x.view().into_dimensionality::<Ix3>().expect("NTD input");
        x3.slice(s![.., 0, ..]).to_owned().into_dyn()
    }

    fn forward(&mut self, x: &TensorD) -> TensorD {
        self.cache_tokens = Some(x.shape()[1]);
        self.infer(x)
    }

    fn backward(&mut self, grad_out: &TensorD) -> TensorD {
        let tokens = self.cache_tokens.take().expect("backward follows forward");
        let g2 = grad_out.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let (n, d) = g2.dim();
        let mut dx = Array3::<f32>::zeros((n, tokens, d));
        dx.slice_mut(s![.., 0, ..]).assign(&g2);
        dx.into_dyn()
    }

    fn visit_params(&self, _prefix: &str, _f: &mut dyn FnMut(&str, &Param)) {}

    fn visit_params_mut(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, &mut Param)) {}
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::{check_layer, random_tensor};
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(21)
    }

    #[test]
    fn patch_embed_token_count() {
        let pe = PatchEmbed::new(&mut rng(), 3, 8, 4);
        let x = random_tensor(&[2, 16, 16, 3], 1, 1.0);
        let y = pe.infer(&x);
        assert_eq!(y.shape(), &[2, 16, 8]); // (16/4)^2 tokens
    }

    #[test]
    fn patch_embed_gradients() {
        let mut pe = PatchEmbed::new(&mut rng(), 2, 4, 2);
        let x = random_tensor(&[1, 6, 6, 2], 2, 1.0);
        check_layer(&mut pe, &x, 1e-2, 2e-2);
    }

    #[test]
    fn cls_token_prepends_and_gradients() {
        let mut ct = ClsToken::new(&mut rng(), 4);
        let x = random_tensor(&[2, 3, 4], 3, 1.0);
        let y = ct.forward(&x);
        assert_eq!(y.shape(), &[2, 4, 4]);
        check_layer(&mut ct, &x, 1e-2, 2e-2);
    }

    #[test]
    fn pos_embed_gradients() {
        let mut pe = PosEmbed::new(&mut rng(), 5, 4);
        let x = random_tensor(&[2, 5, 4], 4, 1.0);
        check_layer(&mut pe, &x, 1e-2, 2e-2);
    }

    #[test]
    fn attention_gradients() {
        let mut attn = MultiHeadAttention::new(&mut rng(), 8, 2);
        let x = random_tensor(&[2, 4, 8], 5, 0.5);
        check_layer(&mut attn, &x, 1e-2, 3e-2);
    }

    #[test]
    fn transformer_block_gradients() {
        let mut block = TransformerBlock::new(&mut rng(), 8, 2, 16);
        let x = random_tensor(&[1, 5, 8], 6, 0.5);
        let y = block.forward(&x);
        assert_eq!(y.shape(), x.shape());
        check_layer(&mut block, &x, 1e-2, 3e-2);
    }

    #[test]
    fn cls_pool_takes_first_token() {
        let mut pool = ClsPool::new();
        let x = random_tensor(&[2, 3, 4], 7, 1.0);
        let y = pool.forward(&x);
        assert_eq!(y.shape(), &[2, 4]);
        check_layer(&mut pool, &x, 1e-2, 2e-2);
    }
}
