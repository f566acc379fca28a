//! Convolution and spatial pooling layers (NHWC layout).
//!
//! Standard convolutions run through im2col + matmul; depthwise
//! convolutions and pools use direct loops. Padding follows the
//! ceil-mode "same" convention, so stride-2 stages halve spatial dims.

use ndarray::{Array2, Array4, Ix4};
use rand_chacha::ChaCha8Rng;

use super::{child_name, init, Layer, Param, TensorD};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    out_h: usize,
    out_w: usize,
    pad_top: isize,
    pad_left: isize,
}

fn geometry(h: usize, w: usize, kh: usize, kw: usize, stride: usize, padding: Padding) -> Geometry {
    match padding {
        Padding::Same => {
            let out_h = h.div_ceil(stride);
            let out_w = w.div_ceil(stride);
            let pad_h = ((out_h - 1) * stride + kh).saturating_sub(h);
            let pad_w = ((out_w - 1) * stride + kw).saturating_sub(w);
            Geometry {
                out_h,
                out_w,
                pad_top: (pad_h / 2) as isize,
                pad_left: (pad_w / 2) as isize,
            }
        }
        Padding::Valid => Geometry {
            out_h: (h - kh) / stride + 1,
            out_w: (w - kw) / stride + 1,
            pad_top: 0,
            pad_left: 0,
        },
    }
}

fn im2col(x: &Array4<f32>, kh: usize, kw: usize, stride: usize, geo: Geometry) -> Array2<f32> {
    let (n, h, w, c) = x.dim();
    let rows = n * geo.out_h * geo.out_w;
    let cols = kh * kw * c;
    let mut out = Array2::<f32>::zeros((rows, cols));
    let mut row = 0;
    for img in 0..n {
        for oh in 0..geo.out_h {
            for ow in 0..geo.out_w {
                let base_r = oh as isize * stride as isize - geo.pad_top;
                let base_c = ow as isize * stride as isize - geo.pad_left;
                for dkh in 0..kh {
                    let src_r = base_r + dkh as isize;
                    for dkw in 0..kw {
                        let src_c = base_c + dkw as isize;
                        if src_r >= 0 && src_c >= 0 && (src_r as usize) < h && (src_c as usize) < w
                        {
                            let dst = (dkh * kw + dkw) * c;
                            for ch in 0..c {
                                out[[row, dst + ch]] = x[[img, src_r as usize, src_c as usize, ch]];
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
    out
}

fn col2im(
    dcols: &Array2<f32>,
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    geo: Geometry,
) -> Array4<f32> {
    let mut dx = Array4::<f32>::zeros((n, h, w, c));
    let mut row = 0;
    for img in 0..n {
        for oh in 0..geo.out_h {
            for ow in 0..geo.out_w {
                let base_r = oh as isize * stride as isize - geo.pad_top;
                let base_c = ow as isize * stride as isize - geo.pad_left;
                for dkh in 0..kh {
                    let src_r = base_r + dkh as isize;
                    for dkw in 0..kw {
                        let src_c = base_c + dkw as isize;
                        if src_r >= 0 && src_c >= 0 && (src_r as usize) < h && (src_c as usize) < w
                        {
                            let src = (dkh * kw + dkw) * c;
                            for ch in 0..c {
                                dx[[img, src_r as usize, src_c as usize, ch]] +=
                                    dcols[[row, src + ch]];
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
    dx
}

/// 2-D convolution, weights (KH, KW, Cin, Cout).
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    kernel: (usize, usize),
    stride: usize,
    padding: Padding,
    in_channels: usize,
    out_channels: usize,
    cache: Option<(Vec<usize>, Array2<f32>, Geometry)>,
}

impl Conv2d {
    pub fn new(
        rng: &mut ChaCha8Rng,
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: Padding,
    ) -> Self {
        let fan_in = kernel.0 * kernel.1 * in_channels;
        Conv2d {
            weight: Param::new(init::he_normal(
                rng,
                &[kernel.0, kernel.1, in_channels, out_channels],
                fan_in,
            )),
            bias: Param::new(init::zeros(&[out_channels])),
            kernel,
            stride,
            padding,
            in_channels,
            out_channels,
            cache: None,
        }
    }

    fn weight_matrix(&self) -> Array2<f32> {
        let (kh, kw) = self.kernel;
        self.weight
            .value
            .view()
            .into_shape_with_order((kh * kw * self.in_channels, self.out_channels))
            .expect("contiguous weight")
            .to_owned()
    }

    fn run(&self, x: &TensorD) -> (TensorD, Array2<f32>, Geometry) {
        let x4 = x.view().into_dimensionality::<Ix4>().expect("NHWC input");
        let (n, h, w, _c) = x4.dim();
        let (kh, kw) = self.kernel;
        let geo = geometry(h, w, kh, kw, self.stride, self.padding);
        let cols = im2col(&x4.to_owned(), kh, kw, self.stride, geo);
        let mut out = cols.dot(&self.weight_matrix());
        let bias = self
            .bias
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap();
        out += &bias;
        let out = out
            .into_shape_with_order((n, geo.out_h, geo.out_w, self.out_channels))
            .unwrap()
            .into_dyn();
        (out, cols, geo)
    }
}

impl Layer for Conv2d {
    fn infer(&self, x: &TensorD) -> TensorD {
        self.run(x).0
    }

    fn forward(&mut self, x: &TensorD) -> TensorD {
        let (out, cols, geo) = self.run(x);
        self.cache = Some((x.shape().to_vec(), cols, geo));
        out
    }

    fn backward(&mut self, grad_out: &TensorD) -> TensorD {
        let (x_shape, cols, geo) = self.cache.take().expect("backward follows forward");
        let (n, h, w, c) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
        let (kh, kw) = self.kernel;
        let g_mat = grad_out
            .view()
            .into_shape_with_order((n * geo.out_h * geo.out_w, self.out_channels))
            .unwrap()
            .to_owned();

        let dw = cols.t().dot(&g_mat);
        self.weight.grad += &dw
            .into_shape_with_order(self.weight.value.raw_dim())
            .unwrap();
        self.bias.grad += &g_mat.sum_axis(ndarray::Axis(0)).into_dyn();

        let dcols = g_mat.dot(&self.weight_matrix().t());
        col2im(&dcols, n, h, w, c, kh, kw, self.stride, geo).into_dyn()
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

/// Depthwise convolution: one spatial kernel per channel, weights (KH, KW, C).
pub struct DepthwiseConv2d {
    pub weight: Param,
    pub bias: Param,
    kernel: (usize, usize),
    stride: usize,
    padding: Padding,
    channels: usize,
    cache: Option<(TensorD, Geometry)>,
}

impl DepthwiseConv2d {
    pub fn new(
        rng: &mut ChaCha8Rng,
        channels: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: Padding,
    ) -> Self {
        let fan_in = kernel.0 * kernel.1;
        DepthwiseConv2d {
            weight: Param::new(init::he_normal(
                rng,
                &[kernel.0, kernel.1, channels],
                fan_in,
            )),
            bias: Param::new(init::zeros(&[channels])),
            kernel,
            stride,
            padding,
            channels,
            cache: None,
        }
    }

    fn run(&self, x: &TensorD) -> (TensorD, Geometry) {
        let x4 = x.view().into_dimensionality::<Ix4>().expect("NHWC input");
        let (n, h, w, c) = x4.dim();
        debug_assert_eq!(c, self.channels);
        let (kh, kw) = self.kernel;
        let geo = geometry(h, w, kh, kw, self.stride, self.padding);
        let weight = self.weight.value.view().into_dimensionality::<ndarray::Ix3>().unwrap();
        let bias = self.bias.value.as_slice().unwrap();
        let mut out = Array4::<f32>::zeros((n, geo.out_h, geo.out_w, c));
        for img in 0..n {
            for oh in 0..geo.out_h {
                for ow in 0..geo.out_w {
                    let base_r = oh as isize * self.stride as isize - geo.pad_top;
                    let base_c = ow as isize * self.stride as isize - geo.pad_left;
                    for ch in 0..c {
                        let mut acc = bias[ch];
                        for dkh in 0..kh {
                            let src_r = base_r + dkh as isize;
                            if src_r < 0 || src_r as usize >= h {
                                continue;
                            }
                            for dkw in 0..kw {
                                let src_c = base_c + dkw as isize;
                                if src_c < 0 || src_c as usize >= w {
                                    continue;
                                }
                                acc += x4[[img, src_r as usize, src_c as usize, ch]]
                                    * weight[[dkh, dkw, ch]];
                            }
                        }
                        out[[img, oh, ow, ch]] = acc;
                    }
                }
            }
        }
        (out.into_dyn(), geo)
    }
}

impl Layer for DepthwiseConv2d {
    fn infer(&self, x: &TensorD) -> TensorD {
        self.run(x).0
    }

    fn forward(&mut self, x: &TensorD) -> TensorD {
        let (out, geo) = self.run(x);
        self.cache = Some((x.clone(), geo));
        out
    }

    fn backward(&mut self, grad_out: &TensorD) -> TensorD {
        let (x, geo) = self.cache.take().expect("backward follows forward");
        let x4 = x.view().into_dimensionality::<Ix4>().unwrap();
        let g4 = grad_out.view().into_dimensionality::<Ix4>().unwrap();
        let (n, h, w, c) = x4.dim();
        let (kh, kw) = self.kernel;
        let weight = self
            .weight
            .value
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap()
            .to_owned();

        let mut dweight = ndarray::Array3::<f32>::zeros((kh, kw, c));
        let mut dbias = vec![0.0f32; c];
        let mut dx = Array4::<f32>::zeros((n, h, w, c));
        for img in 0..n {
            for oh in 0..geo.out_h {
                for ow in 0..geo.out_w {
                    let base_r = oh as isize * self.stride as isize - geo.pad_top;
                    let base_c = ow as isize * self.stride as isize - geo.pad_left;
                    for ch in 0..c {
                        let g = g4[[img, oh, ow, ch]];
                        if g == 0.0 {
                            continue;
                        }
                        dbias[ch] += g;
                        for dkh in 0..kh {
                            let src_r = base_r + dkh as isize;
                            if src_r < 0 || src_r as usize >= h {
                                continue;
                            }
                            for dkw in 0..kw {
                                let src_c = base_c + dkw as isize;
                                if src_c < 0 || src_c as usize >= w {
                                    continue;
                                }
                                dweight[[dkh, dkw, ch]] +=
                                    g * x4[[img, src_r as usize, src_c as usize, ch]];
                                dx[[img, src_r as usize, src_c as usize, ch]] +=
                                    g * weight[[dkh, dkw, ch]];
                            }
                        }
                    }
                }
            }
        }
        self.weight.grad += &dweight.into_dyn();
        self.bias.grad += &ndarray::Array1::from(dbias).into_dyn();
        dx.into_dyn()
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

/// Max pooling; backward routes gradients to the argmax cells.
pub struct MaxPool2d {
    kernel: usize,
    stride: usize,
    padding: Padding,
    cache: Option<(Vec<usize>, Vec<usize>)>, // input shape, flat argmax per output
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, padding: Padding) -> Self {
        MaxPool2d {
            kernel,
            stride,
            padding,
            cache: None,
        }
    }

    fn run(&self, x: &TensorD) -> (TensorD, Vec<usize>) {
        let x4 = x.view().into_dimensionality::<Ix4>().expect("NHWC input");
        let (n, h, w, c) = x4.dim();
        let geo = geometry(h, w, self.kernel, self.kernel, self.stride, self.padding);
        let mut out = Array4::<f32>::zeros((n, geo.out_h, geo.out_w, c));
        let mut argmax = vec![0usize; n * geo.out_h * geo.out_w * c];
        let mut idx = 0;
        for img in 0..n {
            for oh in 0..geo.out_h {
                for ow in 0..geo.out_w {
                    let base_r = oh as isize * self.stride as isize - geo.pad_top;
                    let base_c = ow as isize * self.stride as isize - geo.pad_left;
                    for ch in 0..c {
                        let mut best = f32::NEG_INFINITY;
                        let mut best_flat = 0usize;
                        for dkh in 0..self.kernel {
                            let src_r = base_r + dkh as isize;
                            if src_r < 0 || src_r as usize >= h {
                                continue;
                            }
                            for dkw in 0..self.kernel {
                                let src_c = base_c + dkw as isize;
                                if src_c < 0 || src_c as usize >= w {
                                    continue;
                                }
                                let v = x4[[img, src_r as usize, src_c as usize, ch]];
                                if v > best {
                                    best = v;
                                    best_flat = ((img * h + src_r as usize) * w
                                        + src_c as usize)
                                        * c
                                        + ch;
                                }
                            }
                        }
                        out[[img, oh, ow, ch]] = best;
                        argmax[idx] = best_flat;
                        idx += 1;
                    }
                }
            }
        }
        (out.into_dyn(), argmax)
    }
}

impl Layer for MaxPool2d {
    fn infer(&self, x: &TensorD) -> TensorD {
        self.run(x).0
    }

    fn forward(&mut self, x: &TensorD) -> TensorD {
        let (out, argmax) = self.run(x);
        self.cache = Some((x.shape().to_vec(), argmax));
        out
    }

    fn backward(&mut self, grad_out: &TensorD) -> TensorD {
        let (x_shape, argmax) = self.cache.take().expect("backward follows forward");
        let mut dx = TensorD::zeros(ndarray::IxDyn(&x_shape));
        let dx_flat = dx.as_slice_mut().unwrap();
        for (g, &flat) in grad_out.iter().zip(argmax.iter()) {
            dx_flat[flat] += *g;
        }
        dx
    }

    fn visit_params(&self, _prefix: &str, _f: &mut dyn FnMut(&str, &Param)) {}

    fn visit_params_mut(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, &mut Param)) {}
}

/// Average pooling over the valid cells of each window.
pub struct AvgPool2d {
    kernel: usize,
    stride: usize,
    padding: Padding,
    cache: Option<Vec<usize>>,
}

impl AvgPool2d {
    pub fn new(kernel: usize, stride: usize, padding: Padding) -> Self {
        AvgPool2d {
            kernel,
            stride,
            padding,
            cache: None,
        }
    }

    fn window(
        &self,
        geo: Geometry,
        oh: usize,
        ow: usize,
        h: usize,
        w: usize,
    ) -> (Vec<(usize, usize)>, f32) {
        let base_r = oh as isize * self.stride as isize - geo.pad_top;
        let base_c = ow as isize * self.stride as isize - geo.pad_left;
        let mut cells = Vec::new();
        for dkh in 0..self.kernel {
            let src_r = base_r + dkh as isize;
            if src_r < 0 || src_r as usize >= h {
                continue;
            }
            for dkw in 0..self.kernel {
                let src_c = base_c + dkw as isize;
                if src_c < 0 || src_c as usize >= w {
                    continue;
                }
                cells.push((src_r as usize, src_c as usize));
            }
        }
        let inv = 1.0 / cells.len().max(1) as f32;
        (cells, inv)
    }
}

impl Layer for AvgPool2d {
    fn infer(&self, x: &TensorD) -> TensorD {
        let x4 = x.view().into_dimensionality::<Ix4>().expect("NHWC input");
        let (n, h, w, c) = x4.dim();
        let geo = geometry(h, w, self.kernel, self.kernel, self.stride, self.padding);
        let mut out = Array4::<f32>::zeros((n, geo.out_h, geo.out_w, c));
        for img in 0..n {
            for oh in 0..geo.out_h {
                for ow in 0..geo.out_w {
                    let (cells, inv) = self.window(geo, oh, ow, h, w);
                    for ch in 0..c {
                        let sum: f32 = cells.iter().map(|&(r, col)| x4[[img, r, col, ch]]).sum();
                        out[[img, oh, ow, ch]] = sum * inv;
                    }
                }
            }
        }
        out.into_dyn()
    }

    fn forward(&mut self, x: &TensorD) -> TensorD {
        self.cache = Some(x.shape().to_vec());
        self.infer(x)
    }

    fn backward(&mut self, grad_out: &TensorD) -> TensorD {
        let x_shape = self.cache.take().expect("backward follows forward");
        let (n, h, w, c) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
        let geo = geometry(h, w, self.kernel, self.kernel, self.stride, self.padding);
        let g4 = grad_out.view().into_dimensionality::<Ix4>().unwrap();
        let mut dx = Array4::<f32>::zeros((n, h, w, c));
        for img in 0..n {
            for oh in 0..geo.out_h {
                for ow in 0..geo.out_w {
                    let (cells, inv) = self.window(geo, oh, ow, h, w);
                    for ch in 0..c {
                        let g = g4[[img, oh, ow, ch]] * inv;
                        for &(r, col) in &cells {
                            dx[[img, r, col, ch]] += g;
                        }
                    }
                }
            }
        }
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
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn conv_same_padding_keeps_spatial_dims() {
        let conv = Conv2d::new(&mut rng(), 3, 8, (3, 3), 1, Padding::Same);
        let x = random_tensor(&[2, 9, 9, 3], 1, 1.0);
        let y = conv.infer(&x);
        assert_eq!(y.shape(), &[2, 9, 9, 8]);
    }

    #[test]
    fn conv_stride_two_halves_dims() {
        let conv = Conv2d::new(&mut rng(), 3, 4, (3, 3), 2, Padding::Same);
        let x = random_tensor(&[1, 9, 9, 3], 2, 1.0);
        let y = conv.infer(&x);
        assert_eq!(y.shape(), &[1, 5, 5, 4]);
    }

    #[test]
    fn conv_matches_direct_convolution() {
        // 1x1 kernel conv is a per-pixel dense layer; verify against it
        let conv = Conv2d::new(&mut rng(), 2, 3, (1, 1), 1, Padding::Same);
        let x = random_tensor(&[1, 4, 4, 2], 3, 1.0);
        let y = conv.infer(&x);
        let w = conv.weight.value.view().into_dimensionality::<Ix4>().unwrap();
        let b = conv.bias.value.as_slice().unwrap();
        let x4 = x.view().into_dimensionality::<Ix4>().unwrap();
        let y4 = y.view().into_dimensionality::<Ix4>().unwrap();
        for r in 0..4 {
            for c in 0..4 {
                for o in 0..3 {
                    let expected: f32 = (0..2).map(|i| x4[[0, r, c, i]] * w[[0, 0, i, o]]).sum::<f32>() + b[o];
                    assert!((y4[[0, r, c, o]] - expected).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn conv_gradients() {
        let mut conv = Conv2d::new(&mut rng(), 2, 3, (3, 3), 1, Padding::Same);
        let x = random_tensor(&[2, 5, 5, 2], 4, 1.0);
        check_layer(&mut conv, &x, 1e-2, 2e-2);
    }

    #[test]
    fn conv_strided_valid_gradients() {
        let mut conv = Conv2d::new(&mut rng(), 2, 2, (3, 3), 2, Padding::Valid);
        let x = random_tensor(&[1, 7, 7, 2], 5, 1.0);
        check_layer(&mut conv, &x, 1e-2, 2e-2);
    }

    #[test]
    fn depthwise_gradients() {
        let mut conv = DepthwiseConv2d::new(&mut rng(), 3, (3, 3), 1, Padding::Same);
        let x = random_tensor(&[2, 5, 5, 3], 6, 1.0);
        check_layer(&mut conv, &x, 1e-2, 2e-2);
    }

    #[test]
    fn depthwise_strided_gradients() {
        let mut conv = DepthwiseConv2d::new(&mut rng(), 2, (3, 3), 2, Padding::Same);
        let x = random_tensor(&[1, 6, 6, 2], 7, 1.0);
        check_layer(&mut conv, &x, 1e-2, 2e-2);
    }

    #[test]
    fn maxpool_forward_and_gradients() {
        let mut pool = MaxPool2d::new(2, 2, Padding::Valid);
        let x = random_tensor(&[1, 4, 4, 2], 8, 1.0);
        let y = pool.forward(&x);
        assert_eq!(y.shape(), &[1, 2, 2, 2]);
        check_layer(&mut pool, &x, 1e-3, 3e-2);
    }

    #[test]
    fn avgpool_gradients() {
        let mut pool = AvgPool2d::new(3, 1, Padding::Same);
        let x = random_tensor(&[1, 5, 5, 2], 9, 1.0);
        let y = pool.forward(&x);
        assert_eq!(y.shape(), x.shape());
        check_layer(&mut pool, &x, 1e-2, 2e-2);
    }
}
