//! Layers with explicit forward/backward passes over [N, C, H, W] tensors.

use super::{randn, HasParams, Param};
use ndarray::{s, Array1, Array2, Array3, Array4, ArrayD, ArrayView3, Axis, Ix1, Ix2};
use rand::Rng;

fn he_weight(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> ArrayD<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    ArrayD::from_shape_simple_fn(shape.to_vec(), || randn(rng) * std)
}

/// Output spatial size of a strided convolution.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Lowers one sample [C, H, W] to a [C*k*k, OH*OW] patch matrix.
fn im2col(x: ArrayView3<f64>, k: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let oh = conv_out_size(h, k, stride, pad);
    let ow = conv_out_size(w, k, stride, pad);
    let mut cols = Array2::zeros((c * k * k, oh * ow));
    for ci in 0..c {
        for p in 0..k {
            for q in 0..k {
                let row = (ci * k + p) * k + q;
                for oy in 0..oh {
                    let iy = (oy * stride + p) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + q) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[(row, oy * ow + ox)] = x[(ci, iy as usize, ix as usize)];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds a patch matrix back to [C, H, W].
fn col2im(cols: &Array2<f64>, c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Array3<f64> {
    let oh = conv_out_size(h, k, stride, pad);
    let ow = conv_out_size(w, k, stride, pad);
    let mut x = Array3::zeros((c, h, w));
    for ci in 0..c {
        for p in 0..k {
            for q in 0..k {
                let row = (ci * k + p) * k + q;
                for oy in 0..oh {
                    let iy = (oy * stride + p) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + q) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        x[(ci, iy as usize, ix as usize)] += cols[(row, oy * ow + ox)];
                    }
                }
            }
        }
    }
    x
}

/// 2-D convolution, weight layout [OC, IC, K, K].
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize, rng: &mut impl Rng) -> Self {
        let fan_in = in_ch * kernel * kernel;
        Self {
            weight: Param::new(he_weight(&[out_ch, in_ch, kernel, kernel], fan_in, rng)),
            bias: Param::new(ArrayD::zeros(vec![out_ch])),
            kernel,
            stride,
            pad,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        let (n, _c, h, w) = x.dim();
        let oc = self.out_channels();
        let oh = conv_out_size(h, self.kernel, self.stride, self.pad);
        let ow = conv_out_size(w, self.kernel, self.stride, self.pad);
        let w_mat = self
            .weight
            .value
            .view()
            .into_shape((oc, self.weight.value.len() / oc))
            .unwrap();
        let bias = self.bias.value.view().into_dimensionality::<Ix1>().unwrap();
        let mut out = Array4::zeros((n, oc, oh, ow));
        for s_i in 0..n {
            let cols = im2col(x.index_axis(Axis(0), s_i), self.kernel, self.stride, self.pad);
            let y = w_mat.dot(&cols); // [OC, OH*OW]
            let mut out_s = out.index_axis_mut(Axis(0), s_i);
            for c in 0..oc {
                let b = bias[c];
                for (j, v) in y.row(c).iter().enumerate() {
                    out_s[(c, j / ow, j % ow)] = v + b;
                }
            }
        }
        out
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Array4<f64>, gout: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        let (_, oc, oh, ow) = gout.dim();
        let w_mat = self
            .weight
            .value
            .view()
            .into_shape((oc, c * self.kernel * self.kernel))
            .unwrap()
            .to_owned();
        let mut gw = Array2::zeros((oc, c * self.kernel * self.kernel));
        let mut gb = Array1::zeros(oc);
        let mut gx = Array4::zeros((n, c, h, w));
        for s_i in 0..n {
            let cols = im2col(x.index_axis(Axis(0), s_i), self.kernel, self.stride, self.pad);
            let g_s = gout.index_axis(Axis(0), s_i);
            let g_mat = g_s.into_shape((oc, oh * ow)).unwrap().to_owned();
            gw = gw + g_mat.dot(&cols.t());
            for ci in 0..oc {
                gb[ci] += g_mat.row(ci).sum();
            }
            let dcols = w_mat.t().dot(&g_mat);
            gx.index_axis_mut(Axis(0), s_i)
                .assign(&col2im(&dcols, c, h, w, self.kernel, self.stride, self.pad));
        }
        let gw = gw.into_shape(self.weight.value.raw_dim()).unwrap();
        self.weight.grad += &gw;
        self.bias.grad += &gb.into_dyn();
        gx
    }
}

impl HasParams for Conv2d {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

/// 2-D transpose convolution, weight layout [IC, OC, K, K]. With stride 2,
/// kernel 5, pad 2, output_pad 1 it exactly doubles the spatial size.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub weight: Param,
    pub bias: Param,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub output_pad: usize,
}

impl ConvTranspose2d {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        output_pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        Self {
            weight: Param::new(he_weight(&[in_ch, out_ch, kernel, kernel], fan_in, rng)),
            bias: Param::new(ArrayD::zeros(vec![out_ch])),
            kernel,
            stride,
            pad,
            output_pad,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_size(&self, input: usize) -> usize {
        (input - 1) * self.stride + self.kernel + self.output_pad - 2 * self.pad
    }

    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        let (n, ic, h, w) = x.dim();
        let oc = self.out_channels();
        let (oh, ow) = (self.out_size(h), self.out_size(w));
        debug_assert_eq!(conv_out_size(oh, self.kernel, self.stride, self.pad), h);
        let w_mat = self
            .weight
            .value
            .view()
            .into_shape((ic, oc * self.kernel * self.kernel))
            .unwrap()
            .to_owned();
        let bias = self.bias.value.view().into_dimensionality::<Ix1>().unwrap();
        let mut out = Array4::zeros((n, oc, oh, ow));
        for s_i in 0..n {
            let x_mat = x
                .index_axis(Axis(0), s_i)
                .into_shape((ic, h * w))
                .unwrap()
                .to_owned();
            let cols = w_mat.t().dot(&x_mat); // [OC*k*k, H*W]
            let y = col2im(&cols, oc, oh, ow, self.kernel, self.stride, self.pad);
            let mut out_s = out.index_axis_mut(Axis(0), s_i);
            out_s.assign(&y);
            for c in 0..oc {
                out_s.slice_mut(s![c, .., ..]).mapv_inplace(|v| v + bias[c]);
            }
        }
        out
    }

    pub fn backward(&mut self, x: &Array4<f64>, gout: &Array4<f64>) -> Array4<f64> {
        let (n, ic, h, w) = x.dim();
        let (_, oc, _oh, _ow) = gout.dim();
        let kk = self.kernel * self.kernel;
        let w_mat = self
            .weight
            .value
            .view()
            .into_shape((ic, oc * kk))
            .unwrap()
            .to_owned();
        let mut gw = Array2::zeros((ic, oc * kk));
        let mut gb = Array1::zeros(oc);
        let mut gx = Array4::zeros((n, ic, h, w));
        for s_i in 0..n {
            let g_s = gout.index_axis(Axis(0), s_i);
            // Gather is the adjoint of the forward scatter.
            let gcols = im2col(g_s, self.kernel, self.stride, self.pad); // [OC*k*k, H*W]
            let x_mat = x
                .index_axis(Axis(0), s_i)
                .into_shape((ic, h * w))
                .unwrap()
                .to_owned();
            gw = gw + x_mat.dot(&gcols.t());
            for c in 0..oc {
                gb[c] += g_s.slice(s![c, .., ..]).sum();
            }
            let gx_mat = w_mat.dot(&gcols); // [IC, H*W]
            gx.index_axis_mut(Axis(0), s_i)
                .assign(&gx_mat.into_shape((ic, h, w)).unwrap());
        }
        self.weight.grad += &gw.into_shape(self.weight.value.raw_dim()).unwrap();
        self.bias.grad += &gb.into_dyn();
        gx
    }
}

impl HasParams for ConvTranspose2d {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

/// Batch normalization over (N, H, W) per channel.
///
/// `forward_train` is pure: it normalizes with batch statistics and returns
/// them in the cache; the optimizer step applies them to the running
/// averages via [`BatchNorm2d::absorb`].
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: ArrayD<f64>,
    pub running_var: ArrayD<f64>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug)]
pub struct BnCache {
    pub xhat: Array4<f64>,
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(ArrayD::ones(vec![channels])),
            beta: Param::new(ArrayD::zeros(vec![channels])),
            running_mean: ArrayD::zeros(vec![channels]),
            running_var: ArrayD::ones(vec![channels]),
            momentum: 0.99,
            eps: 1e-5,
        }
    }

    pub fn forward_train(&self, x: &Array4<f64>) -> (Array4<f64>, BnCache) {
        let (n, c, h, w) = x.dim();
        let m = (n * h * w) as f64;
        let mut mean = Array1::zeros(c);
        let mut var = Array1::zeros(c);
        for ci in 0..c {
            let v = x.slice(s![.., ci, .., ..]);
            let mu = v.sum() / m;
            mean[ci] = mu;
            var[ci] = v.iter().map(|a| (a - mu) * (a - mu)).sum::<f64>() / m;
        }
        let gamma = self.gamma.value.view().into_dimensionality::<Ix1>().unwrap();
        let beta = self.beta.value.view().into_dimensionality::<Ix1>().unwrap();
        let mut xhat = x.clone();
        let mut y = Array4::zeros((n, c, h, w));
        for ci in 0..c {
            let istd = 1.0 / (var[ci] + self.eps).sqrt();
            let mu = mean[ci];
            let (g, b) = (gamma[ci], beta[ci]);
            let mut xh = xhat.slice_mut(s![.., ci, .., ..]);
            xh.mapv_inplace(|v| (v - mu) * istd);
            let mut ys = y.slice_mut(s![.., ci, .., ..]);
            ys.assign(&xh);
            ys.mapv_inplace(|v| g * v + b);
        }
        (y, BnCache { xhat, mean, var })
    }

    pub fn forward_eval(&self, x: &Array4<f64>) -> Array4<f64> {
        let (_, c, _, _) = x.dim();
        let gamma = self.gamma.value.view().into_dimensionality::<Ix1>().unwrap();
        let beta = self.beta.value.view().into_dimensionality::<Ix1>().unwrap();
        let mut y = x.clone();
        for ci in 0..c {
            let istd = 1.0 / (self.running_var[ci] + self.eps).sqrt();
            let mu = self.running_mean[ci];
            let (g, b) = (gamma[ci], beta[ci]);
            y.slice_mut(s![.., ci, .., ..])
                .mapv_inplace(|v| g * (v - mu) * istd + b);
        }
        y
    }

    /// Folds batch statistics into the running averages.
    pub fn absorb(&mut self, cache: &BnCache) {
        let m = self.momentum;
        for ci in 0..cache.mean.len() {
            self.running_mean[ci] = m * self.running_mean[ci] + (1.0 - m) * cache.mean[ci];
            self.running_var[ci] = m * self.running_var[ci] + (1.0 - m) * cache.var[ci];
        }
    }

    pub fn backward(&mut self, cache: &BnCache, gout: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = gout.dim();
        let m = (n * h * w) as f64;
        let gamma = self.gamma.value.view().into_dimensionality::<Ix1>().unwrap();
        let mut gx = Array4::zeros((n, c, h, w));
        for ci in 0..c {
            let g = gout.slice(s![.., ci, .., ..]);
            let xh = cache.xhat.slice(s![.., ci, .., ..]);
            let sum_g = g.sum();
            let sum_gx = g.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>();
            self.gamma.grad[ci] += sum_gx;
            self.beta.grad[ci] += sum_g;
            let istd = 1.0 / (cache.var[ci] + self.eps).sqrt();
            let scale = gamma[ci] * istd / m;
            let mut out = gx.slice_mut(s![.., ci, .., ..]);
            ndarray::Zip::from(&mut out).and(&g).and(&xh).for_each(|o, &gi, &xi| {
                *o = scale * (m * gi - sum_g - xi * sum_gx);
            });
        }
        gx
    }
}

impl HasParams for BatchNorm2d {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(format!("{prefix}.gamma"), &mut self.gamma);
        f(format!("{prefix}.beta"), &mut self.beta);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut ArrayD<f64>)) {
        f(format!("{prefix}.running_mean"), &mut self.running_mean);
        f(format!("{prefix}.running_var"), &mut self.running_var);
    }
}

/// Fully connected layer over [N, I].
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param, // [O, I]
    pub bias: Param,   // [O]
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: Param::new(he_weight(&[out_dim, in_dim], in_dim, rng)),
            bias: Param::new(ArrayD::zeros(vec![out_dim])),
        }
    }

    /// All-zero weights with a constant bias; used for identity-at-init FiLM.
    pub fn zeros_with_bias(in_dim: usize, out_dim: usize, bias: f64) -> Self {
        Self {
            weight: Param::new(ArrayD::zeros(vec![out_dim, in_dim])),
            bias: Param::new(ArrayD::from_elem(vec![out_dim], bias)),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let w = self.weight.value.view().into_dimensionality::<Ix2>().unwrap();
        let b = self.bias.value.view().into_dimensionality::<Ix1>().unwrap();
        x.dot(&w.t()) + &b
    }

    pub fn backward(&mut self, x: &Array2<f64>, gout: &Array2<f64>) -> Array2<f64> {
        let w = self.weight.value.view().into_dimensionality::<Ix2>().unwrap().to_owned();
        self.weight.grad += &gout.t().dot(x).into_dyn();
        self.bias.grad += &gout.sum_axis(Axis(0)).into_dyn();
        gout.dot(&w)
    }
}

impl HasParams for Linear {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

/// Leaky ReLU; slope 1 in the positive half.
pub fn leaky_relu(x: &Array4<f64>, slope: f64) -> Array4<f64> {
    x.mapv(|v| if v >= 0.0 { v } else { slope * v })
}

pub fn leaky_relu_backward(x: &Array4<f64>, gout: &Array4<f64>, slope: f64) -> Array4<f64> {
    let mut gx = gout.clone();
    ndarray::Zip::from(&mut gx).and(x).for_each(|g, &xi| {
        if xi < 0.0 {
            *g *= slope;
        }
    });
    gx
}

pub fn relu2(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

pub fn relu2_backward(x: &Array2<f64>, gout: &Array2<f64>) -> Array2<f64> {
    let mut gx = gout.clone();
    ndarray::Zip::from(&mut gx).and(x).for_each(|g, &xi| {
        if xi < 0.0 {
            *g = 0.0;
        }
    });
    gx
}

/// 2x2 max-pooling with stride 2; trailing odd rows/columns are dropped.
pub struct MaxPool2d;

impl MaxPool2d {
    /// Returns pooled values and the flat (h*W+w) argmax index per cell.
    pub fn forward(x: &Array4<f64>) -> (Array4<f64>, Array4<usize>) {
        let (n, c, h, w) = x.dim();
        let (oh, ow) = (h / 2, w / 2);
        let mut y = Array4::zeros((n, c, oh, ow));
        let mut idx = Array4::zeros((n, c, oh, ow));
        for ni in 0..n {
            for ci in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_i = 0;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let (iy, ix) = (oy * 2 + dy, ox * 2 + dx);
                                let v = x[(ni, ci, iy, ix)];
                                if v > best {
                                    best = v;
                                    best_i = iy * w + ix;
                                }
                            }
                        }
                        y[(ni, ci, oy, ox)] = best;
                        idx[(ni, ci, oy, ox)] = best_i;
                    }
                }
            }
        }
        (y, idx)
    }

    pub fn backward(
        idx: &Array4<usize>,
        gout: &Array4<f64>,
        in_h: usize,
        in_w: usize,
    ) -> Array4<f64> {
        let (n, c, oh, ow) = gout.dim();
        let mut gx = Array4::zeros((n, c, in_h, in_w));
        for ni in 0..n {
            for ci in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let flat = idx[(ni, ci, oy, ox)];
                        gx[(ni, ci, flat / in_w, flat % in_w)] += gout[(ni, ci, oy, ox)];
                    }
                }
            }
        }
        gx
    }
}

/// Max over the time (last) axis: [N, C, F, T] -> [N, C, F].
pub struct GlobalMaxPoolTime;

impl GlobalMaxPoolTime {
    pub fn forward(x: &Array4<f64>) -> (Array3<f64>, Array3<usize>) {
        let (n, c, fdim, t) = x.dim();
        let mut y = Array3::zeros((n, c, fdim));
        let mut idx = Array3::zeros((n, c, fdim));
        for ni in 0..n {
            for ci in 0..c {
                for fi in 0..fdim {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_t = 0;
                    for ti in 0..t {
                        let v = x[(ni, ci, fi, ti)];
                        if v > best {
                            best = v;
                            best_t = ti;
                        }
                    }
                    y[(ni, ci, fi)] = best;
                    idx[(ni, ci, fi)] = best_t;
                }
            }
        }
        (y, idx)
    }

    pub fn backward(idx: &Array3<usize>, gout: &Array3<f64>, t: usize) -> Array4<f64> {
        let (n, c, fdim) = gout.dim();
        let mut gx = Array4::zeros((n, c, fdim, t));
        for ni in 0..n {
            for ci in 0..c {
                for fi in 0..fdim {
                    gx[(ni, ci, fi, idx[(ni, ci, fi)])] += gout[(ni, ci, fi)];
                }
            }
        }
        gx
    }
}
