//! Layers with explicit forward caches and backward passes.
//!
//! Backward methods accumulate into the parameter gradients only when the
//! parameter is trainable, and compute the input gradient only on request.

use rand::Rng;

use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

/// What a convolution keeps for its backward pass.
#[derive(Debug, Clone)]
pub struct ConvCache {
    /// Unfolded input `(in_c*k*k) x (n*oh*ow)`; the input itself for 1x1/s1.
    cols: Vec<f32>,
    in_shape: (usize, usize, usize, usize),
    out_hw: (usize, usize),
}

impl Conv2d {
    /// He-normal weights scaled by `gain`, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        rng: &mut R,
        name: &str,
        group: ParamGroup,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        gain: f32,
    ) -> Self {
        let fan_in = (in_c * k * k) as f32;
        let weight = ps.add_normal(
            rng,
            format!("{name}.weight"),
            &[out_c, in_c, k, k],
            group,
            gain * (2.0 / fan_in).sqrt(),
        );
        let bias = ps.add_zeros(format!("{name}.bias"), &[out_c], group);
        Conv2d {
            weight,
            bias,
            in_c,
            out_c,
            k,
            stride,
            pad: k / 2,
        }
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (conv_out(h, self.k, self.stride, self.pad), conv_out(w, self.k, self.stride, self.pad))
    }

    fn im2col(&self, x: &Tensor, oh: usize, ow: usize) -> Vec<f32> {
        let (k, s, p) = (self.k, self.stride, self.pad as isize);
        let cols_w = x.n * oh * ow;
        let mut cols = vec![0.0f32; self.in_c * k * k * cols_w];
        for ci in 0..x.c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let dst = &mut cols[row * cols_w..(row + 1) * cols_w];
                    for ni in 0..x.n {
                        let src = &x.data[((ci * x.n + ni) * x.h) * x.w..((ci * x.n + ni + 1) * x.h) * x.w];
                        for oi in 0..oh {
                            let iy = (oi * s) as isize - p + ki as isize;
                            if iy < 0 || iy >= x.h as isize {
                                continue;
                            }
                            let srow = &src[iy as usize * x.w..(iy as usize + 1) * x.w];
                            let drow = &mut dst[(ni * oh + oi) * ow..(ni * oh + oi + 1) * ow];
                            for (oj, d) in drow.iter_mut().enumerate() {
                                let ix = (oj * s) as isize - p + kj as isize;
                                if ix >= 0 && ix < x.w as isize {
                                    *d = srow[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &[f32], in_shape: (usize, usize, usize, usize), oh: usize, ow: usize) -> Tensor {
        let (c, n, h, w) = in_shape;
        let (k, s, p) = (self.k, self.stride, self.pad as isize);
        let cols_w = n * oh * ow;
        let mut dx = Tensor::zeros(c, n, h, w);
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let src = &dcols[row * cols_w..(row + 1) * cols_w];
                    for ni in 0..n {
                        let base = ((ci * n + ni) * h) * w;
                        for oi in 0..oh {
                            let iy = (oi * s) as isize - p + ki as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let drow = base + iy as usize * w;
                            let srow = &src[(ni * oh + oi) * ow..(ni * oh + oi + 1) * ow];
                            for (oj, &g) in srow.iter().enumerate() {
                                let ix = (oj * s) as isize - p + kj as isize;
                                if ix >= 0 && ix < w as isize {
                                    dx.data[drow + ix as usize] += g;
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> (Tensor, ConvCache) {
        assert_eq!(x.c, self.in_c, "conv input channels");
        let (oh, ow) = self.out_hw(x.h, x.w);
        let cols = if self.is_pointwise() {
            x.data.clone()
        } else {
            self.im2col(x, oh, ow)
        };
        let cols_w = x.n * oh * ow;
        let mut y = Tensor::zeros(self.out_c, x.n, oh, ow);
        let bias = ps.value(self.bias);
        for (o, chunk) in y.data.chunks_mut(cols_w).enumerate() {
            chunk.iter_mut().for_each(|v| *v = bias[o]);
        }
        let kk = self.in_c * self.k * self.k;
        gemm(self.out_c, kk, cols_w, ps.value(self.weight), false, &cols, false, &mut y.data, 1.0);
        let cache = ConvCache {
            cols,
            in_shape: x.shape(),
            out_hw: (oh, ow),
        };
        (y, cache)
    }

    pub fn backward(&self, ps: &mut ParamStore, cache: &ConvCache, dy: &Tensor, need_dx: bool) -> Option<Tensor> {
        let (oh, ow) = cache.out_hw;
        let cols_w = cache.in_shape.1 * oh * ow;
        let kk = self.in_c * self.k * self.k;
        if ps.is_trainable(self.weight) {
            let mut dw = std::mem::take(&mut ps.params[self.weight.0].grad);
            gemm(self.out_c, cols_w, kk, &dy.data, false, &cache.cols, true, &mut dw, 1.0);
            ps.params[self.weight.0].grad = dw;
        }
        if ps.is_trainable(self.bias) {
            let db = ps.grad_mut(self.bias);
            for (o, chunk) in dy.data.chunks(cols_w).enumerate() {
                db[o] += chunk.iter().sum::<f32>();
            }
        }
        if !need_dx {
            return None;
        }
        let mut dcols = vec![0.0f32; kk * cols_w];
        gemm(kk, self.out_c, cols_w, ps.value(self.weight), true, &dy.data, false, &mut dcols, 0.0);
        if self.is_pointwise() {
            let (c, n, h, w) = cache.in_shape;
            Some(Tensor::from_vec(c, n, h, w, dcols))
        } else {
            Some(self.col2im(&dcols, cache.in_shape, oh, ow))
        }
    }
}

/// Fully connected layer on row-major `batch x features` matrices.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_f: usize,
    pub out_f: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        rng: &mut R,
        name: &str,
        group: ParamGroup,
        in_f: usize,
        out_f: usize,
        std: f32,
    ) -> Self {
        let weight = ps.add_normal(rng, format!("{name}.weight"), &[out_f, in_f], group, std);
        let bias = ps.add_zeros(format!("{name}.bias"), &[out_f], group);
        Linear { weight, bias, in_f, out_f }
    }

    pub fn he<R: Rng>(ps: &mut ParamStore, rng: &mut R, name: &str, group: ParamGroup, in_f: usize, out_f: usize) -> Self {
        Self::new(ps, rng, name, group, in_f, out_f, (2.0 / in_f as f32).sqrt())
    }

    pub fn forward(&self, ps: &ParamStore, x: &[f32], batch: usize) -> Vec<f32> {
        assert_eq!(x.len(), batch * self.in_f);
        let bias = ps.value(self.bias);
        let mut y: Vec<f32> = (0..batch).flat_map(|_| bias.iter().copied()).collect();
        gemm(batch, self.in_f, self.out_f, x, false, ps.value(self.weight), true, &mut y, 1.0);
        y
    }

    pub fn backward(&self, ps: &mut ParamStore, x: &[f32], dy: &[f32], batch: usize, need_dx: bool) -> Option<Vec<f32>> {
        if ps.is_trainable(self.weight) {
            let mut dw = std::mem::take(&mut ps.params[self.weight.0].grad);
            gemm(self.out_f, batch, self.in_f, dy, true, x, false, &mut dw, 1.0);
            ps.params[self.weight.0].grad = dw;
        }
        if ps.is_trainable(self.bias) {
            let db = ps.grad_mut(self.bias);
            for row in dy.chunks(self.out_f) {
                for (d, g) in db.iter_mut().zip(row) {
                    *d += g;
                }
            }
        }
        if !need_dx {
            return None;
        }
        let mut dx = vec![0.0; batch * self.in_f];
        gemm(batch, self.out_f, self.in_f, dy, false, ps.value(self.weight), false, &mut dx, 0.0);
        Some(dx)
    }
}

/// 2x2 stride-2 transposed convolution (exact 2x upsampling).
#[derive(Debug, Clone)]
pub struct Deconv2x2 {
    /// `[out_c * 4, in_c]`, row `o*4 + a*2 + b` for output offset `(a, b)`.
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_c: usize,
    pub out_c: usize,
}

impl Deconv2x2 {
    pub fn new<R: Rng>(ps: &mut ParamStore, rng: &mut R, name: &str, group: ParamGroup, in_c: usize, out_c: usize) -> Self {
        let weight = ps.add_normal(
            rng,
            format!("{name}.weight"),
            &[out_c * 4, in_c],
            group,
            (2.0 / in_c as f32).sqrt(),
        );
        let bias = ps.add_zeros(format!("{name}.bias"), &[out_c], group);
        Deconv2x2 { weight, bias, in_c, out_c }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Tensor {
        let plane = x.plane();
        let mut z = vec![0.0f32; self.out_c * 4 * plane];
        gemm(self.out_c * 4, self.in_c, plane, ps.value(self.weight), false, &x.data, false, &mut z, 0.0);
        let mut y = Tensor::zeros(self.out_c, x.n, x.h * 2, x.w * 2);
        let bias = ps.value(self.bias);
        for o in 0..self.out_c {
            for ab in 0..4 {
                let (a, b) = (ab / 2, ab % 2);
                let src = &z[(o * 4 + ab) * plane..(o * 4 + ab + 1) * plane];
                for ni in 0..x.n {
                    for i in 0..x.h {
                        for j in 0..x.w {
                            let v = src[(ni * x.h + i) * x.w + j];
                            let idx = ((o * x.n + ni) * y.h + 2 * i + a) * y.w + 2 * j + b;
                            y.data[idx] = v + bias[o];
                        }
                    }
                }
            }
        }
        y
    }

    pub fn backward(&self, ps: &mut ParamStore, x: &Tensor, dy: &Tensor, need_dx: bool) -> Option<Tensor> {
        let plane = x.plane();
        let mut dz = vec![0.0f32; self.out_c * 4 * plane];
        for o in 0..self.out_c {
            for ab in 0..4 {
                let (a, b) = (ab / 2, ab % 2);
                let dst = &mut dz[(o * 4 + ab) * plane..(o * 4 + ab + 1) * plane];
                for ni in 0..x.n {
                    for i in 0..x.h {
                        for j in 0..x.w {
                            let idx = ((o * x.n + ni) * dy.h + 2 * i + a) * dy.w + 2 * j + b;
                            dst[(ni * x.h + i) * x.w + j] = dy.data[idx];
                        }
                    }
                }
            }
        }
        if ps.is_trainable(self.weight) {
            let mut dw = std::mem::take(&mut ps.params[self.weight.0].grad);
            gemm(self.out_c * 4, plane, self.in_c, &dz, false, &x.data, true, &mut dw, 1.0);
            ps.params[self.weight.0].grad = dw;
        }
        if ps.is_trainable(self.bias) {
            let db = ps.grad_mut(self.bias);
            let oplane = dy.plane();
            for (o, d) in db.iter_mut().enumerate() {
                *d += dy.data[o * oplane..(o + 1) * oplane].iter().sum::<f32>();
            }
        }
        if !need_dx {
            return None;
        }
        let mut dx = Tensor::zeros_like(x);
        gemm(self.in_c, self.out_c * 4, plane, ps.value(self.weight), true, &dz, false, &mut dx.data, 0.0);
        Some(dx)
    }
}

pub fn relu_inplace(x: &mut Tensor) {
    x.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zeroes `dy` where the ReLU output `y` was not positive.
pub fn relu_backward(y: &[f32], dy: &mut [f32]) {
    for (g, &v) in dy.iter_mut().zip(y) {
        if v <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 3x3 stride-2 max pooling with padding 1. Returns argmax indices.
pub fn maxpool3s2(x: &Tensor) -> (Tensor, Vec<u32>) {
    let oh = conv_out(x.h, 3, 2, 1);
    let ow = conv_out(x.w, 3, 2, 1);
    let mut y = Tensor::zeros(x.c, x.n, oh, ow);
    let mut arg = vec![0u32; y.data.len()];
    for cn in 0..x.c * x.n {
        let src = &x.data[cn * x.h * x.w..(cn + 1) * x.h * x.w];
        for i in 0..oh {
            for j in 0..ow {
                let mut best = (f32::NEG_INFINITY, 0usize);
                for di in 0..3 {
                    let iy = (2 * i + di) as isize - 1;
                    if iy < 0 || iy >= x.h as isize {
                        continue;
                    }
                    for dj in 0..3 {
                        let ix = (2 * j + dj) as isize - 1;
                        if ix < 0 || ix >= x.w as isize {
                            continue;
                        }
                        let k = iy as usize * x.w + ix as usize;
                        if src[k] > best.0 {
                            best = (src[k], k);
                        }
                    }
                }
                let o = (cn * oh + i) * ow + j;
                y.data[o] = best.0;
                arg[o] = best.1 as u32;
            }
        }
    }
    (y, arg)
}

pub fn maxpool3s2_backward(in_shape: (usize, usize, usize, usize), arg: &[u32], dy: &Tensor) -> Tensor {
    let (c, n, h, w) = in_shape;
    let mut dx = Tensor::zeros(c, n, h, w);
    let out_plane = dy.h * dy.w;
    for cn in 0..c * n {
        for o in 0..out_plane {
            let i = cn * out_plane + o;
            dx.data[cn * h * w + arg[i] as usize] += dy.data[i];
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling cropped to `h x w`.
pub fn upsample2(x: &Tensor, h: usize, w: usize) -> Tensor {
    let mut y = Tensor::zeros(x.c, x.n, h, w);
    for cn in 0..x.c * x.n {
        for i in 0..h {
            for j in 0..w {
                y.data[(cn * h + i) * w + j] = x.data[(cn * x.h + i / 2) * x.w + j / 2];
            }
        }
    }
    y
}

pub fn upsample2_backward(dy: &Tensor, h: usize, w: usize) -> Tensor {
    let mut dx = Tensor::zeros(dy.c, dy.n, h, w);
    for cn in 0..dy.c * dy.n {
        for i in 0..dy.h {
            for j in 0..dy.w {
                dx.data[(cn * h + i / 2) * w + j / 2] += dy.data[(cn * dy.h + i) * dy.w + j];
            }
        }
    }
    dx
}

/// Keeps every second row and column (`ceil(h/2) x ceil(w/2)`).
pub fn subsample2(x: &Tensor) -> Tensor {
    let (oh, ow) = (x.h.div_ceil(2), x.w.div_ceil(2));
    let mut y = Tensor::zeros(x.c, x.n, oh, ow);
    for cn in 0..x.c * x.n {
        for i in 0..oh {
            for j in 0..ow {
                y.data[(cn * oh + i) * ow + j] = x.data[(cn * x.h + 2 * i) * x.w + 2 * j];
            }
        }
    }
    y
}

pub fn subsample2_backward(dy: &Tensor, h: usize, w: usize) -> Tensor {
    let mut dx = Tensor::zeros(dy.c, dy.n, h, w);
    for cn in 0..dy.c * dy.n {
        for i in 0..dy.h {
            for j in 0..dy.w {
                dx.data[(cn * h + 2 * i) * w + 2 * j] = dy.data[(cn * dy.h + i) * dy.w + j];
            }
        }
    }
    dx
}
