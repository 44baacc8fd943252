//! Minimal dense/convolutional network kernels with hand-written backward
//! passes over a flat parameter vector.
//!
//! Layers hold only offsets into the parameter vector; the vector itself is
//! owned by the model. That keeps the optimizer, checkpointing, gradient
//! reduction and finite-difference checks simple flat-array operations.

use ndarray::{linalg::general_mat_mul, Array2, Array3, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// How a tensor is initialized when a fresh parameter vector is drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zero,
    /// He-style normal with the given fan-in.
    HeNormal { fan_in: usize },
    /// He-style normal scaled down; residual branches start small so deep
    /// stacks begin near identity without sitting exactly on relu kinks.
    HeNormalScaled { fan_in: usize, scale_milli: usize },
}

#[derive(Debug, Clone)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
    pub init: Init,
}

/// Reference to a tensor inside the flat parameter vector.
#[derive(Debug, Clone, Copy)]
pub struct TensorRef {
    pub offset: usize,
    pub len: usize,
}

/// Assigns offsets while the network is being built.
#[derive(Debug, Default)]
pub struct LayoutBuilder {
    specs: Vec<TensorSpec>,
    total: usize,
}

impl LayoutBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tensor(&mut self, name: String, shape: &[usize], init: Init) -> TensorRef {
        let len: usize = shape.iter().product();
        let r = TensorRef { offset: self.total, len };
        self.specs.push(TensorSpec {
            name,
            shape: shape.to_vec(),
            offset: self.total,
            len,
            init,
        });
        self.total += len;
        r
    }

    pub fn finish(self) -> ParamLayout {
        ParamLayout { specs: self.specs, total: self.total }
    }
}

/// Immutable description of every named tensor in a model.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    specs: Vec<TensorSpec>,
    total: usize,
}

impl ParamLayout {
    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    /// Draw a fresh deterministic parameter vector.
    pub fn init_params(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut out = vec![0.0; self.total];
        for spec in &self.specs {
            match spec.init {
                Init::Zero => {}
                Init::HeNormal { fan_in } => {
                    let std = (2.0 / fan_in as f64).sqrt();
                    for v in &mut out[spec.offset..spec.offset + spec.len] {
                        let n: f64 = StandardNormal.sample(rng);
                        *v = std * n;
                    }
                }
                Init::HeNormalScaled { fan_in, scale_milli } => {
                    let std = (2.0 / fan_in as f64).sqrt() * scale_milli as f64 / 1000.0;
                    for v in &mut out[spec.offset..spec.offset + spec.len] {
                        let n: f64 = StandardNormal.sample(rng);
                        *v = std * n;
                    }
                }
            }
        }
        out
    }
}

fn view2(buf: &[f64], r: TensorRef, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((rows, cols), &buf[r.offset..r.offset + r.len]).expect("layout shape")
}

fn view2_mut(buf: &mut [f64], r: TensorRef, rows: usize, cols: usize) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((rows, cols), &mut buf[r.offset..r.offset + r.len])
        .expect("layout shape")
}

/// 1-D convolution with "same" padding and dilation, non-causal. For an even
/// total pad the extra sample goes to the right.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub w: TensorRef,
    pub b: TensorRef,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub dilation: usize,
}

impl Conv1d {
    pub fn new(
        lb: &mut LayoutBuilder,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        dilation: usize,
    ) -> Self {
        let w = lb.tensor(
            format!("{name}.weight"),
            &[c_out, c_in, k],
            Init::HeNormal { fan_in: c_in * k },
        );
        let b = lb.tensor(format!("{name}.bias"), &[c_out], Init::Zero);
        Conv1d { w, b, c_in, c_out, k, dilation }
    }

    pub fn new_scaled_init(
        lb: &mut LayoutBuilder,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        dilation: usize,
    ) -> Self {
        let w = lb.tensor(
            format!("{name}.weight"),
            &[c_out, c_in, k],
            Init::HeNormalScaled { fan_in: c_in * k, scale_milli: 50 },
        );
        let b = lb.tensor(format!("{name}.bias"), &[c_out], Init::Zero);
        Conv1d { w, b, c_in, c_out, k, dilation }
    }

    fn pad_left(&self) -> usize {
        (self.k - 1) * self.dilation / 2
    }

    fn im2col_into(
        &self,
        x: &Array3<f64>,
        window: usize,
        cols: &mut ndarray::ArrayViewMut2<f64>,
    ) {
        let l = x.shape()[2];
        let pad_left = self.pad_left() as isize;
        for ci in 0..self.c_in {
            for j in 0..self.k {
                let row = ci * self.k + j;
                let shift = (j * self.dilation) as isize - pad_left;
                for t in 0..l {
                    let src = t as isize + shift;
                    cols[[row, t]] = if src >= 0 && (src as usize) < l {
                        x[[window, ci, src as usize]]
                    } else {
                        0.0
                    };
                }
            }
        }
    }

    /// Output has the same temporal length as the input. The whole batch is
    /// lowered to one column matrix so a single GEMM covers every window.
    pub fn forward(&self, params: &[f64], x: &Array3<f64>) -> Array3<f64> {
        let (batch, _, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        debug_assert_eq!(x.shape()[1], self.c_in);
        let w = view2(params, self.w, self.c_out, self.c_in * self.k);
        let bias = &params[self.b.offset..self.b.offset + self.b.len];
        let mut cols = Array2::<f64>::zeros((self.c_in * self.k, batch * l));
        for b in 0..batch {
            let mut block = cols.slice_mut(ndarray::s![.., b * l..(b + 1) * l]);
            self.im2col_into(x, b, &mut block);
        }
        let mut flat = Array2::<f64>::zeros((self.c_out, batch * l));
        general_mat_mul(1.0, &w, &cols.view(), 0.0, &mut flat);
        let mut y = Array3::<f64>::zeros((batch, self.c_out, l));
        for b in 0..batch {
            let mut yb = y.index_axis_mut(Axis(0), b);
            yb.assign(&flat.slice(ndarray::s![.., b * l..(b + 1) * l]));
            for (c, row) in yb.outer_iter_mut().enumerate() {
                let add = bias[c];
                for v in row {
                    *v += add;
                }
            }
        }
        debug_assert_eq!(y.shape()[2], l, "same padding must preserve length");
        y
    }

    /// Accumulates dW/db into `grads` and returns dL/dx.
    pub fn backward(
        &self,
        params: &[f64],
        x: &Array3<f64>,
        dy: &Array3<f64>,
        grads: &mut [f64],
    ) -> Array3<f64> {
        let (batch, l) = (x.shape()[0], x.shape()[2]);
        let w = view2(params, self.w, self.c_out, self.c_in * self.k);
        let mut cols = Array2::<f64>::zeros((self.c_in * self.k, batch * l));
        let mut dy_flat = Array2::<f64>::zeros((self.c_out, batch * l));
        for b in 0..batch {
            let mut block = cols.slice_mut(ndarray::s![.., b * l..(b + 1) * l]);
            self.im2col_into(x, b, &mut block);
            dy_flat
                .slice_mut(ndarray::s![.., b * l..(b + 1) * l])
                .assign(&dy.index_axis(Axis(0), b));
        }
        {
            let mut dw = view2_mut(grads, self.w, self.c_out, self.c_in * self.k);
            general_mat_mul(1.0, &dy_flat, &cols.t(), 1.0, &mut dw);
        }
        {
            let db = &mut grads[self.b.offset..self.b.offset + self.b.len];
            for (c, row) in dy_flat.outer_iter().enumerate() {
                db[c] += row.sum();
            }
        }
        let mut dcols = Array2::<f64>::zeros((self.c_in * self.k, batch * l));
        general_mat_mul(1.0, &w.t(), &dy_flat, 0.0, &mut dcols);
        let mut dx = Array3::<f64>::zeros(x.raw_dim());
        let pad_left = self.pad_left() as isize;
        for b in 0..batch {
            let mut dxb = dx.index_axis_mut(Axis(0), b);
            for ci in 0..self.c_in {
                for j in 0..self.k {
                    let row = ci * self.k + j;
                    let shift = (j * self.dilation) as isize - pad_left;
                    for t in 0..l {
                        let src = t as isize + shift;
                        if src >= 0 && (src as usize) < l {
                            dxb[[ci, src as usize]] += dcols[[row, b * l + t]];
                        }
                    }
                }
            }
        }
        dx
    }
}

/// Fully connected layer. Weight shape `(out, in)`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: TensorRef,
    pub b: TensorRef,
    pub n_in: usize,
    pub n_out: usize,
}

impl Dense {
    pub fn new(lb: &mut LayoutBuilder, name: &str, n_in: usize, n_out: usize) -> Self {
        let w = lb.tensor(
            format!("{name}.weight"),
            &[n_out, n_in],
            Init::HeNormal { fan_in: n_in },
        );
        let b = lb.tensor(format!("{name}.bias"), &[n_out], Init::Zero);
        Dense { w, b, n_in, n_out }
    }

    pub fn forward(&self, params: &[f64], x: &Array2<f64>) -> Array2<f64> {
        let batch = x.shape()[0];
        let w = view2(params, self.w, self.n_out, self.n_in);
        let bias = &params[self.b.offset..self.b.offset + self.b.len];
        let mut y = Array2::<f64>::zeros((batch, self.n_out));
        general_mat_mul(1.0, x, &w.t(), 0.0, &mut y);
        for mut row in y.outer_iter_mut() {
            for (v, add) in row.iter_mut().zip(bias) {
                *v += add;
            }
        }
        y
    }

    pub fn backward(
        &self,
        params: &[f64],
        x: &Array2<f64>,
        dy: &Array2<f64>,
        grads: &mut [f64],
    ) -> Array2<f64> {
        let w = view2(params, self.w, self.n_out, self.n_in);
        {
            let mut dw = view2_mut(grads, self.w, self.n_out, self.n_in);
            general_mat_mul(1.0, &dy.t(), x, 1.0, &mut dw);
        }
        {
            let db = &mut grads[self.b.offset..self.b.offset + self.b.len];
            for row in dy.outer_iter() {
                for (g, v) in db.iter_mut().zip(row) {
                    *g += v;
                }
            }
        }
        let mut dx = Array2::<f64>::zeros((x.shape()[0], self.n_in));
        general_mat_mul(1.0, dy, &w, 0.0, &mut dx);
        dx
    }
}

pub fn relu3(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(|v| v.max(0.0))
}

pub fn relu2(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

/// In-place `dy *= (activated > 0)`, using the post-activation values.
pub fn relu3_backward(dy: &mut Array3<f64>, activated: &Array3<f64>) {
    ndarray::Zip::from(dy).and(activated).for_each(|d, &a| {
        if a <= 0.0 {
            *d = 0.0;
        }
    });
}

pub fn relu2_backward(dy: &mut Array2<f64>, activated: &Array2<f64>) {
    ndarray::Zip::from(dy).and(activated).for_each(|d, &a| {
        if a <= 0.0 {
            *d = 0.0;
        }
    });
}

/// Max pooling with width and stride 2. Returns pooled values and the argmax
/// offsets (0 or 1; ties pick the left element) for the backward pass.
pub fn maxpool2(x: &Array3<f64>) -> (Array3<f64>, Array3<u8>) {
    let (b, c, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    assert!(l % 2 == 0, "maxpool2 needs an even length, got {l}");
    let half = l / 2;
    let mut y = Array3::<f64>::zeros((b, c, half));
    let mut idx = Array3::<u8>::zeros((b, c, half));
    for bi in 0..b {
        for ci in 0..c {
            for t in 0..half {
                let x0 = x[[bi, ci, 2 * t]];
                let x1 = x[[bi, ci, 2 * t + 1]];
                if x1 > x0 {
                    y[[bi, ci, t]] = x1;
                    idx[[bi, ci, t]] = 1;
                } else {
                    y[[bi, ci, t]] = x0;
                }
            }
        }
    }
    (y, idx)
}

pub fn maxpool2_backward(dy: &Array3<f64>, idx: &Array3<u8>) -> Array3<f64> {
    let (b, c, half) = (dy.shape()[0], dy.shape()[1], dy.shape()[2]);
    let mut dx = Array3::<f64>::zeros((b, c, half * 2));
    for bi in 0..b {
        for ci in 0..c {
            for t in 0..half {
                dx[[bi, ci, 2 * t + idx[[bi, ci, t]] as usize]] = dy[[bi, ci, t]];
            }
        }
    }
    dx
}

/// Nearest-neighbor upsampling by a factor of 2.
pub fn upsample2(x: &Array3<f64>) -> Array3<f64> {
    let (b, c, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut y = Array3::<f64>::zeros((b, c, 2 * l));
    for bi in 0..b {
        for ci in 0..c {
            for t in 0..l {
                let v = x[[bi, ci, t]];
                y[[bi, ci, 2 * t]] = v;
                y[[bi, ci, 2 * t + 1]] = v;
            }
        }
    }
    y
}

pub fn upsample2_backward(dy: &Array3<f64>) -> Array3<f64> {
    let (b, c, l2) = (dy.shape()[0], dy.shape()[1], dy.shape()[2]);
    let l = l2 / 2;
    let mut dx = Array3::<f64>::zeros((b, c, l));
    for bi in 0..b {
        for ci in 0..c {
            for t in 0..l {
                dx[[bi, ci, t]] = dy[[bi, ci, 2 * t]] + dy[[bi, ci, 2 * t + 1]];
            }
        }
    }
    dx
}

/// Two dilated same-padding convolutions with a skip connection; a width-1
/// convolution aligns channels when they differ.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub conv1: Conv1d,
    pub conv2: Conv1d,
    pub skip: Option<Conv1d>,
}

#[derive(Debug)]
pub struct BlockCache {
    pub x: Array3<f64>,
    pub h: Array3<f64>,
    pub y: Array3<f64>,
}

impl ResidualBlock {
    pub fn new(
        lb: &mut LayoutBuilder,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        dilation: usize,
    ) -> Self {
        let conv1 = Conv1d::new(lb, &format!("{name}.conv1"), c_in, c_out, k, dilation);
        // the second convolution starts small so a fresh block stays close
        // to its skip path and deep stacks begin well-scaled
        let conv2 = Conv1d::new_scaled_init(lb, &format!("{name}.conv2"), c_out, c_out, k, dilation);
        let skip = if c_in != c_out {
            Some(Conv1d::new(lb, &format!("{name}.skip"), c_in, c_out, 1, 1))
        } else {
            None
        };
        ResidualBlock { conv1, conv2, skip }
    }

    pub fn forward(&self, params: &[f64], x: Array3<f64>) -> (Array3<f64>, BlockCache) {
        let l_in = x.shape()[2];
        let h = relu3(&self.conv1.forward(params, &x));
        let mut z = self.conv2.forward(params, &h);
        match &self.skip {
            Some(conv) => z += &conv.forward(params, &x),
            None => z += &x,
        }
        let y = relu3(&z);
        debug_assert_eq!(y.shape()[2], l_in, "residual block must preserve length");
        let cache = BlockCache { x, h, y: y.clone() };
        (y, cache)
    }

    pub fn backward(
        &self,
        params: &[f64],
        cache: &BlockCache,
        mut dy: Array3<f64>,
        grads: &mut [f64],
    ) -> Array3<f64> {
        relu3_backward(&mut dy, &cache.y);
        let mut dh = self.conv2.backward(params, &cache.h, &dy, grads);
        relu3_backward(&mut dh, &cache.h);
        let mut dx = self.conv1.backward(params, &cache.x, &dh, grads);
        match &self.skip {
            Some(conv) => dx += &conv.backward(params, &cache.x, &dy, grads),
            None => dx += &dy,
        }
        dx
    }
}

/// Adam optimizer over a flat parameter vector.
#[derive(Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    /// Moment decays 0.9/0.99: the short second-moment memory recovers
    /// quickly from the rare huge gradients that heavy-tailed signals
    /// (sparse spikes) produce.
    pub fn new(lr: f64, n_params: usize) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// Draw a standard-normal matrix (used for reparameterization noise).
pub fn standard_normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
}

/// Uniformly shuffled index permutation (Fisher-Yates).
pub fn shuffled_indices(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, StreamDomain};

    fn fd_check<F: FnMut(&[f64]) -> f64>(
        params: &mut Vec<f64>,
        analytic: &[f64],
        mut f: F,
        indices: &[usize],
        tol: f64,
    ) {
        for &i in indices {
            let h = 1e-5 * params[i].abs().max(1.0);
            let orig = params[i];
            params[i] = orig + h;
            let fp = f(params);
            params[i] = orig - h;
            let fm = f(params);
            params[i] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let a = analytic[i];
            let denom = fd.abs().max(a.abs());
            if denom > 1e-7 {
                let rel = (fd - a).abs() / denom;
                assert!(rel < tol, "param {i}: analytic {a}, fd {fd}, rel {rel}");
            } else {
                assert!((fd - a).abs() < 1e-7, "param {i}: analytic {a}, fd {fd}");
            }
        }
    }

    #[test]
    fn conv_same_padding_preserves_length() {
        for (k, d) in [(1usize, 1usize), (2, 1), (3, 2), (8, 4), (5, 3)] {
            let mut lb = LayoutBuilder::new();
            let conv = Conv1d::new(&mut lb, "c", 2, 3, k, d);
            let layout = lb.finish();
            let mut rng = substream(1, StreamDomain::ModelInit, 0);
            let params = layout.init_params(&mut rng);
            let x = Array3::<f64>::from_shape_fn((2, 2, 16), |(a, b, c)| {
                (a + 2 * b + 3 * c) as f64 * 0.1
            });
            let y = conv.forward(&params, &x);
            assert_eq!(y.shape(), &[2, 3, 16]);
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut lb = LayoutBuilder::new();
        let conv = Conv1d::new(&mut lb, "conv", 2, 3, 4, 2);
        let layout = lb.finish();
        let mut rng = substream(3, StreamDomain::ModelInit, 0);
        let mut params = layout.init_params(&mut rng);
        let x = Array3::<f64>::from_shape_fn((2, 2, 10), |(a, b, c)| {
            ((a * 7 + b * 3 + c) as f64 * 0.37).sin()
        });
        // loss = 0.5 * sum(y^2)
        let loss = |p: &[f64]| -> f64 {
            let y = conv.forward(p, &x);
            0.5 * y.iter().map(|v| v * v).sum::<f64>()
        };
        let y = conv.forward(&params, &x);
        let mut grads = vec![0.0; layout.len()];
        let _ = conv.backward(&params, &x, &y, &mut grads);
        let indices: Vec<usize> = (0..layout.len()).collect();
        fd_check(&mut params, &grads, loss, &indices, 1e-6);
    }

    #[test]
    fn conv_input_gradient_matches_finite_differences() {
        let mut lb = LayoutBuilder::new();
        let conv = Conv1d::new(&mut lb, "conv", 2, 2, 3, 2);
        let layout = lb.finish();
        let mut rng = substream(4, StreamDomain::ModelInit, 0);
        let params = layout.init_params(&mut rng);
        let x0 = Array3::<f64>::from_shape_fn((1, 2, 9), |(_, b, c)| ((b + c) as f64 * 0.31).cos());
        let loss_of_x = |x: &Array3<f64>| -> f64 {
            let y = conv.forward(&params, x);
            0.5 * y.iter().map(|v| v * v).sum::<f64>()
        };
        let y = conv.forward(&params, &x0);
        let mut grads = vec![0.0; layout.len()];
        let dx = conv.backward(&params, &x0, &y, &mut grads);
        let mut x = x0.clone();
        for idx in 0..x.len() {
            let flat = x.as_slice_mut().unwrap();
            let orig = flat[idx];
            let h = 1e-6;
            flat[idx] = orig + h;
            let fp = loss_of_x(&x);
            x.as_slice_mut().unwrap()[idx] = orig - h;
            let fm = loss_of_x(&x);
            x.as_slice_mut().unwrap()[idx] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let a = dx.as_slice().unwrap()[idx];
            assert!(
                (fd - a).abs() / fd.abs().max(a.abs()).max(1e-8) < 1e-5,
                "dx[{idx}]: {a} vs fd {fd}"
            );
        }
    }

    #[test]
    fn residual_block_gradients_match_finite_differences() {
        let mut lb = LayoutBuilder::new();
        let block = ResidualBlock::new(&mut lb, "blk", 2, 3, 3, 2);
        let layout = lb.finish();
        let mut rng = substream(5, StreamDomain::ModelInit, 0);
        let mut params = layout.init_params(&mut rng);
        let x = Array3::<f64>::from_shape_fn((2, 2, 8), |(a, b, c)| {
            ((a * 5 + b * 2 + c) as f64 * 0.63).sin() + 0.11
        });
        let loss = |p: &[f64]| -> f64 {
            let (y, _) = block.forward(p, x.clone());
            0.5 * y.iter().map(|v| v * v).sum::<f64>()
        };
        let (y, cache) = block.forward(&params, x.clone());
        let mut grads = vec![0.0; layout.len()];
        let _ = block.backward(&params, &cache, y, &mut grads);
        let indices: Vec<usize> = (0..layout.len()).collect();
        fd_check(&mut params, &grads, loss, &indices, 1e-5);
    }

    #[test]
    fn pool_and_upsample_roundtrip_shapes() {
        let x = Array3::<f64>::from_shape_fn((1, 2, 8), |(_, b, c)| (b * 8 + c) as f64);
        let (y, idx) = maxpool2(&x);
        assert_eq!(y.shape(), &[1, 2, 4]);
        let dx = maxpool2_backward(&y, &idx);
        assert_eq!(dx.shape(), &[1, 2, 8]);
        // gradient routes to the argmax position
        assert_eq!(dx[[0, 0, 1]], y[[0, 0, 0]]);
        assert_eq!(dx[[0, 0, 0]], 0.0);

        let up = upsample2(&y);
        assert_eq!(up.shape(), &[1, 2, 8]);
        let down = upsample2_backward(&up);
        for ((b, c, t), v) in down.indexed_iter() {
            assert_eq!(*v, 2.0 * y[[b, c, t]]);
        }
    }

    #[test]
    fn dense_gradients_match_finite_differences() {
        let mut lb = LayoutBuilder::new();
        let dense = Dense::new(&mut lb, "fc", 5, 3);
        let layout = lb.finish();
        let mut rng = substream(6, StreamDomain::ModelInit, 0);
        let mut params = layout.init_params(&mut rng);
        let x = Array2::<f64>::from_shape_fn((4, 5), |(a, b)| ((a + b) as f64 * 0.7).sin());
        let loss = |p: &[f64]| -> f64 {
            let y = dense.forward(p, &x);
            0.5 * y.iter().map(|v| v * v).sum::<f64>()
        };
        let y = dense.forward(&params, &x);
        let mut grads = vec![0.0; layout.len()];
        let _ = dense.backward(&params, &x, &y, &mut grads);
        let indices: Vec<usize> = (0..layout.len()).collect();
        fd_check(&mut params, &grads, loss, &indices, 1e-6);
    }

    #[test]
    fn adam_decreases_quadratic() {
        let mut params = vec![5.0, -3.0, 2.0];
        let mut adam = Adam::new(0.1, 3);
        for _ in 0..500 {
            let grads: Vec<f64> = params.iter().map(|p| 2.0 * p).collect();
            adam.step(&mut params, &grads);
        }
        for p in params {
            assert!(p.abs() < 1e-2);
        }
    }

    #[test]
    fn shuffle_is_permutation() {
        let mut rng = substream(9, StreamDomain::Shuffle, 0);
        let idx = shuffled_indices(&mut rng, 100);
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
    }
}
