//! Minimal 3D neural network layers.
//!
//! Everything is generic over [`Scalar`] so the same layer code runs in f32
//! for training and in f64 for finite-difference gradient verification.
//! Layers are plain structs with explicit `forward`/`backward` methods and
//! internal caches; there is no autograd graph. Convolutions lower to GEMM
//! through blocked im2col so the working buffer stays bounded regardless of
//! volume size.

use num_traits::{Float, NumCast};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Element type of tensors: float math plus a GEMM kernel.
pub trait Scalar: Float + NumCast + Send + Sync + std::fmt::Debug + 'static {
    /// General matrix multiply, C = alpha * A * B + beta * C, with explicit
    /// row/column strides per operand (matrixmultiply convention).
    ///
    /// # Safety
    /// Pointers must cover every element addressed by the stride patterns.
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64(x: f64) -> Self {
        NumCast::from(x).expect("finite f64 converts")
    }

    fn to_f64(self) -> f64 {
        NumCast::from(self).expect("scalar converts to f64")
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<R> {
    pub data: Vec<R>,
    pub shape: Vec<usize>,
}

impl<R: Scalar> Tensor<R> {
    pub fn new(shape: Vec<usize>, data: Vec<R>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Tensor { data, shape }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            data: vec![R::zero(); n],
            shape,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Batch dimension.
    pub fn n(&self) -> usize {
        self.shape[0]
    }
}

/// A learnable parameter with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param<R> {
    pub data: Vec<R>,
    pub grad: Vec<R>,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

impl<R: Scalar> Param<R> {
    pub fn new(shape: Vec<usize>, data: Vec<R>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, data.len());
        Param {
            grad: vec![R::zero(); n],
            data,
            shape,
            trainable: true,
        }
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grad {
            *g = R::zero();
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Callback used to enumerate parameters in a stable, hierarchical order.
pub type ParamFn<'a, R> = dyn FnMut(String, &mut Param<R>) + 'a;

fn he_normal<R: Scalar>(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<R> {
    gaussian_init(rng, n, (2.0 / fan_in as f64).sqrt())
}

fn gaussian_init<R: Scalar>(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<R> {
    let normal = Normal::new(0.0f64, std).expect("positive std");
    (0..n).map(|_| R::from_f64(normal.sample(rng))).collect()
}

/// Output spatial size of a strided convolution/pool along one axis.
fn conv_out(n: usize, k: usize, stride: usize, padding: usize) -> usize {
    (n + 2 * padding - k) / stride + 1
}

/// Columns processed per im2col block, sized so the scratch buffer stays
/// small enough to live in cache-friendly memory even for wide layers.
const IM2COL_BLOCK_ELEMS: usize = 4_000_000;

/// 3D convolution without bias (normalization layers provide the shift).
#[derive(Debug, Clone)]
pub struct Conv3d<R> {
    pub weight: Param<R>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    cached_input: Option<Tensor<R>>,
}

impl<R: Scalar> Conv3d<R> {
    pub fn new(
        rng: &mut ChaCha8Rng,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel * kernel;
        let n = out_channels * fan_in;
        Conv3d {
            weight: Param::new(
                vec![out_channels, in_channels, kernel, kernel, kernel],
                he_normal(rng, n, fan_in),
            ),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            cached_input: None,
        }
    }

    pub fn out_shape(&self, input: &[usize]) -> Vec<usize> {
        vec![
            input[0],
            self.out_channels,
            conv_out(input[2], self.kernel, self.stride, self.padding),
            conv_out(input[3], self.kernel, self.stride, self.padding),
            conv_out(input[4], self.kernel, self.stride, self.padding),
        ]
    }

    /// Fill `cols` (rows = in_c*k^3, width = block columns) for output
    /// columns `[col0, col0+width)` of one sample.
    #[allow(clippy::too_many_arguments)]
    fn im2col_block(
        &self,
        x: &[R],
        spatial_in: [usize; 3],
        spatial_out: [usize; 3],
        col0: usize,
        width: usize,
        cols: &mut [R],
    ) {
        let k = self.kernel;
        let [id_n, ih_n, iw_n] = spatial_in;
        let [_, oh_n, ow_n] = spatial_out;
        let in_sp = id_n * ih_n * iw_n;
        // Per-column output coordinates, decoded once.
        let mut od = vec![0usize; width];
        let mut oh = vec![0usize; width];
        let mut ow = vec![0usize; width];
        for j in 0..width {
            let c = col0 + j;
            od[j] = c / (oh_n * ow_n);
            oh[j] = (c / ow_n) % oh_n;
            ow[j] = c % ow_n;
        }
        let mut row = 0usize;
        for c in 0..self.in_channels {
            let x_c = &x[c * in_sp..(c + 1) * in_sp];
            for kd in 0..k {
                for kh in 0..k {
                    for kw in 0..k {
                        let out_row = &mut cols[row * width..(row + 1) * width];
                        for j in 0..width {
                            let id = (od[j] * self.stride + kd) as isize - self.padding as isize;
                            let ih = (oh[j] * self.stride + kh) as isize - self.padding as isize;
                            let iw = (ow[j] * self.stride + kw) as isize - self.padding as isize;
                            out_row[j] = if id >= 0
                                && ih >= 0
                                && iw >= 0
                                && (id as usize) < id_n
                                && (ih as usize) < ih_n
                                && (iw as usize) < iw_n
                            {
                                x_c[(id as usize * ih_n + ih as usize) * iw_n + iw as usize]
                            } else {
                                R::zero()
                            };
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    /// Scatter-add a column-gradient block back onto the input gradient.
    #[allow(clippy::too_many_arguments)]
    fn col2im_block(
        &self,
        dcols: &[R],
        spatial_in: [usize; 3],
        spatial_out: [usize; 3],
        col0: usize,
        width: usize,
        dx: &mut [R],
    ) {
        let k = self.kernel;
        let [id_n, ih_n, iw_n] = spatial_in;
        let [_, oh_n, ow_n] = spatial_out;
        let in_sp = id_n * ih_n * iw_n;
        let mut row = 0usize;
        for c in 0..self.in_channels {
            let dx_c = &mut dx[c * in_sp..(c + 1) * in_sp];
            for kd in 0..k {
                for kh in 0..k {
                    for kw in 0..k {
                        let src = &dcols[row * width..(row + 1) * width];
                        for j in 0..width {
                            let col = col0 + j;
                            let od = col / (oh_n * ow_n);
                            let oh = (col / ow_n) % oh_n;
                            let ow = col % ow_n;
                            let id = (od * self.stride + kd) as isize - self.padding as isize;
                            let ih = (oh * self.stride + kh) as isize - self.padding as isize;
                            let iw = (ow * self.stride + kw) as isize - self.padding as isize;
                            if id >= 0
                                && ih >= 0
                                && iw >= 0
                                && (id as usize) < id_n
                                && (ih as usize) < ih_n
                                && (iw as usize) < iw_n
                            {
                                let idx =
                                    (id as usize * ih_n + ih as usize) * iw_n + iw as usize;
                                dx_c[idx] = dx_c[idx] + src[j];
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    pub fn forward(&mut self, x: &Tensor<R>) -> Tensor<R> {
        assert_eq!(x.shape.len(), 5);
        assert_eq!(x.shape[1], self.in_channels);
        let out_shape = self.out_shape(&x.shape);
        let (n, out_c) = (x.shape[0], self.out_channels);
        let spatial_in = [x.shape[2], x.shape[3], x.shape[4]];
        let spatial_out = [out_shape[2], out_shape[3], out_shape[4]];
        let out_sp: usize = spatial_out.iter().product();
        let in_sp: usize = spatial_in.iter().product();
        let rows = self.in_channels * self.kernel.pow(3);
        let block = (IM2COL_BLOCK_ELEMS / rows).clamp(1, out_sp.max(1));
        let mut cols = vec![R::zero(); rows * block];
        let mut y = Tensor::zeros(out_shape.clone());
        for s in 0..n {
            let x_s = &x.data[s * self.in_channels * in_sp..(s + 1) * self.in_channels * in_sp];
            let y_s: &mut [R] = &mut y.data[s * out_c * out_sp..(s + 1) * out_c * out_sp];
            let mut col0 = 0;
            while col0 < out_sp {
                let width = block.min(out_sp - col0);
                self.im2col_block(x_s, spatial_in, spatial_out, col0, width, &mut cols);
                // y[out_c, cols block] = W[out_c, rows] * cols[rows, width]
                unsafe {
                    R::gemm_raw(
                        out_c,
                        rows,
                        width,
                        R::one(),
                        self.weight.data.as_ptr(),
                        rows as isize,
                        1,
                        cols.as_ptr(),
                        width as isize,
                        1,
                        R::zero(),
                        y_s.as_mut_ptr().add(col0),
                        out_sp as isize,
                        1,
                    );
                }
                col0 += width;
            }
        }
        self.cached_input = Some(x.clone());
        y
    }

    /// Backpropagate. Weight gradients accumulate unless the weight is
    /// frozen; the input gradient is computed only when `need_dx` is set
    /// (the first layer of a network never needs it).
    pub fn backward(&mut self, dy: &Tensor<R>, need_dx: bool) -> Option<Tensor<R>> {
        let x = self
            .cached_input
            .take()
            .expect("conv backward without forward");
        let spatial_in = [x.shape[2], x.shape[3], x.shape[4]];
        let spatial_out = [dy.shape[2], dy.shape[3], dy.shape[4]];
        let out_sp: usize = spatial_out.iter().product();
        let in_sp: usize = spatial_in.iter().product();
        let (n, out_c) = (x.shape[0], self.out_channels);
        let rows = self.in_channels * self.kernel.pow(3);
        let block = (IM2COL_BLOCK_ELEMS / rows).clamp(1, out_sp.max(1));
        let mut cols = vec![R::zero(); rows * block];
        let need_dw = self.weight.trainable;
        let mut dx = if need_dx {
            Some(Tensor::zeros(x.shape.clone()))
        } else {
            None
        };
        for s in 0..n {
            let x_s = &x.data[s * self.in_channels * in_sp..(s + 1) * self.in_channels * in_sp];
            let dy_s = &dy.data[s * out_c * out_sp..(s + 1) * out_c * out_sp];
            let mut col0 = 0;
            while col0 < out_sp {
                let width = block.min(out_sp - col0);
                if need_dw {
                    self.im2col_block(x_s, spatial_in, spatial_out, col0, width, &mut cols);
                    // dW[out_c, rows] += dY[out_c, width] * cols^T[width, rows]
                    unsafe {
                        R::gemm_raw(
                            out_c,
                            width,
                            rows,
                            R::one(),
                            dy_s.as_ptr().add(col0),
                            out_sp as isize,
                            1,
                            cols.as_ptr(),
                            1,
                            width as isize,
                            R::one(),
                            self.weight.grad.as_mut_ptr(),
                            rows as isize,
                            1,
                        );
                    }
                }
                if let Some(dx) = dx.as_mut() {
                    // dcols[rows, width] = W^T[rows, out_c] * dY[out_c, width]
                    unsafe {
                        R::gemm_raw(
                            rows,
                            out_c,
                            width,
                            R::one(),
                            self.weight.data.as_ptr(),
                            1,
                            rows as isize,
                            dy_s.as_ptr().add(col0),
                            out_sp as isize,
                            1,
                            R::zero(),
                            cols.as_mut_ptr(),
                            width as isize,
                            1,
                        );
                    }
                    let dx_s = &mut dx.data
                        [s * self.in_channels * in_sp..(s + 1) * self.in_channels * in_sp];
                    self.col2im_block(&cols, spatial_in, spatial_out, col0, width, dx_s);
                }
                col0 += width;
            }
        }
        dx
    }

    pub fn for_each_param(&mut self, prefix: &str, f: &mut ParamFn<R>) {
        f(format!("{prefix}.weight"), &mut self.weight);
    }
}

/// Channel group count: the largest divisor of `channels` that is at most 8
/// while keeping at least 4 channels per group; 1 when nothing qualifies.
pub fn group_count(channels: usize) -> usize {
    (1..=8.min(channels))
        .rev()
        .find(|g| channels % g == 0 && channels / g >= 4)
        .unwrap_or(1)
}

/// Group normalization with affine parameters. Statistics are computed per
/// sample, so train and eval behave identically and frozen stages stay
/// honest (no running averages to go stale).
#[derive(Debug, Clone)]
pub struct GroupNorm<R> {
    pub gamma: Param<R>,
    pub beta: Param<R>,
    pub channels: usize,
    pub groups: usize,
    pub eps: f64,
    cache: Option<GnCache<R>>,
}

#[derive(Debug, Clone)]
struct GnCache<R> {
    x_hat: Vec<R>,
    inv_std: Vec<f64>,
    shape: Vec<usize>,
}

impl<R: Scalar> GroupNorm<R> {
    pub fn new(channels: usize) -> Self {
        GroupNorm {
            gamma: Param::new(vec![channels], vec![R::one(); channels]),
            beta: Param::new(vec![channels], vec![R::zero(); channels]),
            channels,
            groups: group_count(channels),
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<R>) -> Tensor<R> {
        assert_eq!(x.shape[1], self.channels);
        let n = x.shape[0];
        let sp: usize = x.shape[2..].iter().product();
        let cpg = self.channels / self.groups;
        let m = cpg * sp;
        let mut y = Tensor::zeros(x.shape.clone());
        let mut x_hat = vec![R::zero(); x.numel()];
        let mut inv_stds = Vec::with_capacity(n * self.groups);
        for s in 0..n {
            for g in 0..self.groups {
                let start = (s * self.channels + g * cpg) * sp;
                let slab = &x.data[start..start + m];
                let mut mean = 0.0;
                for &v in slab {
                    mean += v.to_f64();
                }
                mean /= m as f64;
                let mut var = 0.0;
                for &v in slab {
                    let d = v.to_f64() - mean;
                    var += d * d;
                }
                var /= m as f64;
                let inv_std = 1.0 / (var + self.eps).sqrt();
                inv_stds.push(inv_std);
                for (i, &v) in slab.iter().enumerate() {
                    let xh = R::from_f64((v.to_f64() - mean) * inv_std);
                    x_hat[start + i] = xh;
                    let c = g * cpg + i / sp;
                    y.data[start + i] = self.gamma.data[c] * xh + self.beta.data[c];
                }
            }
        }
        self.cache = Some(GnCache {
            x_hat,
            inv_std: inv_stds,
            shape: x.shape.clone(),
        });
        y
    }

    pub fn backward(&mut self, dy: &Tensor<R>) -> Tensor<R> {
        let cache = self.cache.take().expect("groupnorm backward without forward");
        let shape = cache.shape;
        let n = shape[0];
        let sp: usize = shape[2..].iter().product();
        let cpg = self.channels / self.groups;
        let m = cpg * sp;
        let mut dx = Tensor::zeros(shape.clone());
        for s in 0..n {
            for g in 0..self.groups {
                let start = (s * self.channels + g * cpg) * sp;
                let inv_std = cache.inv_std[s * self.groups + g];
                // dL/dx_hat, plus the two group means needed below.
                let mut sum_dxh = 0.0;
                let mut sum_dxh_xh = 0.0;
                for i in 0..m {
                    let c = g * cpg + i / sp;
                    let dxh = dy.data[start + i].to_f64() * self.gamma.data[c].to_f64();
                    let xh = cache.x_hat[start + i].to_f64();
                    sum_dxh += dxh;
                    sum_dxh_xh += dxh * xh;
                }
                let mean_dxh = sum_dxh / m as f64;
                let mean_dxh_xh = sum_dxh_xh / m as f64;
                for i in 0..m {
                    let c = g * cpg + i / sp;
                    let dxh = dy.data[start + i].to_f64() * self.gamma.data[c].to_f64();
                    let xh = cache.x_hat[start + i].to_f64();
                    dx.data[start + i] =
                        R::from_f64(inv_std * (dxh - mean_dxh - xh * mean_dxh_xh));
                }
            }
        }
        if self.gamma.trainable {
            for s in 0..n {
                for c in 0..self.channels {
                    let start = (s * self.channels + c) * sp;
                    let mut dgamma = R::zero();
                    let mut dbeta = R::zero();
                    for i in 0..sp {
                        dgamma = dgamma + dy.data[start + i] * cache.x_hat[start + i];
                        dbeta = dbeta + dy.data[start + i];
                    }
                    self.gamma.grad[c] = self.gamma.grad[c] + dgamma;
                    self.beta.grad[c] = self.beta.grad[c] + dbeta;
                }
            }
        }
        dx
    }

    pub fn for_each_param(&mut self, prefix: &str, f: &mut ParamFn<R>) {
        f(format!("{prefix}.gamma"), &mut self.gamma);
        f(format!("{prefix}.beta"), &mut self.beta);
    }
}

/// Elementwise max(x, 0); the cached output doubles as the backward mask.
#[derive(Debug, Clone, Default)]
pub struct Relu<R> {
    cached_output: Option<Tensor<R>>,
}

impl<R: Scalar> Relu<R> {
    pub fn new() -> Self {
        Relu { cached_output: None }
    }

    pub fn forward(&mut self, x: &Tensor<R>) -> Tensor<R> {
        let mut y = x.clone();
        for v in &mut y.data {
            if *v < R::zero() {
                *v = R::zero();
            }
        }
        self.cached_output = Some(y.clone());
        y
    }

    pub fn backward(&mut self, dy: &Tensor<R>) -> Tensor<R> {
        let y = self.cached_output.take().expect("relu backward without forward");
        let mut dx = dy.clone();
        for (d, &v) in dx.data.iter_mut().zip(&y.data) {
            if v <= R::zero() {
                *d = R::zero();
            }
        }
        dx
    }
}

/// Max pooling with argmax bookkeeping for the backward scatter.
#[derive(Debug, Clone)]
pub struct MaxPool3d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    argmax: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool3d {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        MaxPool3d {
            kernel,
            stride,
            padding,
            argmax: None,
        }
    }

    pub fn out_shape(&self, input: &[usize]) -> Vec<usize> {
        vec![
            input[0],
            input[1],
            conv_out(input[2], self.kernel, self.stride, self.padding),
            conv_out(input[3], self.kernel, self.stride, self.padding),
            conv_out(input[4], self.kernel, self.stride, self.padding),
        ]
    }

    pub fn forward<R: Scalar>(&mut self, x: &Tensor<R>) -> Tensor<R> {
        let out_shape = self.out_shape(&x.shape);
        let (n, c) = (x.shape[0], x.shape[1]);
        let [id_n, ih_n, iw_n] = [x.shape[2], x.shape[3], x.shape[4]];
        let [od_n, oh_n, ow_n] = [out_shape[2], out_shape[3], out_shape[4]];
        let in_sp = id_n * ih_n * iw_n;
        let out_sp = od_n * oh_n * ow_n;
        let mut y = Tensor::zeros(out_shape.clone());
        let mut argmax = vec![0usize; n * c * out_sp];
        for nc in 0..n * c {
            let x_nc = &x.data[nc * in_sp..(nc + 1) * in_sp];
            for od in 0..od_n {
                for oh in 0..oh_n {
                    for ow in 0..ow_n {
                        let mut best = R::neg_infinity();
                        let mut best_idx = 0usize;
                        for kd in 0..self.kernel {
                            let id = (od * self.stride + kd) as isize - self.padding as isize;
                            if id < 0 || id as usize >= id_n {
                                continue;
                            }
                            for kh in 0..self.kernel {
                                let ih =
                                    (oh * self.stride + kh) as isize - self.padding as isize;
                                if ih < 0 || ih as usize >= ih_n {
                                    continue;
                                }
                                for kw in 0..self.kernel {
                                    let iw = (ow * self.stride + kw) as isize
                                        - self.padding as isize;
                                    if iw < 0 || iw as usize >= iw_n {
                                        continue;
                                    }
                                    let idx = (id as usize * ih_n + ih as usize) * iw_n
                                        + iw as usize;
                                    if x_nc[idx] > best {
                                        best = x_nc[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                        }
                        let o = (od * oh_n + oh) * ow_n + ow;
                        y.data[nc * out_sp + o] = best;
                        argmax[nc * out_sp + o] = best_idx;
                    }
                }
            }
        }
        self.argmax = Some((argmax, x.shape.clone()));
        y
    }

    pub fn backward<R: Scalar>(&mut self, dy: &Tensor<R>) -> Tensor<R> {
        let (argmax, in_shape) = self.argmax.take().expect("pool backward without forward");
        let in_sp: usize = in_shape[2..].iter().product();
        let out_sp: usize = dy.shape[2..].iter().product();
        let mut dx = Tensor::zeros(in_shape);
        for nc in 0..dy.shape[0] * dy.shape[1] {
            for o in 0..out_sp {
                let src = nc * out_sp + o;
                let dst = nc * in_sp + argmax[src];
                dx.data[dst] = dx.data[dst] + dy.data[src];
            }
        }
        dx
    }
}

/// Non-overlapping average pooling (kernel == stride, no padding).
#[derive(Debug, Clone)]
pub struct AvgPool3d {
    pub kernel: usize,
    in_shape: Option<Vec<usize>>,
}

impl AvgPool3d {
    pub fn new(kernel: usize) -> Self {
        AvgPool3d {
            kernel,
            in_shape: None,
        }
    }

    pub fn out_shape(&self, input: &[usize]) -> Vec<usize> {
        vec![
            input[0],
            input[1],
            input[2] / self.kernel,
            input[3] / self.kernel,
            input[4] / self.kernel,
        ]
    }

    pub fn forward<R: Scalar>(&mut self, x: &Tensor<R>) -> Tensor<R> {
        let out_shape = self.out_shape(&x.shape);
        let k = self.kernel;
        let [id_n, ih_n, iw_n] = [x.shape[2], x.shape[3], x.shape[4]];
        let [od_n, oh_n, ow_n] = [out_shape[2], out_shape[3], out_shape[4]];
        let in_sp = id_n * ih_n * iw_n;
        let out_sp = od_n * oh_n * ow_n;
        let scale = R::from_f64(1.0 / (k * k * k) as f64);
        let mut y = Tensor::zeros(out_shape.clone());
        for nc in 0..x.shape[0] * x.shape[1] {
            let x_nc = &x.data[nc * in_sp..(nc + 1) * in_sp];
            for od in 0..od_n {
                for oh in 0..oh_n {
                    for ow in 0..ow_n {
                        let mut acc = R::zero();
                        for kd in 0..k {
                            for kh in 0..k {
                                for kw in 0..k {
                                    let idx = ((od * k + kd) * ih_n + oh * k + kh) * iw_n
                                        + ow * k
                                        + kw;
                                    acc = acc + x_nc[idx];
                                }
                            }
                        }
                        y.data[nc * out_sp + (od * oh_n + oh) * ow_n + ow] = acc * scale;
                    }
                }
            }
        }
        self.in_shape = Some(x.shape.clone());
        y
    }

    pub fn backward<R: Scalar>(&mut self, dy: &Tensor<R>) -> Tensor<R> {
        let in_shape = self.in_shape.take().expect("pool backward without forward");
        let k = self.kernel;
        let [id_n, ih_n, iw_n] = [in_shape[2], in_shape[3], in_shape[4]];
        let [od_n, oh_n, ow_n] = [dy.shape[2], dy.shape[3], dy.shape[4]];
        let in_sp = id_n * ih_n * iw_n;
        let out_sp = od_n * oh_n * ow_n;
        let scale = R::from_f64(1.0 / (k * k * k) as f64);
        let mut dx = Tensor::zeros(in_shape.clone());
        for nc in 0..dy.shape[0] * dy.shape[1] {
            for od in 0..od_n {
                for oh in 0..oh_n {
                    for ow in 0..ow_n {
                        let g = dy.data[nc * out_sp + (od * oh_n + oh) * ow_n + ow] * scale;
                        for kd in 0..k {
                            for kh in 0..k {
                                for kw in 0..k {
                                    let idx = nc * in_sp
                                        + ((od * k + kd) * ih_n + oh * k + kh) * iw_n
                                        + ow * k
                                        + kw;
                                    dx.data[idx] = dx.data[idx] + g;
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

/// Collapse [N, C, D, H, W] to [N, C] by averaging the spatial axes.
#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPool {
    in_shape: Option<Vec<usize>>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        GlobalAvgPool { in_shape: None }
    }

    pub fn forward<R: Scalar>(&mut self, x: &Tensor<R>) -> Tensor<R> {
        let (n, c) = (x.shape[0], x.shape[1]);
        let sp: usize = x.shape[2..].iter().product();
        let scale = R::from_f64(1.0 / sp as f64);
        let mut y = Tensor::zeros(vec![n, c]);
        for nc in 0..n * c {
            let mut acc = R::zero();
            for &v in &x.data[nc * sp..(nc + 1) * sp] {
                acc = acc + v;
            }
            y.data[nc] = acc * scale;
        }
        self.in_shape = Some(x.shape.clone());
        y
    }

    pub fn backward<R: Scalar>(&mut self, dy: &Tensor<R>) -> Tensor<R> {
        let in_shape = self.in_shape.take().expect("pool backward without forward");
        let sp: usize = in_shape[2..].iter().product();
        let scale = R::from_f64(1.0 / sp as f64);
        let mut dx = Tensor::zeros(in_shape);
        let nc_total = dy.shape[0] * dy.shape[1];
        for nc in 0..nc_total {
            let g = dy.data[nc] * scale;
            for v in &mut dx.data[nc * sp..(nc + 1) * sp] {
                *v = g;
            }
        }
        dx
    }
}

/// Fully connected layer, y = x W^T + b.
#[derive(Debug, Clone)]
pub struct Linear<R> {
    pub weight: Param<R>,
    pub bias: Param<R>,
    pub in_features: usize,
    pub out_features: usize,
    cached_input: Option<Tensor<R>>,
}

impl<R: Scalar> Linear<R> {
    pub fn new(rng: &mut ChaCha8Rng, in_features: usize, out_features: usize) -> Self {
        Self::with_init_std(rng, in_features, out_features, (2.0 / in_features as f64).sqrt())
    }

    /// Custom weight scale for output heads that want small initial logits.
    pub fn with_init_std(
        rng: &mut ChaCha8Rng,
        in_features: usize,
        out_features: usize,
        std: f64,
    ) -> Self {
        Linear {
            weight: Param::new(
                vec![out_features, in_features],
                gaussian_init(rng, out_features * in_features, std),
            ),
            bias: Param::new(vec![out_features], vec![R::zero(); out_features]),
            in_features,
            out_features,
            cached_input: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<R>) -> Tensor<R> {
        assert_eq!(x.shape.len(), 2);
        assert_eq!(x.shape[1], self.in_features);
        let n = x.shape[0];
        let mut y = Tensor::zeros(vec![n, self.out_features]);
        for s in 0..n {
            let row = &mut y.data[s * self.out_features..(s + 1) * self.out_features];
            row.copy_from_slice(&self.bias.data);
        }
        // y[n, out] += x[n, in] * W^T (W stored [out, in] row-major).
        unsafe {
            R::gemm_raw(
                n,
                self.in_features,
                self.out_features,
                R::one(),
                x.data.as_ptr(),
                self.in_features as isize,
                1,
                self.weight.data.as_ptr(),
                1,
                self.in_features as isize,
                R::one(),
                y.data.as_mut_ptr(),
                self.out_features as isize,
                1,
            );
        }
        self.cached_input = Some(x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Tensor<R>, need_dx: bool) -> Option<Tensor<R>> {
        let x = self
            .cached_input
            .take()
            .expect("linear backward without forward");
        let n = x.shape[0];
        if self.weight.trainable {
            // dW[out, in] += dY^T[out, n] * X[n, in]
            unsafe {
                R::gemm_raw(
                    self.out_features,
                    n,
                    self.in_features,
                    R::one(),
                    dy.data.as_ptr(),
                    1,
                    self.out_features as isize,
                    x.data.as_ptr(),
                    self.in_features as isize,
                    1,
                    R::one(),
                    self.weight.grad.as_mut_ptr(),
                    self.in_features as isize,
                    1,
                );
            }
            for s in 0..n {
                for o in 0..self.out_features {
                    self.bias.grad[o] = self.bias.grad[o] + dy.data[s * self.out_features + o];
                }
            }
        }
        if need_dx {
            let mut dx = Tensor::zeros(x.shape.clone());
            // dX[n, in] = dY[n, out] * W[out, in]
            unsafe {
                R::gemm_raw(
                    n,
                    self.out_features,
                    self.in_features,
                    R::one(),
                    dy.data.as_ptr(),
                    self.out_features as isize,
                    1,
                    self.weight.data.as_ptr(),
                    self.in_features as isize,
                    1,
                    R::zero(),
                    dx.data.as_mut_ptr(),
                    self.in_features as isize,
                    1,
                );
            }
            Some(dx)
        } else {
            None
        }
    }

    pub fn for_each_param(&mut self, prefix: &str, f: &mut ParamFn<R>) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

/// Inverted dropout: scales surviving activations by 1/(1-p) at train time
/// and is the identity at eval time.
#[derive(Debug, Clone)]
pub struct Dropout {
    pub p: f64,
    mask: Option<Vec<bool>>,
}

impl Dropout {
    pub fn new(p: f64) -> Self {
        assert!((0.0..1.0).contains(&p), "dropout rate must be in [0, 1)");
        Dropout { p, mask: None }
    }

    pub fn forward<R: Scalar>(
        &mut self,
        x: &Tensor<R>,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Tensor<R> {
        if !train || self.p == 0.0 {
            self.mask = None;
            return x.clone();
        }
        let keep = 1.0 - self.p;
        let scale = R::from_f64(1.0 / keep);
        let mut y = x.clone();
        let mask: Vec<bool> = (0..x.numel()).map(|_| rng.random::<f64>() < keep).collect();
        for (v, &m) in y.data.iter_mut().zip(&mask) {
            *v = if m { *v * scale } else { R::zero() };
        }
        self.mask = Some(mask);
        y
    }

    pub fn backward<R: Scalar>(&mut self, dy: &Tensor<R>) -> Tensor<R> {
        match self.mask.take() {
            None => dy.clone(),
            Some(mask) => {
                let scale = R::from_f64(1.0 / (1.0 - self.p));
                let mut dx = dy.clone();
                for (v, m) in dx.data.iter_mut().zip(mask) {
                    *v = if m { *v * scale } else { R::zero() };
                }
                dx
            }
        }
    }
}
