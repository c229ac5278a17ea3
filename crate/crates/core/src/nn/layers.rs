use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{join, shape_err, Layer, NnError, Param, Scalar, Slot, Tensor};
use crate::parallel;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Output extent of a sliding window, floor semantics.
fn out_extent(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize, NnError> {
    if stride == 0 {
        return Err(shape_err("stride must be positive"));
    }
    let padded = input + 2 * pad;
    if padded < k {
        return Err(shape_err(format!("kernel {k} larger than padded input {padded}")));
    }
    Ok((padded - k) / stride + 1)
}

#[derive(Debug, Clone, Copy)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output columns `[lo, hi)` whose input column for kernel offset `kj`
    /// lies inside the image.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let lo = if kj >= self.pad {
            0
        } else {
            (self.pad - kj).div_ceil(self.stride)
        };
        let hi = if self.w + self.pad > kj {
            ((self.w - 1 + self.pad - kj) / self.stride + 1).min(self.wo)
        } else {
            0
        };
        let lo = lo.min(self.wo);
        (lo, hi.max(lo))
    }

    /// Input row for output row `oi` and kernel row `ki`, if inside the image.
    fn in_row(&self, oi: usize, ki: usize) -> Option<usize> {
        let r = oi * self.stride + ki;
        (r >= self.pad && r - self.pad < self.h).then(|| r - self.pad)
    }
}

fn im2col<T: Scalar>(x: &[T], g: &Geom, cols: &mut [T]) {
    let npos = g.positions();
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (ci * g.kh + ki) * g.kw + kj;
                let row = &mut cols[r * npos..(r + 1) * npos];
                let (lo, hi) = g.valid_cols(kj);
                for oi in 0..g.ho {
                    let dst = &mut row[oi * g.wo..(oi + 1) * g.wo];
                    let Some(ii) = g.in_row(oi, ki) else {
                        dst.fill(T::zero());
                        continue;
                    };
                    let src = &plane[ii * g.w..(ii + 1) * g.w];
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    if g.stride == 1 {
                        dst[lo..hi].copy_from_slice(&src[lo + kj - g.pad..hi + kj - g.pad]);
                    } else {
                        for (oj, d) in dst.iter_mut().enumerate().take(hi).skip(lo) {
                            *d = src[oj * g.stride + kj - g.pad];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &Geom, x: &mut [T]) {
    let npos = g.positions();
    for ci in 0..g.c {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (ci * g.kh + ki) * g.kw + kj;
                let row = &cols[r * npos..(r + 1) * npos];
                let (lo, hi) = g.valid_cols(kj);
                for oi in 0..g.ho {
                    let Some(ii) = g.in_row(oi, ki) else { continue };
                    let src = &row[oi * g.wo..(oi + 1) * g.wo];
                    let dst = &mut plane[ii * g.w..(ii + 1) * g.w];
                    for oj in lo..hi {
                        dst[oj * g.stride + kj - g.pad] += src[oj];
                    }
                }
            }
        }
    }
}

fn conv_geom<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, pad: usize) -> Result<(usize, usize, Geom), NnError> {
    let (n, c, h, wd) = x.dims4()?;
    let (f, wc, kh, kw) = w.dims4()?;
    if wc != c {
        return Err(shape_err(format!("conv input has {c} channels, weight expects {wc}")));
    }
    let ho = out_extent(h, kh, stride, pad)?;
    let wo = out_extent(wd, kw, stride, pad)?;
    Ok((
        n,
        f,
        Geom {
            c,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        },
    ))
}

/// 2-D cross-correlation over an NCHW batch with an `F×C×kh×kw` kernel.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>, NnError> {
    let (n, f, g) = conv_geom(x, weight, stride, pad)?;
    if let Some(b) = bias {
        if b.len() != f {
            return Err(shape_err(format!("bias has {} values for {f} filters", b.len())));
        }
    }
    let npos = g.positions();
    let in_len = g.c * g.h * g.w;
    let mut y = Tensor::zeros(&[n, f, g.ho, g.wo]);
    let (xd, wdat) = (x.data(), weight.data());
    parallel::for_each_chunk_mut(y.data_mut(), f * npos, |i, out| {
        let xi = &xd[i * in_len..(i + 1) * in_len];
        if g.is_pointwise() {
            super::matmul(f, g.c, npos, wdat, false, xi, false, out, false);
        } else {
            let mut cols = vec![T::zero(); g.patch() * npos];
            im2col(xi, &g, &mut cols);
            super::matmul(f, g.patch(), npos, wdat, false, &cols, false, out, false);
        }
        if let Some(b) = bias {
            for (fi, row) in out.chunks_mut(npos).enumerate() {
                let bv = b.data()[fi];
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    });
    Ok(y)
}

#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub dx: Tensor<T>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

/// Gradients of [`conv2d_forward`] given the upstream gradient `dy`.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvGrads<T>, NnError> {
    let (n, f, g) = conv_geom(x, weight, stride, pad)?;
    if dy.shape() != [n, f, g.ho, g.wo] {
        return Err(shape_err(format!("conv upstream gradient {:?} does not match output", dy.shape())));
    }
    let npos = g.positions();
    let in_len = g.c * g.h * g.w;
    let patch = g.patch();
    let (xd, wd, dyd) = (x.data(), weight.data(), dy.data());
    let per_sample = parallel::map_range(n, |i| {
        let xi = &xd[i * in_len..(i + 1) * in_len];
        let dyi = &dyd[i * f * npos..(i + 1) * f * npos];
        let mut dw = vec![T::zero(); f * patch];
        let mut dx = vec![T::zero(); in_len];
        if g.is_pointwise() {
            super::matmul(f, npos, g.c, dyi, false, xi, true, &mut dw, false);
            super::matmul(g.c, f, npos, wd, true, dyi, false, &mut dx, false);
        } else {
            let mut cols = vec![T::zero(); patch * npos];
            im2col(xi, &g, &mut cols);
            super::matmul(f, npos, patch, dyi, false, &cols, true, &mut dw, false);
            super::matmul(patch, f, npos, wd, true, dyi, false, &mut cols, false);
            col2im(&cols, &g, &mut dx);
        }
        (dw, dx)
    });
    let mut dw = Tensor::zeros(weight.shape());
    let mut dx = Vec::with_capacity(n * in_len);
    for (dwi, dxi) in per_sample {
        dw.data_mut().iter_mut().zip(&dwi).for_each(|(a, &b)| *a += b);
        dx.extend(dxi);
    }
    let mut db = Tensor::zeros(&[f]);
    for i in 0..n {
        for (fi, acc) in db.data_mut().iter_mut().enumerate() {
            let row = &dyd[(i * f + fi) * npos..(i * f + fi + 1) * npos];
            *acc += row.iter().copied().sum::<T>();
        }
    }
    Ok(ConvGrads {
        dx: Tensor::from_vec(x.shape(), dx)?,
        dw,
        db,
    })
}

pub(crate) fn he_normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    normal_tensor(shape, std, rng)
}

pub(crate) fn normal_tensor<T: Scalar, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(dist.sample(rng))).collect();
    Tensor::from_vec(shape, data).expect("sized to shape")
}

#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub stride: usize,
    pub pad: usize,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    /// He-normal initialised square-kernel convolution without bias.
    pub fn new<R: Rng + ?Sized>(in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize, rng: &mut R) -> Self {
        let weight = he_normal(&[out_c, in_c, k, k], in_c * k * k, rng);
        Self::from_weights(weight, None, stride, pad)
    }

    pub fn from_weights(weight: Tensor<T>, bias: Option<Tensor<T>>, stride: usize, pad: usize) -> Self {
        Self {
            weight: Param::new(weight),
            bias: bias.map(Param::new),
            stride,
            pad,
            cache: None,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }
}

impl<T: Scalar> Layer<T> for Conv2d<T> {
    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let y = self.infer(x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let x = self.cache.take().ok_or(NnError::NoCache)?;
        let g = conv2d_backward(&x, &self.weight.value, grad, self.stride, self.pad)?;
        accumulate(&mut self.weight.grad, &g.dw);
        if let Some(b) = &mut self.bias {
            accumulate(&mut b.grad, &g.db);
        }
        Ok(g.dx)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        conv2d_forward(x, &self.weight.value, self.bias.as_ref().map(|b| &b.value), self.stride, self.pad)
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        f(&join(prefix, "weight"), Slot::Param(&mut self.weight));
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), Slot::Param(b));
        }
    }
}

fn accumulate<T: Scalar>(into: &mut Tensor<T>, add: &Tensor<T>) {
    into.data_mut().iter_mut().zip(add.data()).for_each(|(a, &b)| *a += b);
}

#[derive(Debug, Clone)]
struct BnCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    shape: Vec<usize>,
}

/// Per-channel batch normalization over `N×H×W`.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    cache: Option<BnCache<T>>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(Tensor::full(&[channels], T::one())),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    fn check(&self, x: &Tensor<T>) -> Result<(usize, usize, usize), NnError> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.channels() {
            return Err(shape_err(format!("batch norm over {} channels got {c}", self.channels())));
        }
        Ok((n, c, h * w))
    }
}

impl<T: Scalar> Layer<T> for BatchNorm2d<T> {
    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let (n, c, hw) = self.check(x)?;
        if n < 2 {
            return Err(NnError::BatchTooSmall(n));
        }
        let m = n * hw;
        let xd = x.data();
        let stats = parallel::map_range(c, |ci| {
            let planes = (0..n).map(|i| &xd[(i * c + ci) * hw..(i * c + ci + 1) * hw]);
            let mean = planes.clone().flatten().copied().sum::<T>() / T::lit(m as f64);
            let var = planes.flatten().map(|&v| (v - mean) * (v - mean)).sum::<T>() / T::lit(m as f64);
            (mean, var)
        });
        let eps = T::lit(BN_EPS);
        let inv_std: Vec<T> = stats.iter().map(|&(_, v)| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); x.len()];
        parallel::for_each_chunk_mut(&mut xhat, hw, |p, out| {
            let ci = p % c;
            let (mean, _) = stats[ci];
            out.iter_mut()
                .zip(&xd[p * hw..(p + 1) * hw])
                .for_each(|(o, &v)| *o = (v - mean) * inv_std[ci]);
        });
        let mut y = Tensor::zeros(x.shape());
        let (gamma, beta) = (self.gamma.value.data(), self.beta.value.data());
        parallel::for_each_chunk_mut(y.data_mut(), hw, |p, out| {
            let ci = p % c;
            out.iter_mut()
                .zip(&xhat[p * hw..(p + 1) * hw])
                .for_each(|(o, &v)| *o = gamma[ci] * v + beta[ci]);
        });
        let mom = T::lit(BN_MOMENTUM);
        let unbias = if m > 1 { T::lit(m as f64 / (m - 1) as f64) } else { T::one() };
        for (ci, &(mean, var)) in stats.iter().enumerate() {
            let rm = &mut self.running_mean.data_mut()[ci];
            *rm = (T::one() - mom) * *rm + mom * mean;
            let rv = &mut self.running_var.data_mut()[ci];
            *rv = (T::one() - mom) * *rv + mom * var * unbias;
        }
        self.cache = Some(BnCache {
            xhat,
            inv_std,
            shape: x.shape().to_vec(),
        });
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let cache = self.cache.take().ok_or(NnError::NoCache)?;
        if grad.shape() != cache.shape.as_slice() {
            return Err(shape_err("batch norm gradient shape differs from forward input"));
        }
        let (n, c, hw) = (cache.shape[0], cache.shape[1], cache.shape[2] * cache.shape[3]);
        let m = T::lit((n * hw) as f64);
        let (gd, xhat) = (grad.data(), &cache.xhat);
        let sums = parallel::map_range(c, |ci| {
            let mut s = T::zero();
            let mut sx = T::zero();
            for i in 0..n {
                let r = (i * c + ci) * hw..(i * c + ci + 1) * hw;
                for (&g, &xh) in gd[r.clone()].iter().zip(&xhat[r]) {
                    s += g;
                    sx += g * xh;
                }
            }
            (s, sx)
        });
        for (ci, &(s, sx)) in sums.iter().enumerate() {
            self.beta.grad.data_mut()[ci] += s;
            self.gamma.grad.data_mut()[ci] += sx;
        }
        let gamma = self.gamma.value.data();
        let mut dx = Tensor::zeros(&cache.shape);
        parallel::for_each_chunk_mut(dx.data_mut(), hw, |p, out| {
            let ci = p % c;
            let (s, sx) = sums[ci];
            let scale = gamma[ci] * cache.inv_std[ci] / m;
            let r = p * hw..(p + 1) * hw;
            for ((o, &g), &xh) in out.iter_mut().zip(&gd[r.clone()]).zip(&xhat[r]) {
                *o = scale * (m * g - s - xh * sx);
            }
        });
        Ok(dx)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let (_, c, hw) = self.check(x)?;
        let eps = T::lit(BN_EPS);
        let (gamma, beta) = (self.gamma.value.data(), self.beta.value.data());
        let (rm, rv) = (self.running_mean.data(), self.running_var.data());
        let mut y = Tensor::zeros(x.shape());
        let xd = x.data();
        parallel::for_each_chunk_mut(y.data_mut(), hw, |p, out| {
            let ci = p % c;
            let scale = gamma[ci] / (rv[ci] + eps).sqrt();
            let shift = beta[ci] - rm[ci] * scale;
            out.iter_mut()
                .zip(&xd[p * hw..(p + 1) * hw])
                .for_each(|(o, &v)| *o = v * scale + shift);
        });
        Ok(y)
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        f(&join(prefix, "weight"), Slot::Param(&mut self.gamma));
        f(&join(prefix, "bias"), Slot::Param(&mut self.beta));
        f(&join(prefix, "running_mean"), Slot::Buffer(&mut self.running_mean));
        f(&join(prefix, "running_var"), Slot::Buffer(&mut self.running_var));
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu<T> {
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Relu<T> {
    pub fn new() -> Self {
        Self { cache: None }
    }
}

impl<T: Scalar> Layer<T> for Relu<T> {
    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let y = self.infer(x)?;
        self.cache = Some(y.clone());
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let y = self.cache.take().ok_or(NnError::NoCache)?;
        if y.shape() != grad.shape() {
            return Err(shape_err("relu gradient shape differs from forward output"));
        }
        let data = grad
            .data()
            .iter()
            .zip(y.data())
            .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
            .collect();
        Tensor::from_vec(grad.shape(), data)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        Ok(x.map(|v| v.max(T::zero())))
    }

    fn visit_mut(&mut self, _: &str, _: &mut dyn FnMut(&str, Slot<'_, T>)) {}
}

/// Max pooling; padding cells never win.
#[derive(Debug, Clone)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    cache: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel,
            stride,
            pad,
            cache: None,
        }
    }

    fn pool<T: Scalar>(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>), NnError> {
        let (n, c, h, w) = x.dims4()?;
        if self.pad >= self.kernel {
            return Err(shape_err("max-pool padding must be smaller than the kernel"));
        }
        let ho = out_extent(h, self.kernel, self.stride, self.pad)?;
        let wo = out_extent(w, self.kernel, self.stride, self.pad)?;
        let xd = x.data();
        let planes = parallel::map_range(n * c, |p| {
            let base = p * h * w;
            let mut vals = Vec::with_capacity(ho * wo);
            let mut idx = Vec::with_capacity(ho * wo);
            for oi in 0..ho {
                for oj in 0..wo {
                    let mut best = T::neg_infinity();
                    let mut arg = usize::MAX;
                    for ki in 0..self.kernel {
                        let r = oi * self.stride + ki;
                        if r < self.pad || r - self.pad >= h {
                            continue;
                        }
                        for kj in 0..self.kernel {
                            let col = oj * self.stride + kj;
                            if col < self.pad || col - self.pad >= w {
                                continue;
                            }
                            let at = base + (r - self.pad) * w + (col - self.pad);
                            if xd[at] > best || arg == usize::MAX {
                                best = xd[at];
                                arg = at;
                            }
                        }
                    }
                    vals.push(best);
                    idx.push(arg);
                }
            }
            (vals, idx)
        });
        let mut data = Vec::with_capacity(n * c * ho * wo);
        let mut args = Vec::with_capacity(n * c * ho * wo);
        for (v, i) in planes {
            data.extend(v);
            args.extend(i);
        }
        Ok((Tensor::from_vec(&[n, c, ho, wo], data)?, args))
    }
}

impl<T: Scalar> Layer<T> for MaxPool2d {
    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let (y, args) = self.pool(x)?;
        self.cache = Some((args, x.shape().to_vec()));
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let (args, shape) = self.cache.take().ok_or(NnError::NoCache)?;
        if grad.len() != args.len() {
            return Err(shape_err("max-pool gradient shape differs from forward output"));
        }
        let mut dx = Tensor::zeros(&shape);
        let d = dx.data_mut();
        for (&a, &g) in args.iter().zip(grad.data()) {
            d[a] += g;
        }
        Ok(dx)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        Ok(self.pool(x)?.0)
    }

    fn visit_mut(&mut self, _: &str, _: &mut dyn FnMut(&str, Slot<'_, T>)) {}
}

/// `[N, C, H, W] → [N, C]` spatial mean.
#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPool {
    cache: Option<Vec<usize>>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        Self { cache: None }
    }
}

impl<T: Scalar> Layer<T> for GlobalAvgPool {
    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let y = self.infer(x)?;
        self.cache = Some(x.shape().to_vec());
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let shape = self.cache.take().ok_or(NnError::NoCache)?;
        let hw = shape[2] * shape[3];
        if grad.len() * hw != shape.iter().product::<usize>() {
            return Err(shape_err("pool gradient shape differs from forward output"));
        }
        let scale = T::lit(1.0 / hw as f64);
        let data = grad
            .data()
            .iter()
            .flat_map(|&g| std::iter::repeat_n(g * scale, hw))
            .collect();
        Tensor::from_vec(&shape, data)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let (n, c, h, w) = x.dims4()?;
        let hw = h * w;
        let scale = T::lit(1.0 / hw as f64);
        let data = x
            .data()
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<T>() * scale)
            .collect();
        Tensor::from_vec(&[n, c], data)
    }

    fn visit_mut(&mut self, _: &str, _: &mut dyn FnMut(&str, Slot<'_, T>)) {}
}

/// Fully connected layer, `y = x·Wᵀ + b` with `W: [out, in]`.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    /// Small-normal weights (std 0.01) and zero bias, so fresh logits are
    /// near-uniform.
    pub fn new<R: Rng + ?Sized>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        let weight = normal_tensor(&[out_features, in_features], 0.01, rng);
        Self::from_weights(weight, Tensor::zeros(&[out_features]))
    }

    pub fn from_weights(weight: Tensor<T>, bias: Tensor<T>) -> Self {
        Self {
            weight: Param::new(weight),
            bias: Param::new(bias),
            cache: None,
        }
    }

    fn dims(&self) -> (usize, usize) {
        let s = self.weight.value.shape();
        (s[0], s[1])
    }
}

impl<T: Scalar> Layer<T> for Linear<T> {
    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let y = self.infer(x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let x = self.cache.take().ok_or(NnError::NoCache)?;
        let (out_f, in_f) = self.dims();
        let n = x.shape()[0];
        if grad.shape() != [n, out_f] {
            return Err(shape_err(format!("linear gradient {:?}, expected [{n}, {out_f}]", grad.shape())));
        }
        super::matmul(out_f, n, in_f, grad.data(), true, x.data(), false, self.weight.grad.data_mut(), true);
        for row in grad.data().chunks(out_f) {
            self.bias.grad.data_mut().iter_mut().zip(row).for_each(|(b, &g)| *b += g);
        }
        let mut dx = Tensor::zeros(&[n, in_f]);
        super::matmul(n, out_f, in_f, grad.data(), false, self.weight.value.data(), false, dx.data_mut(), false);
        Ok(dx)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let (n, k) = x.dims2()?;
        let (out_f, in_f) = self.dims();
        if k != in_f {
            return Err(shape_err(format!("linear expects {in_f} features, got {k}")));
        }
        let mut y = Tensor::zeros(&[n, out_f]);
        super::matmul(n, in_f, out_f, x.data(), false, self.weight.value.data(), true, y.data_mut(), false);
        for row in y.data_mut().chunks_mut(out_f) {
            row.iter_mut().zip(self.bias.value.data()).for_each(|(v, &b)| *v += b);
        }
        Ok(y)
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        f(&join(prefix, "weight"), Slot::Param(&mut self.weight));
        f(&join(prefix, "bias"), Slot::Param(&mut self.bias));
    }
}
