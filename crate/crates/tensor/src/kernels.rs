//! Forward and backward kernels for the layer primitives.
//!
//! All convolutions are 3x3 with padding 1. Work is split per sample, and
//! cross-sample reductions (weight and bias gradients) are summed in sample
//! order, so results do not depend on the rayon thread count.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;
pub const BN_EPS: f64 = 1e-5;

/// Gathers 3x3 patches of an `[c, ih, iw]` image into a `[c*9, gh*gw]`
/// column matrix. Grid position `(gy, gx)` reads image pixel
/// `(gy*stride + ky - 1, gx*stride + kx - 1)`, zero outside the image.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    img: &[T],
    c: usize,
    ih: usize,
    iw: usize,
    gh: usize,
    gw: usize,
    stride: usize,
    cols: &mut [T],
) {
    let plane = gh * gw;
    for ci in 0..c {
        let src = &img[ci * ih * iw..(ci + 1) * ih * iw];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &mut cols[(ci * TAPS + ky * KERNEL + kx) * plane..][..plane];
                for gy in 0..gh {
                    let iy = (gy * stride + ky) as isize - 1;
                    let out = &mut row[gy * gw..(gy + 1) * gw];
                    if iy < 0 || iy >= ih as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let line = &src[iy as usize * iw..(iy as usize + 1) * iw];
                    for (gx, o) in out.iter_mut().enumerate() {
                        let ix = (gx * stride + kx) as isize - 1;
                        *o = if ix < 0 || ix >= iw as isize {
                            T::zero()
                        } else {
                            line[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back into the image.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    ih: usize,
    iw: usize,
    gh: usize,
    gw: usize,
    stride: usize,
    img: &mut [T],
) {
    let plane = gh * gw;
    for ci in 0..c {
        let dst = &mut img[ci * ih * iw..(ci + 1) * ih * iw];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &cols[(ci * TAPS + ky * KERNEL + kx) * plane..][..plane];
                for gy in 0..gh {
                    let iy = (gy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= ih as isize {
                        continue;
                    }
                    let line = &mut dst[iy as usize * iw..(iy as usize + 1) * iw];
                    for (gx, &v) in row[gy * gw..(gy + 1) * gw].iter().enumerate() {
                        let ix = (gx * stride + kx) as isize - 1;
                        if ix >= 0 && ix < iw as isize {
                            line[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn check_kernel<T: Scalar>(w: &Tensor<T>, what: &str) -> Result<[usize; 4]> {
    let d = w.dims4()?;
    if d[2] != KERNEL || d[3] != KERNEL {
        return Err(Error::Config(format!("{what} kernel must be 3x3, got {:?}", w.shape())));
    }
    Ok(d)
}

fn check_bias<T: Scalar>(bias: &Tensor<T>, n: usize) -> Result<()> {
    if bias.shape() != [n] {
        return Err(shape_err!("bias {:?}, expected [{}]", bias.shape(), n));
    }
    Ok(())
}

fn add_channel_bias<T: Scalar>(out: &mut [T], bias: &[T], plane: usize) {
    for (chunk, &b) in out.chunks_mut(plane).zip(bias.iter().cycle()) {
        for v in chunk {
            *v += b;
        }
    }
}

/// Sum of `gy` over batch and spatial axes, per channel.
fn channel_sums<T: Scalar>(gy: &Tensor<T>) -> Result<Vec<T>> {
    let [_, c, h, w] = gy.dims4()?;
    let mut out = vec![T::zero(); c];
    for (i, chunk) in gy.data().chunks(h * w).enumerate() {
        out[i % c] += chunk.iter().copied().sum::<T>();
    }
    Ok(out)
}

/// Same-size 3x3 cross-correlation, stride 1, zero padding 1.
/// `x: [B, Cin, H, W]`, `w: [Cout, Cin, 3, 3]`, `b: [Cout]`.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [batch, cin, h, wd] = x.dims4()?;
    let [cout, wcin, _, _] = check_kernel(w, "conv2d")?;
    if wcin != cin {
        return Err(Error::Config(format!(
            "conv2d weight expects {wcin} input channels, input has {cin}"
        )));
    }
    check_bias(b, cout)?;
    let plane = h * wd;
    let mut y = vec![T::zero(); batch * cout * plane];
    y.par_chunks_mut(cout * plane)
        .zip(x.data().par_chunks(cin * plane))
        .for_each(|(yb, xb)| {
            let mut cols = vec![T::zero(); cin * TAPS * plane];
            im2col(xb, cin, h, wd, h, wd, 1, &mut cols);
            let k = cin * TAPS;
            T::gemm(cout, k, plane, T::one(), w.data(), k as isize, 1, &cols, plane as isize, 1,
                T::zero(), yb, plane as isize, 1);
            add_channel_bias(yb, b.data(), plane);
        });
    Ok(Tensor::from_parts(vec![batch, cout, h, wd], y))
}

pub(crate) struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let [batch, cin, h, wd] = x.dims4()?;
    let [cout, _, _, _] = w.dims4()?;
    let plane = h * wd;
    let k = cin * TAPS;
    let parts: Vec<(Vec<T>, Vec<T>)> = x
        .data()
        .par_chunks(cin * plane)
        .zip(gy.data().par_chunks(cout * plane))
        .map(|(xb, gyb)| {
            let mut cols = vec![T::zero(); k * plane];
            im2col(xb, cin, h, wd, h, wd, 1, &mut cols);
            let mut gw = vec![T::zero(); cout * k];
            // gw = gy_b [cout x plane] * cols^T [plane x k]
            T::gemm(cout, plane, k, T::one(), gyb, plane as isize, 1, &cols, 1, plane as isize,
                T::zero(), &mut gw, k as isize, 1);
            // gcols = w^T [k x cout] * gy_b [cout x plane]
            T::gemm(k, cout, plane, T::one(), w.data(), 1, k as isize, gyb, plane as isize, 1,
                T::zero(), &mut cols, plane as isize, 1);
            let mut gx = vec![T::zero(); cin * plane];
            col2im(&cols, cin, h, wd, h, wd, 1, &mut gx);
            (gx, gw)
        })
        .collect();
    let mut gx = Vec::with_capacity(batch * cin * plane);
    let mut gw = vec![T::zero(); cout * k];
    for (gxb, gwb) in parts {
        gx.extend_from_slice(&gxb);
        for (a, b) in gw.iter_mut().zip(gwb) {
            *a += b;
        }
    }
    Ok(ConvGrads {
        input: Tensor::from_parts(x.shape().to_vec(), gx),
        weight: Tensor::from_parts(w.shape().to_vec(), gw),
        bias: Tensor::from_parts(vec![cout], channel_sums(gy)?),
    })
}

/// Output spatial size of a transposed 3x3 convolution (padding 1, output
/// padding `stride - 1`).
pub fn deconv_output_size(input: usize, stride: usize) -> usize {
    input * stride
}

/// Transposed 3x3 convolution. `w: [Cin, Cout, 3, 3]`; stride 1 keeps the
/// spatial size, stride 2 doubles it.
pub fn deconv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
) -> Result<Tensor<T>> {
    if !matches!(stride, 1 | 2) {
        return Err(Error::Config(format!("deconv2d stride must be 1 or 2, got {stride}")));
    }
    let [batch, cin, h, wd] = x.dims4()?;
    let [wcin, cout, _, _] = check_kernel(w, "deconv2d")?;
    if wcin != cin {
        return Err(Error::Config(format!(
            "deconv2d weight expects {wcin} input channels, input has {cin}"
        )));
    }
    check_bias(b, cout)?;
    let (oh, ow) = (deconv_output_size(h, stride), deconv_output_size(wd, stride));
    let (iplane, oplane) = (h * wd, oh * ow);
    let k = cout * TAPS;
    let mut y = vec![T::zero(); batch * cout * oplane];
    y.par_chunks_mut(cout * oplane)
        .zip(x.data().par_chunks(cin * iplane))
        .for_each(|(yb, xb)| {
            let mut cols = vec![T::zero(); k * iplane];
            // cols = w^T [k x cin] * x_b [cin x iplane]
            T::gemm(k, cin, iplane, T::one(), w.data(), 1, k as isize, xb, iplane as isize, 1,
                T::zero(), &mut cols, iplane as isize, 1);
            col2im(&cols, cout, oh, ow, h, wd, stride, yb);
            add_channel_bias(yb, b.data(), oplane);
        });
    Ok(Tensor::from_parts(vec![batch, cout, oh, ow], y))
}

pub(crate) fn deconv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    stride: usize,
) -> Result<ConvGrads<T>> {
    let [batch, cin, h, wd] = x.dims4()?;
    let [_, cout, oh, ow] = gy.dims4()?;
    let (iplane, oplane) = (h * wd, oh * ow);
    let k = cout * TAPS;
    let parts: Vec<(Vec<T>, Vec<T>)> = x
        .data()
        .par_chunks(cin * iplane)
        .zip(gy.data().par_chunks(cout * oplane))
        .map(|(xb, gyb)| {
            let mut gcols = vec![T::zero(); k * iplane];
            im2col(gyb, cout, oh, ow, h, wd, stride, &mut gcols);
            let mut gx = vec![T::zero(); cin * iplane];
            // gx = w [cin x k] * gcols [k x iplane]
            T::gemm(cin, k, iplane, T::one(), w.data(), k as isize, 1, &gcols, iplane as isize, 1,
                T::zero(), &mut gx, iplane as isize, 1);
            let mut gw = vec![T::zero(); cin * k];
            // gw = x_b [cin x iplane] * gcols^T [iplane x k]
            T::gemm(cin, iplane, k, T::one(), xb, iplane as isize, 1, &gcols, 1, iplane as isize,
                T::zero(), &mut gw, k as isize, 1);
            (gx, gw)
        })
        .collect();
    let mut gx = Vec::with_capacity(batch * cin * iplane);
    let mut gw = vec![T::zero(); cin * k];
    for (gxb, gwb) in parts {
        gx.extend_from_slice(&gxb);
        for (a, b) in gw.iter_mut().zip(gwb) {
            *a += b;
        }
    }
    Ok(ConvGrads {
        input: Tensor::from_parts(x.shape().to_vec(), gx),
        weight: Tensor::from_parts(w.shape().to_vec(), gw),
        bias: Tensor::from_parts(vec![cout], channel_sums(gy)?),
    })
}

/// Batch statistics from a train-mode batchnorm. `var` is the biased
/// variance used for normalization.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

impl<T: Scalar> BatchStats<T> {
    /// Unbiased variance, the value folded into running statistics.
    pub fn unbiased_var(&self) -> Vec<T> {
        let n = T::cast(self.count as f64);
        let corr = n / (n - T::one());
        self.var.iter().map(|&v| v * corr).collect()
    }
}

pub(crate) struct BatchNormOut<T> {
    pub y: Tensor<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub stats: Option<BatchStats<T>>,
}

fn check_affine<T: Scalar>(x: &Tensor<T>, scale: &Tensor<T>, shift: &Tensor<T>) -> Result<[usize; 4]> {
    let d = x.dims4()?;
    if scale.shape() != [d[1]] || shift.shape() != [d[1]] {
        return Err(shape_err!(
            "batchnorm affine {:?}/{:?} for {} channels",
            scale.shape(),
            shift.shape(),
            d[1]
        ));
    }
    Ok(d)
}

fn normalize_with<T: Scalar>(
    x: &Tensor<T>,
    scale: &[T],
    shift: &[T],
    mean: &[T],
    inv_std: &[T],
    c: usize,
    plane: usize,
) -> (Vec<T>, Vec<T>) {
    let mut xhat = Vec::with_capacity(x.len());
    let mut y = Vec::with_capacity(x.len());
    for (i, chunk) in x.data().chunks(plane).enumerate() {
        let ch = i % c;
        for &v in chunk {
            let n = (v - mean[ch]) * inv_std[ch];
            xhat.push(n);
            y.push(scale[ch] * n + shift[ch]);
        }
    }
    (xhat, y)
}

pub(crate) fn batchnorm_train_full<T: Scalar>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
) -> Result<BatchNormOut<T>> {
    let [batch, c, h, w] = check_affine(x, scale, shift)?;
    let plane = h * w;
    let count = batch * plane;
    if count < 2 {
        return Err(Error::DegenerateBatch(count));
    }
    let n = T::cast(count as f64);
    let mut mean = vec![T::zero(); c];
    for (i, chunk) in x.data().chunks(plane).enumerate() {
        mean[i % c] += chunk.iter().copied().sum::<T>();
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![T::zero(); c];
    for (i, chunk) in x.data().chunks(plane).enumerate() {
        let m = mean[i % c];
        var[i % c] += chunk.iter().map(|&v| (v - m) * (v - m)).sum::<T>();
    }
    var.iter_mut().for_each(|v| *v /= n);
    let eps = T::cast(BN_EPS);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let (xhat, y) = normalize_with(x, scale.data(), shift.data(), &mean, &inv_std, c, plane);
    Ok(BatchNormOut {
        y: x.with_data(y),
        xhat,
        inv_std,
        stats: Some(BatchStats { mean, var, count }),
    })
}

pub(crate) fn batchnorm_eval_full<T: Scalar>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
) -> Result<BatchNormOut<T>> {
    let [_, c, h, w] = check_affine(x, scale, shift)?;
    if running_mean.shape() != [c] || running_var.shape() != [c] {
        return Err(shape_err!("running statistics for {} channels", c));
    }
    let eps = T::cast(BN_EPS);
    let inv_std: Vec<T> = running_var.data().iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let (xhat, y) =
        normalize_with(x, scale.data(), shift.data(), running_mean.data(), &inv_std, c, h * w);
    Ok(BatchNormOut { y: x.with_data(y), xhat, inv_std, stats: None })
}

/// Train-mode batchnorm over `[B, C, H, W]` with batch statistics.
pub fn batchnorm_train<T: Scalar>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
) -> Result<(Tensor<T>, BatchStats<T>)> {
    let out = batchnorm_train_full(x, scale, shift)?;
    Ok((out.y, out.stats.expect("train mode produces statistics")))
}

/// Eval-mode batchnorm with running statistics.
pub fn batchnorm_eval<T: Scalar>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
) -> Result<Tensor<T>> {
    Ok(batchnorm_eval_full(x, scale, shift, running_mean, running_var)?.y)
}

/// Returns `(dx, dscale, dshift)`.
pub(crate) fn batchnorm_backward<T: Scalar>(
    gy: &Tensor<T>,
    scale: &Tensor<T>,
    xhat: &[T],
    inv_std: &[T],
    train: bool,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let [batch, c, h, w] = gy.dims4()?;
    let plane = h * w;
    let mut sum_gy = vec![T::zero(); c];
    let mut sum_gy_xhat = vec![T::zero(); c];
    for (i, (g, xh)) in gy.data().chunks(plane).zip(xhat.chunks(plane)).enumerate() {
        let ch = i % c;
        for (&gv, &xv) in g.iter().zip(xh) {
            sum_gy[ch] += gv;
            sum_gy_xhat[ch] += gv * xv;
        }
    }
    let n = T::cast((batch * plane) as f64);
    let mut gx = Vec::with_capacity(gy.len());
    for (i, (g, xh)) in gy.data().chunks(plane).zip(xhat.chunks(plane)).enumerate() {
        let ch = i % c;
        let k = scale.data()[ch] * inv_std[ch];
        if train {
            let mg = sum_gy[ch] / n;
            let mgx = sum_gy_xhat[ch] / n;
            gx.extend(g.iter().zip(xh).map(|(&gv, &xv)| k * (gv - mg - xv * mgx)));
        } else {
            gx.extend(g.iter().map(|&gv| k * gv));
        }
    }
    Ok((
        gy.with_data(gx),
        Tensor::from_parts(vec![c], sum_gy_xhat),
        Tensor::from_parts(vec![c], sum_gy),
    ))
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// 2x2 max pooling, stride 2. Also returns, per output element, the flat
/// index of the winning input element (first maximum on ties).
pub fn maxpool2<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let [batch, c, h, w] = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Config(format!("maxpool2 needs even spatial dims, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(batch * c * oh * ow);
    let mut idx = Vec::with_capacity(batch * c * oh * ow);
    let d = x.data();
    for p in 0..batch * c {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let j = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if d[j] > d[best] {
                        best = j;
                    }
                }
                out.push(d[best]);
                idx.push(best);
            }
        }
    }
    Ok((Tensor::from_parts(vec![batch, c, oh, ow], out), idx))
}

pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [batch, c, h, w] = x.dims4()?;
    let n = T::cast((h * w) as f64);
    let data = x.data().chunks(h * w).map(|ch| ch.iter().copied().sum::<T>() / n).collect();
    Ok(Tensor::from_parts(vec![batch, c], data))
}

/// `y = x W^T + b` with `x: [B, F]`, `w: [K, F]`, `b: [K]`.
pub fn fully_connected<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [batch, f] = x.dims2()?;
    let [k, wf] = w.dims2()?;
    if wf != f {
        return Err(shape_err!("fully_connected weight {:?} for {} features", w.shape(), f));
    }
    check_bias(b, k)?;
    let mut y = vec![T::zero(); batch * k];
    T::gemm(batch, f, k, T::one(), x.data(), f as isize, 1, w.data(), 1, f as isize, T::zero(),
        &mut y, k as isize, 1);
    for row in y.chunks_mut(k) {
        for (v, &bb) in row.iter_mut().zip(b.data()) {
            *v += bb;
        }
    }
    Ok(Tensor::from_parts(vec![batch, k], y))
}

pub(crate) fn fully_connected_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let [batch, f] = x.dims2()?;
    let [k, _] = w.dims2()?;
    let mut gx = vec![T::zero(); batch * f];
    T::gemm(batch, k, f, T::one(), gy.data(), k as isize, 1, w.data(), f as isize, 1, T::zero(),
        &mut gx, f as isize, 1);
    let mut gw = vec![T::zero(); k * f];
    T::gemm(k, batch, f, T::one(), gy.data(), 1, k as isize, x.data(), f as isize, 1, T::zero(),
        &mut gw, f as isize, 1);
    let mut gb = vec![T::zero(); k];
    for row in gy.data().chunks(k) {
        for (a, &g) in gb.iter_mut().zip(row) {
            *a += g;
        }
    }
    Ok(ConvGrads {
        input: Tensor::from_parts(vec![batch, f], gx),
        weight: Tensor::from_parts(vec![k, f], gw),
        bias: Tensor::from_parts(vec![k], gb),
    })
}

pub fn check_dropout_p(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("dropout probability must be in [0, 1), got {p}")));
    }
    Ok(())
}

/// Inverted-dropout mask: 0 with probability `p`, `1/(1-p)` otherwise.
pub fn dropout_mask<T: Scalar, R: Rng + ?Sized>(len: usize, p: f64, rng: &mut R) -> Result<Vec<T>> {
    check_dropout_p(p)?;
    let keep = T::cast(1.0 / (1.0 - p));
    Ok((0..len)
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
        .collect())
}

/// Dropout; identity when `train` is false or `p == 0`.
pub fn dropout<T: Scalar, R: Rng + ?Sized>(
    x: &Tensor<T>,
    p: f64,
    train: bool,
    rng: &mut R,
) -> Result<Tensor<T>> {
    check_dropout_p(p)?;
    if !train || p == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask::<T, R>(x.len(), p, rng)?;
    Ok(x.with_data(x.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect()))
}

/// Row-wise softmax of `[B, K]` logits, stabilized by max subtraction.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let [_, k] = logits.dims2()?;
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks(k) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        out.extend(row.iter().map(|&v| (v - m).exp()));
        let z: T = out[start..].iter().copied().sum();
        out[start..].iter_mut().for_each(|v| *v /= z);
    }
    Ok(logits.with_data(out))
}

pub fn check_labels(labels: &[usize], batch: usize, classes: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(shape_err!("{} labels for a batch of {}", labels.len(), batch));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Data(format!("label {bad} outside [0, {classes})")));
    }
    Ok(())
}

/// Mean cross-entropy of softmax(logits) against class indices. Returns the
/// loss and the probabilities.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let [batch, k] = logits.dims2()?;
    check_labels(labels, batch, k)?;
    let probs = softmax(logits)?;
    let mut loss = T::zero();
    for (row, &label) in logits.data().chunks(k).zip(labels) {
        // log-sum-exp form keeps the loss finite when the true-class probability underflows
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        loss += lse - row[label];
    }
    Ok((loss / T::cast(batch as f64), probs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(a), c> == <a, col2im(c)> for stride 2 on a 4x4 image / 2x2 grid
        let (c, ih, iw, gh, gw) = (2, 4, 4, 2, 2);
        let a: Vec<f64> = (0..c * ih * iw).map(|i| (i as f64 * 0.37).sin()).collect();
        let cv: Vec<f64> = (0..c * 9 * gh * gw).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut cols = vec![0.0; cv.len()];
        im2col(&a, c, ih, iw, gh, gw, 2, &mut cols);
        let mut img = vec![0.0; a.len()];
        col2im(&cv, c, ih, iw, gh, gw, 2, &mut img);
        let lhs: f64 = cols.iter().zip(&cv).map(|(x, y)| x * y).sum();
        let rhs: f64 = a.iter().zip(&img).map(|(x, y)| x * y).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn unsupported_stride_is_config_error() {
        let x = Tensor::<f32>::zeros(&[1, 1, 2, 2]).unwrap();
        let w = Tensor::<f32>::zeros(&[1, 1, 3, 3]).unwrap();
        let b = Tensor::<f32>::zeros(&[1]).unwrap();
        assert!(matches!(deconv2d(&x, &w, &b, 3), Err(Error::Config(_))));
    }

    #[test]
    fn conv_channel_mismatch_is_config_error() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]).unwrap();
        let w = Tensor::<f32>::zeros(&[1, 3, 3, 3]).unwrap();
        let b = Tensor::<f32>::zeros(&[1]).unwrap();
        assert!(matches!(conv2d(&x, &w, &b), Err(Error::Config(_))));
    }

    #[test]
    fn degenerate_batch_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 2, 1, 1]).unwrap();
        let s = Tensor::<f32>::full(&[2], 1.0).unwrap();
        let z = Tensor::<f32>::zeros(&[2]).unwrap();
        assert!(matches!(batchnorm_train(&x, &s, &z), Err(Error::DegenerateBatch(1))));
    }

    #[test]
    fn odd_pooling_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 1, 3, 4]).unwrap();
        assert!(matches!(maxpool2(&x), Err(Error::Config(_))));
    }

    #[test]
    fn dropout_rejects_p_one() {
        let x = Tensor::<f32>::zeros(&[4]).unwrap();
        let mut rng = rand::rng();
        assert!(dropout(&x, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn label_out_of_range_is_data_error() {
        let l = Tensor::<f32>::zeros(&[1, 3]).unwrap();
        assert!(matches!(softmax_cross_entropy(&l, &[3]), Err(Error::Data(_))));
    }
}
