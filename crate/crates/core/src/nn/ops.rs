//! Operator kernels: forward passes and their vector-Jacobian products.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tensor::{gemm, MatRef, Scalar, Tensor};
use crate::error::{Error, Result};

pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    /// Size-preserving (at stride 1) convolution with padding `kernel / 2`.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self { in_channels, out_channels, kernel, stride, padding: kernel / 2 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config(format!("convolution needs channels, got {self:?}")));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("kernel size must be odd, got {}", self.kernel)));
        }
        if !(self.stride == 1 || self.stride == 2) {
            return Err(Error::Config(format!("stride must be 1 or 2, got {}", self.stride)));
        }
        if self.padding != self.kernel / 2 {
            return Err(Error::Config(format!(
                "padding {} does not preserve size for kernel {}",
                self.padding, self.kernel
            )));
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    #[inline]
    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let o = |n: usize| (n + 2 * self.padding - self.kernel) / self.stride + 1;
        (o(h), o(w))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn check_input(&self, input: &[usize], weight: &[usize], bias: &[usize]) -> Result<()> {
        let [_, c, h, w] = input[..] else {
            return Err(Error::Shape(format!("conv input must be 4-D, got {input:?}")));
        };
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        if h == 0 || w == 0 {
            return Err(Error::Shape("conv input has an empty spatial extent".into()));
        }
        if weight != self.weight_shape() {
            return Err(Error::Shape(format!(
                "conv weight shape {weight:?}, expected {:?}",
                self.weight_shape()
            )));
        }
        if bias != [self.out_channels] {
            return Err(Error::Shape(format!(
                "conv bias shape {bias:?}, expected [{}]",
                self.out_channels
            )));
        }
        Ok(())
    }
}

fn im2col<T: Scalar>(input: &[T], c: usize, h: usize, w: usize, spec: &ConvSpec, col: &mut [T]) {
    let k = spec.kernel;
    let (ho, wo) = spec.output_size(h, w);
    let (s, p) = (spec.stride as isize, spec.padding as isize);
    for ch in 0..c {
        let plane = &input[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = oy as isize * s - p + ky as isize;
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        out_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = ox as isize * s - p + kx as isize;
                        *v = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], c: usize, h: usize, w: usize, spec: &ConvSpec, out: &mut [T]) {
    let k = spec.kernel;
    let (ho, wo) = spec.output_size(h, w);
    let (s, p) = (spec.stride as isize, spec.padding as isize);
    out.iter_mut().for_each(|v| *v = T::zero());
    for ch in 0..c {
        let plane = &mut out[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = oy as isize * s - p + ky as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = ox as isize * s - p + kx as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation with zero padding; output spatial size is
/// `ceil(in / stride)`.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, spec: &ConvSpec, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    spec.validate()?;
    spec.check_input(input.shape(), weight.shape(), bias.shape())?;
    let (b, c, h, w) = input.dims4()?;
    let (ho, wo) = spec.output_size(h, w);
    let o = spec.out_channels;
    let rows = c * spec.kernel * spec.kernel;
    let mut out = Tensor::zeros(&[b, o, ho, wo]);
    let wmat = MatRef::new(weight.data(), o, rows);
    out.data_mut().par_chunks_mut(o * ho * wo).enumerate().for_each(|(bi, dst)| {
        for (oc, plane) in dst.chunks_mut(ho * wo).enumerate() {
            plane.iter_mut().for_each(|v| *v = bias.data()[oc]);
        }
        let src = input.item(bi);
        if spec.is_pointwise() {
            gemm(wmat, MatRef::new(src, rows, ho * wo), T::one(), dst);
        } else {
            let mut col = vec![T::zero(); rows * ho * wo];
            im2col(src, c, h, w, spec, &mut col);
            gemm(wmat, MatRef::new(&col, rows, ho * wo), T::one(), dst);
        }
    });
    Ok(out)
}

/// Gradients of a convolution with respect to (input, weight, bias). The
/// input gradient is skipped when `need_input` is false.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    spec: &ConvSpec,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let (b, c, h, w) = input.dims4()?;
    let (ho, wo) = spec.output_size(h, w);
    let o = spec.out_channels;
    let rows = c * spec.kernel * spec.kernel;
    if grad_out.shape() != [b, o, ho, wo] {
        return Err(Error::Shape(format!("conv grad shape {:?}", grad_out.shape())));
    }
    let wmat = MatRef::new(weight.data(), o, rows);
    let per_item: Vec<(Option<Vec<T>>, Vec<T>, Vec<T>)> = (0..b)
        .into_par_iter()
        .map(|bi| {
            let g = grad_out.item(bi);
            let src = input.item(bi);
            let owned_col;
            let col: &[T] = if spec.is_pointwise() {
                src
            } else {
                let mut buf = vec![T::zero(); rows * ho * wo];
                im2col(src, c, h, w, spec, &mut buf);
                owned_col = buf;
                &owned_col
            };
            let gmat = MatRef::new(g, o, ho * wo);
            let mut gw = vec![T::zero(); o * rows];
            gemm(gmat, MatRef::new(col, rows, ho * wo).t(), T::zero(), &mut gw);
            let gb: Vec<T> = g.chunks(ho * wo).map(|p| p.iter().copied().sum()).collect();
            let gi = need_input.then(|| {
                let mut gcol = vec![T::zero(); rows * ho * wo];
                gemm(wmat.t(), gmat, T::zero(), &mut gcol);
                if spec.is_pointwise() {
                    gcol
                } else {
                    let mut gi = vec![T::zero(); c * h * w];
                    col2im(&gcol, c, h, w, spec, &mut gi);
                    gi
                }
            });
            (gi, gw, gb)
        })
        .collect();

    let mut grad_w = Tensor::zeros(weight.shape());
    let mut grad_b = Tensor::zeros(&[o]);
    let mut grad_in = need_input.then(|| Vec::with_capacity(b * c * h * w));
    for (gi, gw, gb) in per_item {
        grad_w.data_mut().iter_mut().zip(&gw).for_each(|(a, v)| *a += *v);
        grad_b.data_mut().iter_mut().zip(&gb).for_each(|(a, v)| *a += *v);
        if let (Some(acc), Some(gi)) = (grad_in.as_mut(), gi) {
            acc.extend_from_slice(&gi);
        }
    }
    let grad_in = grad_in.map(|v| Tensor::from_vec(input.shape(), v)).transpose()?;
    Ok((grad_in, grad_w, grad_b))
}

#[inline]
pub fn selu_scalar<T: Scalar>(x: T) -> T {
    let lambda = T::lit(SELU_LAMBDA);
    if x > T::zero() {
        lambda * x
    } else {
        lambda * T::lit(SELU_ALPHA) * x.exp_m1()
    }
}

pub fn selu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(selu_scalar)
}

pub fn selu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let lambda = T::lit(SELU_LAMBDA);
    let la = lambda * T::lit(SELU_ALPHA);
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { lambda * g } else { la * x.exp() * g })
        .collect();
    Tensor::from_vec(input.shape(), data).expect("same shape")
}

/// Source taps for resampling `n_in` samples to `n_out` with pixel centers
/// uniformly covering the input extent (align-corners off).
fn resize_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resampling of every channel to `out_h`×`out_w`.
pub fn resize_bilinear<T: Scalar>(input: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (b, c, h, w) = input.dims4()?;
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::Shape("resize needs non-empty extents".into()));
    }
    let ty = resize_taps(h, out_h);
    let tx = resize_taps(w, out_w);
    let mut out = Tensor::zeros(&[b, c, out_h, out_w]);
    out.data_mut()
        .par_chunks_mut(out_h * out_w)
        .zip(input.data().par_chunks(h * w))
        .for_each(|(dst, src)| {
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                let ly = T::lit(ly);
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let lx = T::lit(lx);
                    let top = src[y0 * w + x0] + (src[y0 * w + x1] - src[y0 * w + x0]) * lx;
                    let bot = src[y1 * w + x0] + (src[y1 * w + x1] - src[y1 * w + x0]) * lx;
                    dst[oy * out_w + ox] = top + (bot - top) * ly;
                }
            }
        });
    Ok(out)
}

pub fn resize_bilinear_backward<T: Scalar>(
    input_shape: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [b, c, h, w] = input_shape[..] else {
        return Err(Error::Shape("resize backward needs a 4-D shape".into()));
    };
    let (_, _, out_h, out_w) = grad_out.dims4()?;
    let ty = resize_taps(h, out_h);
    let tx = resize_taps(w, out_w);
    let mut grad = Tensor::zeros(&[b, c, h, w]);
    grad.data_mut()
        .par_chunks_mut(h * w)
        .zip(grad_out.data().par_chunks(out_h * out_w))
        .for_each(|(dst, g)| {
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                let ly = T::lit(ly);
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let lx = T::lit(lx);
                    let v = g[oy * out_w + ox];
                    let top = v * (T::one() - ly);
                    let bot = v * ly;
                    dst[y0 * w + x0] += top * (T::one() - lx);
                    dst[y0 * w + x1] += top * lx;
                    dst[y1 * w + x0] += bot * (T::one() - lx);
                    dst[y1 * w + x1] += bot * lx;
                }
            }
        });
    Ok(grad)
}

pub fn bilinear_upsample2x<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, _, h, w) = input.dims4()?;
    resize_bilinear(input, 2 * h, 2 * w)
}

/// Per-element maximum over a non-empty set of equally shaped tensors.
pub fn elementwise_max_over_set<T: Scalar>(tensors: &[Tensor<T>]) -> Result<Tensor<T>> {
    let (first, rest) = tensors.split_first().ok_or(Error::EmptySet)?;
    let mut out = first.clone();
    for t in rest {
        if t.shape() != first.shape() {
            return Err(Error::Shape(format!(
                "set members differ in shape: {:?} vs {:?}",
                first.shape(),
                t.shape()
            )));
        }
        out.data_mut().iter_mut().zip(t.data()).for_each(|(a, &b)| {
            if b > *a {
                *a = b
            }
        });
    }
    Ok(out)
}

/// Max over the batch axis of a (B, C, H, W) tensor, with the winning batch
/// index per element (lowest index on ties).
pub fn max_over_batch<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let (b, c, h, w) = input.dims4()?;
    if b == 0 {
        return Err(Error::EmptySet);
    }
    let per = c * h * w;
    let mut out = input.item(0).to_vec();
    let mut arg = vec![0u32; per];
    for bi in 1..b {
        for ((o, a), &v) in out.iter_mut().zip(arg.iter_mut()).zip(input.item(bi)) {
            if v > *o {
                *o = v;
                *a = bi as u32;
            }
        }
    }
    Ok((Tensor::from_vec(&[1, c, h, w], out)?, arg))
}

/// Per-pixel softmax over the channel axis of a (B, C, H, W) tensor.
pub fn softmax_channels<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = logits.dims4()?;
    let hw = h * w;
    let mut out = Tensor::zeros(logits.shape());
    for bi in 0..b {
        let src = logits.item(bi);
        let dst = &mut out.data_mut()[bi * c * hw..(bi + 1) * c * hw];
        for p in 0..hw {
            let m = (0..c).map(|ch| src[ch * hw + p]).fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for ch in 0..c {
                let e = (src[ch * hw + p] - m).exp();
                dst[ch * hw + p] = e;
                sum += e;
            }
            for ch in 0..c {
                dst[ch * hw + p] = dst[ch * hw + p] / sum;
            }
        }
    }
    Ok(out)
}

/// Mean negative log-likelihood of `labels` over valid pixels, together with
/// the gradient with respect to the logits.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize], valid: &[bool]) -> Result<(T, Tensor<T>)> {
    let (b, c, h, w) = logits.dims4()?;
    let hw = h * w;
    if labels.len() != b * hw || valid.len() != b * hw {
        return Err(Error::Shape(format!(
            "labels/mask cover {}/{} pixels, logits have {}",
            labels.len(),
            valid.len(),
            b * hw
        )));
    }
    let count = valid.iter().filter(|&&v| v).count();
    if count == 0 {
        return Err(Error::EmptyLoss);
    }
    let probs = softmax_channels(logits)?;
    let inv = T::one() / T::lit(count as f64);
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = 0.0f64;
    for bi in 0..b {
        for p in 0..hw {
            let i = bi * hw + p;
            if !valid[i] {
                continue;
            }
            let label = labels[i];
            if label >= c {
                return Err(Error::Shape(format!("label {label} outside [0, {c})")));
            }
            let base = bi * c * hw;
            let m = (0..c).map(|ch| logits.data()[base + ch * hw + p]).fold(T::neg_infinity(), T::max);
            let lse = m + (0..c)
                .map(|ch| (logits.data()[base + ch * hw + p] - m).exp())
                .sum::<T>()
                .ln();
            total += (lse - logits.data()[base + label * hw + p]).as_f64();
            for ch in 0..c {
                let target = if ch == label { T::one() } else { T::zero() };
                grad.data_mut()[base + ch * hw + p] = (probs.data()[base + ch * hw + p] - target) * inv;
            }
        }
    }
    Ok((T::lit(total / count as f64), grad))
}

/// Channel concatenation; inputs with batch 1 broadcast across the batch.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let dims: Vec<_> = parts.iter().map(|t| t.dims4()).collect::<Result<_>>()?;
    let (&(_, _, h, w), _) = dims.split_first().ok_or(Error::EmptySet)?;
    let b = dims.iter().map(|d| d.0).max().unwrap_or(1);
    for d in &dims {
        if (d.2, d.3) != (h, w) || !(d.0 == b || d.0 == 1) {
            return Err(Error::Shape(format!("cannot concatenate shapes {dims:?}")));
        }
    }
    let c_total: usize = dims.iter().map(|d| d.1).sum();
    let mut out = Vec::with_capacity(b * c_total * h * w);
    for bi in 0..b {
        for (t, d) in parts.iter().zip(&dims) {
            out.extend_from_slice(t.item(if d.0 == 1 { 0 } else { bi }));
        }
    }
    Tensor::from_vec(&[b, c_total, h, w], out)
}
