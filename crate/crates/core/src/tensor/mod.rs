//! Dense `f64` tensors, the forward kernels the pipeline needs, and a small
//! reverse-mode tape over them.
//!
//! Feature maps are laid out channels, then height, then width. The kernels in
//! this module are plain functions on immutable values; [`Tape`] records the
//! same kernels together with whatever it needs to run them backwards.

mod gemm;
mod io;
mod tape;

pub use io::{read_tensor, write_tensor, TENSOR_MAGIC};
pub use tape::{Grads, OpKind, Tape, Var};

pub(crate) use gemm::gemm;

use crate::error::{Error, Result};

/// Norms below this are treated as zero by [`cosine`].
pub const COSINE_EPS: f64 = 1e-12;
/// Probability clamp applied before every logarithm in the losses.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        same_shape(self, other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Channel `c` of a `[C, H, W]` tensor as an `[H, W]` map.
    pub fn channel(&self, c: usize) -> Result<Tensor> {
        let (ch, h, w) = dims3(self)?;
        if c >= ch {
            return Err(Error::shape(format!("channel {c} out of range for {ch} channels")));
        }
        let plane = h * w;
        Ok(Tensor { shape: vec![h, w], data: self.data[c * plane..(c + 1) * plane].to_vec() })
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub(crate) fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(format!("shape mismatch {:?} vs {:?}", a.shape, b.shape)));
    }
    Ok(())
}

pub(crate) fn dims3(t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::shape(format!("expected [C, H, W], got {:?}", t.shape()))),
    }
}

pub(crate) fn dims2(t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [h, w] => Ok((h, w)),
        _ => Err(Error::shape(format!("expected [H, W], got {:?}", t.shape()))),
    }
}

/// Mirrors the last (width) axis.
pub fn flip_h(t: &Tensor) -> Result<Tensor> {
    if t.rank() < 2 {
        return Err(Error::shape(format!("flip_h needs rank >= 2, got {:?}", t.shape())));
    }
    let w = *t.shape.last().unwrap();
    let mut data = Vec::with_capacity(t.len());
    for row in t.data.chunks(w.max(1)) {
        data.extend(row.iter().rev());
    }
    Ok(Tensor { shape: t.shape.clone(), data })
}

/// Spatial output size of a convolution.
pub fn conv_out_size(size: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 || size + 2 * pad < kernel {
        return Err(Error::shape(format!(
            "conv with size {size}, kernel {kernel}, stride {stride}, pad {pad} has no output"
        )));
    }
    Ok((size + 2 * pad - kernel) / stride + 1)
}

pub(crate) struct ConvGeometry {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    pub fn new(x: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Self> {
        let (cin, h, w) = dims3(x)?;
        let [cout, wcin, kh, kw] = *weight.shape() else {
            return Err(Error::shape(format!("conv weight must be 4-d, got {:?}", weight.shape())));
        };
        if wcin != cin {
            return Err(Error::shape(format!("conv expects {wcin} input channels, got {cin}")));
        }
        if kh != kw {
            return Err(Error::shape(format!("conv kernel must be square, got {kh}x{kw}")));
        }
        if bias.shape() != [cout] {
            return Err(Error::shape(format!("conv bias must be [{cout}], got {:?}", bias.shape())));
        }
        let oh = conv_out_size(h, kh, stride, pad)?;
        let ow = conv_out_size(w, kw, stride, pad)?;
        Ok(ConvGeometry { cin, h, w, cout, k: kh, stride, pad, oh, ow })
    }

    /// True when the input itself already is the column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn patch_len(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let positions = self.oh * self.ow;
        let mut cols = vec![0.0; self.patch_len() * positions];
        for ci in 0..self.cin {
            for kh in 0..self.k {
                for kw in 0..self.k {
                    let row = (ci * self.k + kh) * self.k + kw;
                    let dst = &mut cols[row * positions..(row + 1) * positions];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + kh) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src = &x[(ci * self.h + iy as usize) * self.w..][..self.w];
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kw) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[oy * self.ow + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    pub fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let positions = self.oh * self.ow;
        let mut x = vec![0.0; self.cin * self.h * self.w];
        for ci in 0..self.cin {
            for kh in 0..self.k {
                for kw in 0..self.k {
                    let row = (ci * self.k + kh) * self.k + kw;
                    let src = &cols[row * positions..(row + 1) * positions];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + kh) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let base = (ci * self.h + iy as usize) * self.w;
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kw) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                x[base + ix as usize] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

pub(crate) fn conv2d_with_cols(
    geo: &ConvGeometry,
    cols: &[f64],
    weight: &Tensor,
    bias: &Tensor,
) -> Tensor {
    let positions = geo.oh * geo.ow;
    let mut out = Vec::with_capacity(geo.cout * positions);
    for &b in bias.data() {
        out.extend(std::iter::repeat_n(b, positions));
    }
    gemm(geo.cout, geo.patch_len(), positions, weight.data(), false, cols, false, &mut out, 1.0);
    Tensor { shape: vec![geo.cout, geo.oh, geo.ow], data: out }
}

/// 2-d cross-correlation of a `[Cin, H, W]` input with a `[Cout, Cin, k, k]` kernel.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let geo = ConvGeometry::new(x, weight, bias, stride, pad)?;
    if geo.is_pointwise() {
        return Ok(conv2d_with_cols(&geo, x.data(), weight, bias));
    }
    let cols = geo.im2col(x.data());
    Ok(conv2d_with_cols(&geo, &cols, weight, bias))
}

/// Mask-weighted spatial mean of every channel.
pub fn masked_avg_pool(f: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let (c, h, w) = dims3(f)?;
    if mask.shape() != [h, w] {
        return Err(Error::shape(format!("mask {:?} does not match features {:?}", mask.shape(), f.shape())));
    }
    let area: f64 = mask.sum();
    if area <= 0.0 {
        return Err(Error::EmptyMask);
    }
    let plane = h * w;
    let out = (0..c)
        .map(|ch| {
            let fc = &f.data[ch * plane..(ch + 1) * plane];
            fc.iter().zip(mask.data()).map(|(a, m)| a * m).sum::<f64>() / area
        })
        .collect();
    Ok(Tensor::from_vec(out))
}

/// Per-channel spatial mean.
pub fn global_avg_pool(f: &Tensor) -> Result<Tensor> {
    let (c, h, w) = dims3(f)?;
    let plane = (h * w) as f64;
    Ok(Tensor::from_vec(
        f.data.chunks(h * w).take(c).map(|p| p.iter().sum::<f64>() / plane).collect(),
    ))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity of two vectors; zero when either is (numerically) zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na < COSINE_EPS || nb < COSINE_EPS {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Softmax across the channel axis of a `[N, H, W]` tensor.
pub fn channel_softmax(logits: &Tensor) -> Result<Tensor> {
    let (n, h, w) = dims3(logits)?;
    let plane = h * w;
    let mut out = vec![0.0; logits.len()];
    for p in 0..plane {
        let max = (0..n).map(|c| logits.data[c * plane + p]).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for c in 0..n {
            let e = (logits.data[c * plane + p] - max).exp();
            out[c * plane + p] = e;
            total += e;
        }
        for c in 0..n {
            out[c * plane + p] /= total;
        }
    }
    Ok(Tensor { shape: logits.shape.clone(), data: out })
}

/// Two-way (background, foreground) softmax.
pub fn softmax2(logits: &Tensor) -> Result<Tensor> {
    if logits.shape().first() != Some(&2) {
        return Err(Error::shape(format!("softmax2 expects [2, H, W], got {:?}", logits.shape())));
    }
    channel_softmax(logits)
}

pub(crate) fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Binary cross-entropy of a `[2, H, W]` probability map (channel 1 is
/// foreground) against a `{0, 1}` mask, averaged over pixels.
pub fn bce(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let (c, h, w) = dims3(pred)?;
    if c != 2 || gt.shape() != [h, w] {
        return Err(Error::shape(format!("bce of {:?} against {:?}", pred.shape(), gt.shape())));
    }
    let plane = h * w;
    let (bg, fg) = pred.data.split_at(plane);
    let total: f64 = gt
        .data()
        .iter()
        .enumerate()
        .map(|(i, &g)| g * clamp_prob(fg[i]).ln() + (1.0 - g) * clamp_prob(bg[i]).ln())
        .sum();
    Ok(-total / plane as f64)
}

/// Mean negative log-likelihood of per-pixel class labels under a `[N, H, W]` probability map.
pub fn cross_entropy(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, h, w) = dims3(probs)?;
    let plane = h * w;
    if labels.len() != plane {
        return Err(Error::shape(format!("{} labels for {plane} pixels", labels.len())));
    }
    let mut total = 0.0;
    for (p, &l) in labels.iter().enumerate() {
        if l >= n {
            return Err(Error::InvalidArgument(format!("label {l} out of range for {n} classes")));
        }
        total -= clamp_prob(probs.data[l * plane + p]).ln();
    }
    Ok(total / plane as f64)
}

pub fn relu(t: &Tensor) -> Tensor {
    t.map(|v| v.max(0.0))
}

pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(t: &Tensor) -> Tensor {
    t.map(sigmoid_scalar)
}

/// Index and value of the largest element; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &v) in values.iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

pub(crate) fn argmin(values: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, &v) in values.iter().enumerate() {
        if v < best.1 {
            best = (i, v);
        }
    }
    best
}

/// Rescales a map to `[0, 1]` by its own min and max. A constant map becomes all zeros.
pub fn min_max_normalize(t: &Tensor) -> Tensor {
    let (_, lo) = argmin(t.data());
    let (_, hi) = argmax(t.data());
    let range = hi - lo;
    if range.is_nan() || range <= 0.0 {
        return Tensor::zeros(t.shape());
    }
    t.map(|v| (v - lo) / range)
}

/// Repeats a `[C]` vector over an `h x w` grid.
pub fn broadcast_spatial(v: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    if v.rank() != 1 {
        return Err(Error::shape(format!("broadcast expects a vector, got {:?}", v.shape())));
    }
    let mut data = Vec::with_capacity(v.len() * h * w);
    for &x in v.data() {
        data.extend(std::iter::repeat_n(x, h * w));
    }
    Ok(Tensor { shape: vec![v.len(), h, w], data })
}

/// Stacks `[C_i, H, W]` tensors (or `[H, W]` maps, as one channel) along the channel axis.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let mut hw = None;
    let mut channels = 0;
    for p in parts {
        let (c, h, w) = match *p.shape() {
            [c, h, w] => (c, h, w),
            [h, w] => (1, h, w),
            _ => return Err(Error::shape(format!("cannot concat tensor of shape {:?}", p.shape()))),
        };
        if *hw.get_or_insert((h, w)) != (h, w) {
            return Err(Error::shape("concat inputs differ in spatial size"));
        }
        channels += c;
    }
    let (h, w) = hw.ok_or_else(|| Error::shape("concat of nothing"))?;
    let mut data = Vec::with_capacity(channels * h * w);
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Ok(Tensor { shape: vec![channels, h, w], data })
}

/// Nearest-neighbour upsampling of an `[H, W]` map by an integer factor.
pub fn upsample_nearest(map: &Tensor, factor: usize) -> Result<Tensor> {
    let (h, w) = dims2(map)?;
    let (oh, ow) = (h * factor, w * factor);
    let mut data = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        for x in 0..ow {
            data.push(map.data[(y / factor) * w + x / factor]);
        }
    }
    Ok(Tensor { shape: vec![oh, ow], data })
}
