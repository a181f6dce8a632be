//! Support branch and prior-mask generation.
//!
//! Every image is processed twice: as given and mirrored. Support prototypes
//! from both versions are mixed with two learnable weights, and each query
//! view gets a prior mask built from its best cosine match against the
//! foreground features of both support versions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{self, conv2d, flip_h, gemm, masked_avg_pool, min_max_normalize, Tape, Tensor, Var};

/// One convolution of the feature extractor, followed by ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl ConvLayer {
    /// He-normal weights, zero bias.
    pub fn kaiming(cin: usize, cout: usize, k: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        let weight = (0..cout * cin * k * k).map(|_| normal.sample(rng)).collect();
        ConvLayer {
            weight: Tensor::new(vec![cout, cin, k, k], weight).unwrap(),
            bias: Tensor::zeros(&[cout]),
            stride,
            pad: (k - 1) / 2,
        }
    }
}

/// Frozen convolutional feature extractor.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub layers: Vec<ConvLayer>,
    pub frozen: bool,
}

impl Backbone {
    /// Two 3x3 stride-2 convolutions (`3 -> hidden -> out`), each with ReLU.
    /// A 64x64 image becomes an `out x 16 x 16` feature map.
    pub fn standard(seed: u64, hidden: usize, out: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Backbone {
            layers: vec![ConvLayer::kaiming(3, hidden, 3, 2, &mut rng), ConvLayer::kaiming(hidden, out, 3, 2, &mut rng)],
            frozen: true,
        }
    }

    /// 1x1 convolutions only. Every output pixel depends on its own input
    /// pixel, so the extractor commutes with any pixel permutation, mirroring
    /// included.
    pub fn pixelwise(seed: u64, hidden: usize, out: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Backbone {
            layers: vec![ConvLayer::kaiming(3, hidden, 1, 1, &mut rng), ConvLayer::kaiming(hidden, out, 1, 1, &mut rng)],
            frozen: true,
        }
    }

    /// Input pixels per feature pixel along each axis.
    pub fn stride(&self) -> usize {
        self.layers.iter().map(|l| l.stride).product()
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(3, |l| l.weight.shape()[0])
    }

    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        let mut x = image.clone();
        for layer in &self.layers {
            x = tensor::relu(&conv2d(&x, &layer.weight, &layer.bias, layer.stride, layer.pad)?);
        }
        Ok(x)
    }
}

/// Area-averages `factor x factor` blocks and keeps those at least half covered.
pub fn downsample_mask(mask: &Tensor, factor: usize) -> Result<Tensor> {
    let (h, w) = match *mask.shape() {
        [h, w] => (h, w),
        _ => return Err(Error::shape(format!("mask must be [H, W], got {:?}", mask.shape()))),
    };
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::shape(format!("mask {h}x{w} not divisible by {factor}")));
    }
    let (oh, ow) = (h / factor, w / factor);
    let area = (factor * factor) as f64;
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut s = 0.0;
            for dy in 0..factor {
                for dx in 0..factor {
                    s += mask.data()[(y * factor + dy) * w + x * factor + dx];
                }
            }
            out[y * ow + x] = if s / area >= 0.5 { 1.0 } else { 0.0 };
        }
    }
    Tensor::new(vec![oh, ow], out)
}

/// Features and feature-resolution masks of an image and of its mirror.
#[derive(Clone, Debug, PartialEq)]
pub struct Views {
    pub feat: Tensor,
    pub feat_h: Tensor,
    pub mask: Tensor,
    pub mask_h: Tensor,
}

impl Views {
    /// The same image seen through a mirror: roles of the two views swap.
    pub fn mirrored(&self) -> Views {
        Views {
            feat: self.feat_h.clone(),
            feat_h: self.feat.clone(),
            mask: self.mask_h.clone(),
            mask_h: self.mask.clone(),
        }
    }
}

pub fn extract_views(image: &Tensor, mask: &Tensor, backbone: &Backbone) -> Result<Views> {
    let feat = backbone.forward(image)?;
    let feat_h = backbone.forward(&flip_h(image)?)?;
    let small = downsample_mask(mask, backbone.stride())?;
    if small.sum() <= 0.0 {
        return Err(Error::EmptyMask);
    }
    let mask_h = flip_h(&small)?;
    Ok(Views { feat, feat_h, mask: small, mask_h })
}

/// `p1 * P_o + p2 * P_f` where each prototype is the masked average of its view.
pub fn reflection_invariance_prototype(
    feat: &Tensor,
    mask: &Tensor,
    feat_h: &Tensor,
    mask_h: &Tensor,
    p1: f64,
    p2: f64,
) -> Result<Tensor> {
    let po = masked_avg_pool(feat, mask)?;
    let pf = masked_avg_pool(feat_h, mask_h)?;
    po.zip_map(&pf, |o, f| p1 * o + p2 * f)
}

/// Tape form of the prototype mix, with `p1` and `p2` as scalar vars.
pub fn mix_prototypes(tape: &mut Tape, po: Var, pf: Var, p1: Var, p2: Var) -> Result<Var> {
    let a = tape.scale_by(po, p1)?;
    let b = tape.scale_by(pf, p2)?;
    tape.add(a, b)
}

/// For every query pixel, the highest cosine similarity to any support
/// foreground pixel. Output is `[H, W]` with values in `[-1, 1]`.
pub fn prior_values(query: &Tensor, support: &Tensor, support_mask: &Tensor) -> Result<Tensor> {
    let (c, h, w) = match *query.shape() {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::shape(format!("query features must be [C, H, W], got {:?}", query.shape()))),
    };
    let [sc, sh, sw] = *support.shape() else {
        return Err(Error::shape(format!("support features must be [C, H, W], got {:?}", support.shape())));
    };
    if sc != c || support_mask.shape() != [sh, sw] {
        return Err(Error::shape("support features, mask and query disagree"));
    }
    let splane = sh * sw;
    let fg: Vec<usize> = (0..splane).filter(|&p| support_mask.data()[p] > 0.5).collect();
    if fg.is_empty() {
        return Err(Error::EmptyMask);
    }

    // Unit-normalised support vectors, one row per foreground pixel. Zero
    // vectors stay zero and so score 0, matching `tensor::cosine`.
    let mut sup = vec![0.0; fg.len() * c];
    for (row, &p) in fg.iter().enumerate() {
        let v = &mut sup[row * c..(row + 1) * c];
        for (ch, slot) in v.iter_mut().enumerate() {
            *slot = support.data()[ch * splane + p];
        }
        let n = tensor::norm(v);
        if n >= tensor::COSINE_EPS {
            v.iter_mut().for_each(|x| *x /= n);
        } else {
            v.fill(0.0);
        }
    }

    let plane = h * w;
    let mut dots = vec![0.0; plane * fg.len()];
    // [plane x C] (stored as C x plane) times [C x M] (stored as M x C).
    gemm(plane, c, fg.len(), query.data(), true, &sup, true, &mut dots, 0.0);

    let mut out = vec![0.0; plane];
    for (p, o) in out.iter_mut().enumerate() {
        let qn = (0..c).map(|ch| query.data()[ch * plane + p].powi(2)).sum::<f64>().sqrt();
        if qn < tensor::COSINE_EPS {
            continue;
        }
        let (_, best) = tensor::argmax(&dots[p * fg.len()..(p + 1) * fg.len()]);
        *o = (best / qn).clamp(-1.0, 1.0);
    }
    Tensor::new(vec![h, w], out)
}

/// Element-wise mean of same-shape tensors.
pub fn mean_of(parts: &[Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::InvalidArgument("mean of nothing".into()))?;
    let mut acc = first.clone();
    for p in &parts[1..] {
        acc = acc.zip_map(p, |a, b| a + b)?;
    }
    let n = parts.len() as f64;
    Ok(acc.map(|v| v / n))
}

/// Raw original-support and mirrored-support priors of one query view,
/// averaged over the K supports.
pub fn raw_priors(query_feat: &Tensor, supports: &[Views]) -> Result<(Tensor, Tensor)> {
    let orig = supports.iter().map(|s| prior_values(query_feat, &s.feat, &s.mask)).collect::<Result<Vec<_>>>()?;
    let refl = supports.iter().map(|s| prior_values(query_feat, &s.feat_h, &s.mask_h)).collect::<Result<Vec<_>>>()?;
    Ok((mean_of(&orig)?, mean_of(&refl)?))
}

/// The two min-max normalised priors stacked in concat order: mirrored-support prior first.
pub fn stacked_priors(prior_o: &Tensor, prior_f: &Tensor) -> Result<Tensor> {
    tensor::concat_channels(&[&min_max_normalize(prior_f), &min_max_normalize(prior_o)])
}

/// Fuses the original-support prior `prior_o` and mirrored-support prior
/// `prior_f` of one query view. Each map is min-max normalised, they are
/// stacked as `(prior_f, prior_o)`, mixed by a 2-to-1 pointwise convolution and
/// squashed with a sigmoid. Returns `[1, H, W]` in `[0, 1]`.
pub fn fuse_priors_on(tape: &mut Tape, stacked: Var, weight: Var, bias: Var) -> Result<Var> {
    let mixed = tape.conv2d(stacked, weight, bias, 1, 0)?;
    Ok(tape.sigmoid(mixed))
}

pub fn fuse_priors(prior_o: &Tensor, prior_f: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    tensor::same_shape(prior_o, prior_f)?;
    let stacked = stacked_priors(prior_o, prior_f)?;
    let mixed = conv2d(&stacked, weight, bias, 1, 0)?;
    let fused = tensor::sigmoid(&mixed);
    fused.reshape(prior_o.shape())
}

/// Prior generation for one query view against K supports, with that view's fusion conv.
pub fn ripmg(query_feat: &Tensor, supports: &[Views], weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (prior_o, prior_f) = raw_priors(query_feat, supports)?;
    fuse_priors(&prior_o, &prior_f, weight, bias)
}
