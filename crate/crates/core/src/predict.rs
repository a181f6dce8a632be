//! Query-side prediction: the segmentation head, scene adjustment factors,
//! base-class suppression, fusion of the two view predictions, and losses.
//!
//! Probability maps are `[2, H, W]` with channel 0 background and channel 1
//! foreground.

use crate::error::{Error, Result};
use crate::tensor::{self, cosine, flip_h, global_avg_pool, masked_avg_pool, Tape, Tensor, Var};

/// Vars of the three-layer segmentation head.
#[derive(Clone, Copy, Debug)]
pub struct SegHeadVars {
    pub conv1: (Var, Var),
    pub conv2: (Var, Var),
    pub conv3: (Var, Var),
}

/// `conv3(relu(conv2(relu(conv1(concat[feat; expand(proto); prior])))))`.
///
/// `conv1` and `conv2` are 3x3 with same padding, `conv3` is 1x1 to two logits.
pub fn seg_forward_on(tape: &mut Tape, feat: Var, proto: Var, prior: Var, head: &SegHeadVars) -> Result<Var> {
    let (_, h, w) = tensor::dims3(tape.value(feat))?;
    let expanded = tape.broadcast(proto, h, w)?;
    let x = tape.concat(&[feat, expanded, prior])?;
    let x = tape.conv2d(x, head.conv1.0, head.conv1.1, 1, 1)?;
    let x = tape.relu(x);
    let x = tape.conv2d(x, head.conv2.0, head.conv2.1, 1, 1)?;
    let x = tape.relu(x);
    tape.conv2d(x, head.conv3.0, head.conv3.1, 1, 0)
}

/// Kernel size of the first two head layers, inferred from the weight shape so
/// that a pointwise test head can reuse [`seg_forward_on`].
fn pad_for(w: &Tensor) -> usize {
    (w.shape()[2] - 1) / 2
}

/// Plain-value head evaluation. Weights may be 3x3 or 1x1.
pub fn seg_forward(feat: &Tensor, proto: &Tensor, prior: &Tensor, weights: &[(Tensor, Tensor); 3]) -> Result<Tensor> {
    let (_, h, w) = tensor::dims3(feat)?;
    let expanded = tensor::broadcast_spatial(proto, h, w)?;
    let mut x = tensor::concat_channels(&[feat, &expanded, prior])?;
    for (i, (wt, b)) in weights.iter().enumerate() {
        x = tensor::conv2d(&x, wt, b, 1, pad_for(wt))?;
        if i < 2 {
            x = tensor::relu(&x);
        }
    }
    Ok(x)
}

/// Scene similarity of a query view and a support view, mapped to `[0, 1]`:
/// `(cos(gap(query), masked_avg(support)) + 1) / 2`.
pub fn adjustment_factor(query: &Tensor, support: &Tensor, support_mask: &Tensor) -> Result<f64> {
    let q = global_avg_pool(query)?;
    let s = masked_avg_pool(support, support_mask)?;
    Ok((cosine(q.data(), s.data()) + 1.0) / 2.0)
}

pub fn fuse_adjustment(theta_o: f64, theta_h: f64, a1: f64, a2: f64) -> f64 {
    a1 * theta_o + a2 * theta_h
}

/// Tape form of [`fuse_adjustment`] with learnable `a1`, `a2`.
pub fn fuse_adjustment_on(tape: &mut Tape, theta_o: f64, theta_h: f64, a1: Var, a2: Var) -> Result<Var> {
    let to = tape.constant(Tensor::scalar(theta_o));
    let th = tape.constant(Tensor::scalar(theta_h));
    let x = tape.mul(a1, to)?;
    let y = tape.mul(a2, th)?;
    tape.add(x, y)
}

/// Per-pixel largest base-class probability, skipping channel 0 (background).
pub fn base_foreground_max(base_probs: &Tensor) -> Result<Tensor> {
    let (n, h, w) = tensor::dims3(base_probs)?;
    if n < 2 {
        return Err(Error::shape("base learner needs at least one foreground class"));
    }
    let plane = h * w;
    let out = (0..plane)
        .map(|p| (1..n).map(|c| base_probs.data()[c * plane + p]).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    Tensor::new(vec![h, w], out)
}

/// Softmax of a pointwise linear classifier over backbone features.
pub fn base_probs(feat: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    tensor::channel_softmax(&tensor::conv2d(feat, weight, bias, 1, 0)?)
}

/// `fg' = fg * clamp(1 - theta * base_fgmax, 0, 1)`, `bg' = 1 - fg'`.
/// `None` for the base map (learner disabled) passes the prediction through.
pub fn apply_base_suppression(meta: &Tensor, base_fgmax: Option<&Tensor>, theta: f64) -> Result<Tensor> {
    let Some(base) = base_fgmax else { return Ok(meta.clone()) };
    let mut tape = Tape::new();
    let m = tape.constant(meta.clone());
    let t = tape.constant(Tensor::scalar(theta));
    let out = tape.suppress(m, base, t)?;
    Ok(tape.value(out).clone())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Frame {
    Original,
    Reflected,
}

/// A two-channel probability map tagged with the frame it lives in.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub probs: Tensor,
    pub frame: Frame,
}

impl Prediction {
    /// Foreground where its probability strictly beats background.
    pub fn foreground_mask(&self) -> Result<Tensor> {
        foreground_mask(&self.probs)
    }
}

pub fn foreground_mask(probs: &Tensor) -> Result<Tensor> {
    let bg = probs.channel(0)?;
    let fg = probs.channel(1)?;
    fg.zip_map(&bg, |f, b| if f > b { 1.0 } else { 0.0 })
}

/// Vars of the two prediction-fusion convolutions, each 2 -> 1 pointwise.
#[derive(Clone, Copy, Debug)]
pub struct RispVars {
    pub fg: (Var, Var),
    pub bg: (Var, Var),
}

/// Fuses the original-frame prediction `r_o` with the reflected-frame
/// prediction `r_f`. `r_f` is mirrored back into the original frame first;
/// foreground and background channels are each mixed by their own pointwise
/// conv, and a channel softmax turns the pair back into probabilities.
pub fn risp_fuse_on(tape: &mut Tape, r_o: Var, r_f: Var, convs: &RispVars) -> Result<Var> {
    let r_f = tape.flip_h(r_f)?;
    let fg_o = tape.channel(r_o, 1)?;
    let fg_f = tape.channel(r_f, 1)?;
    let bg_o = tape.channel(r_o, 0)?;
    let bg_f = tape.channel(r_f, 0)?;
    let fg = tape.concat(&[fg_o, fg_f])?;
    let fg = tape.conv2d(fg, convs.fg.0, convs.fg.1, 1, 0)?;
    let bg = tape.concat(&[bg_o, bg_f])?;
    let bg = tape.conv2d(bg, convs.bg.0, convs.bg.1, 1, 0)?;
    let both = tape.concat(&[bg, fg])?;
    tape.softmax2(both)
}

pub struct RispWeights<'a> {
    pub fg: (&'a Tensor, &'a Tensor),
    pub bg: (&'a Tensor, &'a Tensor),
}

pub fn risp_fuse(r_o: &Prediction, r_f: &Prediction, weights: &RispWeights) -> Result<Prediction> {
    if r_o.frame != Frame::Original || r_f.frame != Frame::Reflected {
        return Err(Error::InvalidArgument(format!(
            "prediction fusion needs (original, reflected) frames, got ({:?}, {:?})",
            r_o.frame, r_f.frame
        )));
    }
    let mut tape = Tape::new();
    let o = tape.constant(r_o.probs.clone());
    let f = tape.constant(r_f.probs.clone());
    let mut c = |t: &Tensor| tape.constant(t.clone());
    let convs = RispVars { fg: (c(weights.fg.0), c(weights.fg.1)), bg: (c(weights.bg.0), c(weights.bg.1)) };
    let out = risp_fuse_on(&mut tape, o, f, &convs)?;
    Ok(Prediction { probs: tape.value(out).clone(), frame: Frame::Original })
}

/// `BCE(fused, gt) + alpha * BCE(r_o, gt) + beta * BCE(r_f, flip(gt))`.
#[allow(clippy::too_many_arguments)]
pub fn loss_final_on(
    tape: &mut Tape,
    fused: Var,
    r_o: Var,
    r_f: Var,
    gt: &Tensor,
    alpha: f64,
    beta: f64,
) -> Result<Var> {
    let gt_h = flip_h(gt)?;
    let l_ff = tape.bce(fused, gt)?;
    let l_o = tape.bce(r_o, gt)?;
    let l_f = tape.bce(r_f, &gt_h)?;
    let l_o = tape.scale(l_o, alpha);
    let l_f = tape.scale(l_f, beta);
    let sum = tape.add(l_ff, l_o)?;
    tape.add(sum, l_f)
}

/// Mean BCE of the pre-suppression view predictions, each against the
/// ground truth in its own frame.
pub fn loss_meta_on(tape: &mut Tape, metas: &[(Var, Tensor)]) -> Result<Var> {
    if metas.is_empty() {
        return Err(Error::InvalidArgument("meta loss over no views".into()));
    }
    let mut total = None;
    for (pred, gt) in metas {
        let l = tape.bce(*pred, gt)?;
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l)?,
        });
    }
    Ok(tape.scale(total.unwrap(), 1.0 / metas.len() as f64))
}

pub fn loss_all_on(tape: &mut Tape, l_final: Var, l_meta: Var) -> Result<Var> {
    tape.add(l_final, l_meta)
}

/// Plain-value form of the final loss.
pub fn loss_final(fused: &Tensor, r_o: &Tensor, r_f: &Tensor, gt: &Tensor, alpha: f64, beta: f64) -> Result<f64> {
    Ok(tensor::bce(fused, gt)? + alpha * tensor::bce(r_o, gt)? + beta * tensor::bce(r_f, &flip_h(gt)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::LN_2;

    fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    }

    fn probs(h: usize, w: usize, rng: &mut impl Rng) -> Tensor {
        tensor::softmax2(&random(&[2, h, w], -3.0, 3.0, rng)).unwrap()
    }

    fn binary(h: usize, w: usize, rng: &mut impl Rng) -> Tensor {
        Tensor::new(vec![h, w], (0..h * w).map(|_| rng.random_range(0..2) as f64).collect()).unwrap()
    }

    #[test]
    fn zero_head_gives_uniform_prediction() {
        let c = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let feat = random(&[c, 4, 4], -1.0, 1.0, &mut rng);
        let proto = random(&[c], -1.0, 1.0, &mut rng);
        let prior = random(&[1, 4, 4], 0.0, 1.0, &mut rng);
        let weights = [
            (Tensor::zeros(&[c, 2 * c + 1, 3, 3]), Tensor::zeros(&[c])),
            (Tensor::zeros(&[c, c, 3, 3]), Tensor::zeros(&[c])),
            (Tensor::zeros(&[2, c, 1, 1]), Tensor::zeros(&[2])),
        ];
        let logits = seg_forward(&feat, &proto, &prior, &weights).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        assert!(tensor::softmax2(&logits).unwrap().data().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn pointwise_head_commutes_with_flip() {
        let c = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let feat = random(&[c, 4, 5], -1.0, 1.0, &mut rng);
        let proto = random(&[c], -1.0, 1.0, &mut rng);
        let prior = random(&[1, 4, 5], 0.0, 1.0, &mut rng);
        let weights = [
            (random(&[c, 2 * c + 1, 1, 1], -1.0, 1.0, &mut rng), random(&[c], -1.0, 1.0, &mut rng)),
            (random(&[c, c, 1, 1], -1.0, 1.0, &mut rng), random(&[c], -1.0, 1.0, &mut rng)),
            (random(&[2, c, 1, 1], -1.0, 1.0, &mut rng), random(&[2], -1.0, 1.0, &mut rng)),
        ];
        let direct = seg_forward(&feat, &proto, &prior, &weights).unwrap();
        let mirrored = seg_forward(&flip_h(&feat).unwrap(), &proto, &flip_h(&prior).unwrap(), &weights).unwrap();
        assert_eq!(mirrored, flip_h(&direct).unwrap());
    }

    #[test]
    fn adjustment_factor_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random(&[4, 3, 3], 0.0, 1.0, &mut rng);
        let full = Tensor::full(&[3, 3], 1.0);
        assert!((adjustment_factor(&f, &f, &full).unwrap() - 1.0).abs() < 1e-12);

        let along = |v: [f64; 2]| Tensor::new(vec![2, 1, 1], v.to_vec()).unwrap();
        let one = Tensor::full(&[1, 1], 1.0);
        assert!((adjustment_factor(&along([1.0, 0.0]), &along([0.0, 2.0]), &one).unwrap() - 0.5).abs() < 1e-15);
        assert!(adjustment_factor(&along([1.0, 2.0]), &along([-1.0, -2.0]), &one).unwrap().abs() < 1e-15);
    }

    #[test]
    fn adjustment_fusion_arithmetic() {
        assert!((fuse_adjustment(0.8, 0.8, 0.5, 0.5) - 0.8).abs() < 1e-15);
        assert_eq!(fuse_adjustment(0.3, 0.9, 1.0, 0.0), 0.3);
        assert!((fuse_adjustment(0.5, 1.0, 0.3, 0.9) - 1.05).abs() < 1e-15);
    }

    #[test]
    fn suppression_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let meta = probs(3, 3, &mut rng);
        let base = random(&[3, 3], 0.0, 1.0, &mut rng);
        assert!(apply_base_suppression(&meta, Some(&base), 0.0).unwrap().max_abs_diff(&meta) < 1e-15);
        assert_eq!(apply_base_suppression(&meta, None, 0.9).unwrap(), meta);

        let mut full = base.clone();
        full.data_mut()[4] = 1.0;
        let out = apply_base_suppression(&meta, Some(&full), 1.0).unwrap();
        assert_eq!(out.data()[9 + 4], 0.0);
        assert_eq!(out.data()[4], 1.0);

        for _ in 0..20 {
            let meta = probs(3, 3, &mut rng);
            let base = random(&[3, 3], 0.0, 1.0, &mut rng);
            let theta = rng.random_range(0.0..1.0);
            let out = apply_base_suppression(&meta, Some(&base), theta).unwrap();
            for p in 0..9 {
                let fg = meta.data()[9 + p] * (1.0 - theta * base.data()[p]);
                assert!((out.data()[9 + p] - fg).abs() < 1e-12);
                assert!((out.data()[p] - (1.0 - fg)).abs() < 1e-12);
                assert!(out.data()[9 + p] <= meta.data()[9 + p]);
            }
        }
    }

    fn pred(probs: Tensor, frame: Frame) -> Prediction {
        Prediction { probs, frame }
    }

    #[test]
    fn risp_consistent_views_keep_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r_o = probs(4, 5, &mut rng);
        let r_f = flip_h(&r_o).unwrap();
        let half = Tensor::new(vec![1, 2, 1, 1], vec![0.5, 0.5]).unwrap();
        let zero = Tensor::zeros(&[1]);
        let w = RispWeights { fg: (&half, &zero), bg: (&half, &zero) };
        let fused = risp_fuse(&pred(r_o.clone(), Frame::Original), &pred(r_f, Frame::Reflected), &w).unwrap();
        assert_eq!(fused.foreground_mask().unwrap(), foreground_mask(&r_o).unwrap());

        let select = Tensor::new(vec![1, 2, 1, 1], vec![1.0, 0.0]).unwrap();
        let w = RispWeights { fg: (&select, &zero), bg: (&select, &zero) };
        let other = probs(4, 5, &mut rng);
        let fused = risp_fuse(&pred(r_o.clone(), Frame::Original), &pred(other, Frame::Reflected), &w).unwrap();
        assert_eq!(fused.foreground_mask().unwrap(), foreground_mask(&r_o).unwrap());

        let err = risp_fuse(&pred(r_o.clone(), Frame::Original), &pred(r_o, Frame::Original), &w);
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn risp_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let (r_o, r_f) = (probs(3, 4, &mut rng), probs(3, 4, &mut rng));
            let fw = random(&[1, 2, 1, 1], -2.0, 2.0, &mut rng);
            let fb = random(&[1], -1.0, 1.0, &mut rng);
            let bw = random(&[1, 2, 1, 1], -2.0, 2.0, &mut rng);
            let bb = random(&[1], -1.0, 1.0, &mut rng);
            let w = RispWeights { fg: (&fw, &fb), bg: (&bw, &bb) };
            let fused =
                risp_fuse(&pred(r_o.clone(), Frame::Original), &pred(r_f.clone(), Frame::Reflected), &w).unwrap();
            let sum = fused.probs.channel(0).unwrap().zip_map(&fused.probs.channel(1).unwrap(), |a, b| a + b).unwrap();
            assert!(sum.data().iter().all(|s| (s - 1.0).abs() < 1e-12));
            for y in 0..3 {
                for x in 0..4 {
                    let p = y * 4 + x;
                    let q = y * 4 + (3 - x);
                    let fg = fw.data()[0] * r_o.data()[12 + p] + fw.data()[1] * r_f.data()[12 + q] + fb.data()[0];
                    let bg = bw.data()[0] * r_o.data()[p] + bw.data()[1] * r_f.data()[q] + bb.data()[0];
                    let pf = fg.exp() / (fg.exp() + bg.exp());
                    assert!((fused.probs.data()[12 + p] - pf).abs() < 1e-12);
                }
            }

            // Swapping the views and each conv's input weights changes nothing.
            let fw_s = Tensor::new(vec![1, 2, 1, 1], vec![fw.data()[1], fw.data()[0]]).unwrap();
            let bw_s = Tensor::new(vec![1, 2, 1, 1], vec![bw.data()[1], bw.data()[0]]).unwrap();
            let ws = RispWeights { fg: (&fw_s, &fb), bg: (&bw_s, &bb) };
            let swapped = risp_fuse(
                &pred(flip_h(&r_f).unwrap(), Frame::Original),
                &pred(flip_h(&r_o).unwrap(), Frame::Reflected),
                &ws,
            )
            .unwrap();
            assert!(swapped.probs.max_abs_diff(&fused.probs) < 1e-12);
        }
    }

    #[test]
    fn loss_constants() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let gt = binary(4, 4, &mut rng);
        let uniform = Tensor::full(&[2, 4, 4], 0.5);
        let l = loss_final(&uniform, &uniform, &uniform, &gt, 0.5, 0.5).unwrap();
        assert!((l - 2.0 * LN_2).abs() < 1e-12);

        let perfect = |m: &Tensor| {
            let fg = m.map(|g| if g > 0.5 { 1.0 - 1e-7 } else { 1e-7 });
            let bg = fg.map(|p| 1.0 - p);
            tensor::concat_channels(&[&bg, &fg]).unwrap()
        };
        let gt_h = flip_h(&gt).unwrap();
        let l = loss_final(&perfect(&gt), &perfect(&gt), &perfect(&gt_h), &gt, 0.5, 0.5).unwrap();
        assert!((0.0..=3e-7).contains(&l));

        let mut tape = Tape::new();
        let u = tape.constant(uniform.clone());
        let lf = loss_final_on(&mut tape, u, u, u, &gt, 0.5, 0.5).unwrap();
        let lm = loss_meta_on(&mut tape, &[(u, gt.clone()), (u, gt_h.clone())]).unwrap();
        let all = loss_all_on(&mut tape, lf, lm).unwrap();
        assert!((tape.value(all).item() - 3.0 * LN_2).abs() < 1e-12);

        let zero = tape.constant(Tensor::scalar(0.0));
        let same = loss_all_on(&mut tape, lf, zero).unwrap();
        assert_eq!(tape.value(same).item(), tape.value(lf).item());
    }

    #[test]
    fn loss_matches_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let gt = binary(3, 5, &mut rng);
            let (ff, ro, rf) = (probs(3, 5, &mut rng), probs(3, 5, &mut rng), probs(3, 5, &mut rng));
            let mut tape = Tape::new();
            let (a, b, c) = (tape.constant(ff.clone()), tape.constant(ro.clone()), tape.constant(rf.clone()));
            let lf = loss_final_on(&mut tape, a, b, c, &gt, 0.5, 0.5).unwrap();
            let scalar = |p: &Tensor, g: &Tensor| {
                let mut s = 0.0;
                for i in 0..15 {
                    let t = g.data()[i];
                    s -= t * p.data()[15 + i].ln() + (1.0 - t) * p.data()[i].ln();
                }
                s / 15.0
            };
            let gt_h = flip_h(&gt).unwrap();
            let expect = scalar(&ff, &gt) + 0.5 * scalar(&ro, &gt) + 0.5 * scalar(&rf, &gt_h);
            assert!((tape.value(lf).item() - expect).abs() < 1e-12);
            assert!(tape.value(lf).item() >= 0.0);
        }
    }
}
