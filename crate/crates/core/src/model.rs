//! The full few-shot model: named parameters, cached backbone features and
//! the per-episode forward pass.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::episodes::{Dataset, Episode};
use crate::error::{Error, Result};
use crate::invariance::{self, extract_views, mean_of, Backbone, ConvLayer, Views};
use crate::predict::{self, RispVars, SegHeadVars};
use crate::tensor::{self, masked_avg_pool, Tape, Tensor, Var};

/// Architecture sizes. The backbone is rebuilt from `backbone_seed` unless a
/// checkpoint supplies its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone_seed: u64,
    pub backbone_hidden: usize,
    pub channels: usize,
    /// Output classes of the base learner, background included.
    pub base_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { backbone_seed: 7, backbone_hidden: 16, channels: 32, base_classes: 16 }
    }
}

/// Switches for the optional parts of the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Flags {
    /// Mirrored support: prototype mixing, mirrored-support prior, mirrored adjustment factor.
    pub sri: bool,
    /// Mirrored query view and fusion of the two view predictions.
    pub qri: bool,
    pub base_learner: bool,
    /// Both query views use the original view's prior fusion conv.
    pub share_prior_conv: bool,
}

impl Default for Flags {
    fn default() -> Self {
        Flags { sri: true, qri: true, base_learner: false, share_prior_conv: false }
    }
}

impl Flags {
    pub fn baseline() -> Self {
        Flags { sri: false, qri: false, ..Flags::default() }
    }
}

/// Named parameter tensors in a stable order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore(pub BTreeMap<String, Tensor>);

impl ParamStore {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.0.get(name).ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.0.insert(name.into(), value);
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        Ok(self.get(name)?.item())
    }
}

pub const HEAD_CONVS: [&str; 3] = ["seg.head.conv1", "seg.head.conv2", "seg.head.conv3"];

fn kaiming(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect()).unwrap()
}

fn pair(a: f64, b: f64) -> Tensor {
    Tensor::new(vec![1, 2, 1, 1], vec![a, b]).unwrap()
}

/// Fresh base-learner weights: a pointwise classifier over backbone channels.
pub fn init_base_learner(config: &ModelConfig, seed: u64) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xba5e);
    let c = config.channels;
    let normal = Normal::new(0.0, (1.0 / c as f64).sqrt()).unwrap();
    let w = (0..config.base_classes * c).map(|_| normal.sample(&mut rng)).collect();
    (Tensor::new(vec![config.base_classes, c, 1, 1], w).unwrap(), Tensor::zeros(&[config.base_classes]))
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub flags: Flags,
    pub backbone: Backbone,
    pub params: ParamStore,
    pub alpha: f64,
    pub beta: f64,
}

/// Query-view quantities that do not depend on trainable parameters.
#[derive(Clone, Debug)]
pub struct ViewInputs {
    pub feat: Tensor,
    pub prior_o: Tensor,
    pub prior_f: Tensor,
    pub theta_o: f64,
    pub theta_h: f64,
    pub base_fgmax: Option<Tensor>,
    pub gt: Tensor,
}

/// Everything the trainable part of the model needs for one episode. The
/// original query view comes first; the mirrored one follows when enabled.
#[derive(Clone, Debug)]
pub struct EpisodeInputs {
    pub proto_o: Tensor,
    pub proto_f: Tensor,
    pub views: Vec<ViewInputs>,
}

/// Vars produced by one forward pass.
pub struct Forward {
    pub loss: Var,
    pub l_final: Var,
    pub l_meta: Var,
    /// Final prediction in the original frame.
    pub fused: Var,
    /// Per-view predictions after suppression, each in its own frame.
    pub preds: Vec<Var>,
    /// Per-view fused priors `[1, H, W]`.
    pub priors: Vec<Var>,
}

/// Plain values of one forward pass, for inspection and display.
#[derive(Clone, Debug)]
pub struct Outputs {
    pub loss: f64,
    pub fused: Tensor,
    pub preds: Vec<Tensor>,
    pub priors: Vec<Tensor>,
}

impl Model {
    pub fn new(config: ModelConfig, flags: Flags, seed: u64) -> Self {
        let backbone = Backbone::standard(config.backbone_seed, config.backbone_hidden, config.channels);
        Self::with_backbone(config, flags, backbone, seed)
    }

    /// Initialises every trainable part around an existing extractor.
    pub fn with_backbone(config: ModelConfig, flags: Flags, backbone: Backbone, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = backbone.out_channels();
        let mut p = ParamStore::default();
        let (w1, w2) = if flags.sri { (0.5, 0.5) } else { (1.0, 0.0) };
        p.insert("proto.p1", Tensor::scalar(w1));
        p.insert("proto.p2", Tensor::scalar(w2));
        p.insert("adjust.a1", Tensor::scalar(w1));
        p.insert("adjust.a2", Tensor::scalar(w2));
        p.insert("prior_fuse.orig.weight", pair(2.0, 2.0));
        p.insert("prior_fuse.orig.bias", Tensor::full(&[1], -2.0));
        if flags.qri && !flags.share_prior_conv {
            p.insert("prior_fuse.refl.weight", pair(2.0, 2.0));
            p.insert("prior_fuse.refl.bias", Tensor::full(&[1], -2.0));
        }
        let shapes = [[c, 2 * c + 1, 3, 3], [c, c, 3, 3], [2, c, 1, 1]];
        for (name, shape) in HEAD_CONVS.iter().zip(shapes) {
            p.insert(format!("{name}.weight"), kaiming(&shape, &mut rng));
            p.insert(format!("{name}.bias"), Tensor::zeros(&[shape[0]]));
        }
        if flags.qri {
            for side in ["fg", "bg"] {
                p.insert(format!("risp.{side}.weight"), pair(1.0, 1.0));
                p.insert(format!("risp.{side}.bias"), Tensor::zeros(&[1]));
            }
        }
        if flags.base_learner {
            let (w, b) = init_base_learner(&config, seed);
            p.insert("base.weight", w);
            p.insert("base.bias", b);
        }
        Model { config, flags, backbone, params: p, alpha: 0.5, beta: 0.5 }
    }

    /// Rebuilds a model from [`Model::full_state`] output: extractor, switches
    /// and every parameter. Sizes are read off the weight shapes.
    pub fn from_state(state: ParamStore) -> Result<Self> {
        let mut layers = Vec::new();
        for i in 1.. {
            let Some(weight) = state.0.get(&format!("backbone.conv{i}.weight")) else { break };
            let bias = state.get(&format!("backbone.conv{i}.bias"))?.clone();
            if weight.rank() != 4 {
                return Err(Error::format("checkpoint", format!("backbone.conv{i}.weight is not 4-d")));
            }
            let k = weight.shape()[2];
            layers.push(ConvLayer { weight: weight.clone(), bias, stride: 2, pad: (k - 1) / 2 });
        }
        if layers.is_empty() {
            return Err(Error::format("checkpoint", "no backbone weights"));
        }
        let flag = |name: &str| -> Result<bool> { Ok(state.get(&format!("flags.{name}"))?.item() != 0.0) };
        let flags = Flags {
            sri: flag("sri")?,
            qri: flag("qri")?,
            base_learner: flag("base_learner")?,
            share_prior_conv: flag("share_prior_conv")?,
        };
        let config = ModelConfig {
            backbone_seed: ModelConfig::default().backbone_seed,
            backbone_hidden: layers[0].weight.shape()[0],
            channels: layers.last().unwrap().weight.shape()[0],
            base_classes: state.0.get("base.weight").map_or(ModelConfig::default().base_classes, |w| w.shape()[0]),
        };
        let backbone = Backbone { layers, frozen: true };
        let params = ParamStore(
            state.0.into_iter().filter(|(k, _)| !k.starts_with("backbone.") && !k.starts_with("flags.")).collect(),
        );
        let model = Model { config, flags, backbone, params, alpha: 0.5, beta: 0.5 };
        model.check_params()?;
        Ok(model)
    }

    fn check_params(&self) -> Result<()> {
        let mut required = vec!["proto.p1", "proto.p2", "adjust.a1", "adjust.a2", "prior_fuse.orig.weight"];
        if self.flags.qri {
            required.push("risp.fg.weight");
            if !self.flags.share_prior_conv {
                required.push("prior_fuse.refl.weight");
            }
        }
        if self.flags.base_learner {
            required.push("base.weight");
        }
        for name in required {
            self.params.get(name)?;
        }
        Ok(())
    }

    /// Parameters, switches and the frozen extractor, as written to a checkpoint.
    pub fn full_state(&self) -> ParamStore {
        let mut out = self.params.clone();
        let f = self.flags;
        for (name, on) in
            [("sri", f.sri), ("qri", f.qri), ("base_learner", f.base_learner), ("share_prior_conv", f.share_prior_conv)]
        {
            out.insert(format!("flags.{name}"), Tensor::scalar(on as u8 as f64));
        }
        for (i, layer) in self.backbone.layers.iter().enumerate() {
            out.insert(format!("backbone.conv{}.weight", i + 1), layer.weight.clone());
            out.insert(format!("backbone.conv{}.bias", i + 1), layer.bias.clone());
        }
        out
    }

    /// Parameters updated by meta-training under the current flags.
    pub fn trainable(&self) -> BTreeSet<String> {
        self.params
            .names()
            .filter(|n| !n.starts_with("base."))
            .filter(|n| self.flags.sri || !(n.starts_with("proto.") || n.starts_with("adjust.")))
            .filter(|n| self.flags.base_learner || !n.starts_with("adjust."))
            .cloned()
            .collect()
    }

    /// Support prototypes, priors, adjustment factors and base-class maps of one episode.
    pub fn prepare(&self, supports: &[Views], query: &Views) -> Result<EpisodeInputs> {
        if supports.is_empty() {
            return Err(Error::InvalidArgument("episode without supports".into()));
        }
        let pool = |f: fn(&Views) -> (&Tensor, &Tensor)| -> Result<Tensor> {
            let parts = supports
                .iter()
                .map(|s| {
                    let (feat, mask) = f(s);
                    masked_avg_pool(feat, mask)
                })
                .collect::<Result<Vec<_>>>()?;
            mean_of(&parts)
        };
        let proto_o = pool(|s| (&s.feat, &s.mask))?;
        let proto_f = if self.flags.sri { pool(|s| (&s.feat_h, &s.mask_h))? } else { proto_o.clone() };

        let mut frames = vec![(&query.feat, &query.mask)];
        if self.flags.qri {
            frames.push((&query.feat_h, &query.mask_h));
        }
        let views = frames
            .into_iter()
            .map(|(feat, gt)| self.prepare_view(supports, feat, gt))
            .collect::<Result<Vec<_>>>()?;
        Ok(EpisodeInputs { proto_o, proto_f, views })
    }

    fn prepare_view(&self, supports: &[Views], feat: &Tensor, gt: &Tensor) -> Result<ViewInputs> {
        let k = supports.len() as f64;
        let mut theta_o = 0.0;
        let mut theta_h = 0.0;
        for s in supports {
            theta_o += predict::adjustment_factor(feat, &s.feat, &s.mask)? / k;
            if self.flags.sri {
                theta_h += predict::adjustment_factor(feat, &s.feat_h, &s.mask_h)? / k;
            }
        }
        let (prior_o, prior_f) = if self.flags.sri {
            invariance::raw_priors(feat, supports)?
        } else {
            let parts = supports
                .iter()
                .map(|s| invariance::prior_values(feat, &s.feat, &s.mask))
                .collect::<Result<Vec<_>>>()?;
            let p = mean_of(&parts)?;
            (p.clone(), p)
        };
        if !self.flags.sri {
            theta_h = theta_o;
        }
        let base_fgmax = if self.flags.base_learner {
            let probs = predict::base_probs(feat, self.params.get("base.weight")?, self.params.get("base.bias")?)?;
            Some(predict::base_foreground_max(&probs)?)
        } else {
            None
        };
        Ok(ViewInputs { feat: feat.clone(), prior_o, prior_f, theta_o, theta_h, base_fgmax, gt: gt.clone() })
    }

    /// Puts every parameter on `tape`; names in `trainable` receive gradients.
    pub fn register(&self, tape: &mut Tape, trainable: &BTreeSet<String>) -> BTreeMap<String, Var> {
        self.params.iter().map(|(k, v)| (k.clone(), tape.leaf(v.clone(), trainable.contains(k)))).collect()
    }

    pub fn forward_on(&self, tape: &mut Tape, vars: &BTreeMap<String, Var>, inputs: &EpisodeInputs) -> Result<Forward> {
        let var = |name: &str| {
            vars.get(name).copied().ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))
        };
        let po = tape.constant(inputs.proto_o.clone());
        let pf = tape.constant(inputs.proto_f.clone());
        let proto = invariance::mix_prototypes(tape, po, pf, var("proto.p1")?, var("proto.p2")?)?;
        let head = SegHeadVars {
            conv1: (var("seg.head.conv1.weight")?, var("seg.head.conv1.bias")?),
            conv2: (var("seg.head.conv2.weight")?, var("seg.head.conv2.bias")?),
            conv3: (var("seg.head.conv3.weight")?, var("seg.head.conv3.bias")?),
        };

        let mut preds = Vec::new();
        let mut metas = Vec::new();
        let mut priors = Vec::new();
        for (i, view) in inputs.views.iter().enumerate() {
            let side = if i == 0 || self.flags.share_prior_conv { "orig" } else { "refl" };
            let stacked = tape.constant(invariance::stacked_priors(&view.prior_o, &view.prior_f)?);
            let prior = invariance::fuse_priors_on(
                tape,
                stacked,
                var(&format!("prior_fuse.{side}.weight"))?,
                var(&format!("prior_fuse.{side}.bias"))?,
            )?;
            let feat = tape.constant(view.feat.clone());
            let logits = predict::seg_forward_on(tape, feat, proto, prior, &head)?;
            let meta = tape.softmax2(logits)?;
            let pred = match &view.base_fgmax {
                Some(base) => {
                    let theta =
                        predict::fuse_adjustment_on(tape, view.theta_o, view.theta_h, var("adjust.a1")?, var("adjust.a2")?)?;
                    tape.suppress(meta, base, theta)?
                }
                None => meta,
            };
            priors.push(prior);
            metas.push((meta, view.gt.clone()));
            preds.push(pred);
        }

        let gt = &inputs.views[0].gt;
        let (fused, l_final) = if preds.len() == 2 {
            let convs = RispVars {
                fg: (var("risp.fg.weight")?, var("risp.fg.bias")?),
                bg: (var("risp.bg.weight")?, var("risp.bg.bias")?),
            };
            let fused = predict::risp_fuse_on(tape, preds[0], preds[1], &convs)?;
            let l = predict::loss_final_on(tape, fused, preds[0], preds[1], gt, self.alpha, self.beta)?;
            (fused, l)
        } else {
            (preds[0], tape.bce(preds[0], gt)?)
        };
        let l_meta = predict::loss_meta_on(tape, &metas)?;
        let loss = predict::loss_all_on(tape, l_final, l_meta)?;
        Ok(Forward { loss, l_final, l_meta, fused, preds, priors })
    }

    /// Loss and gradients of every name in `trainable`.
    pub fn loss_and_grads(
        &self,
        inputs: &EpisodeInputs,
        trainable: &BTreeSet<String>,
    ) -> Result<(f64, BTreeMap<String, Tensor>)> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, trainable);
        let fwd = self.forward_on(&mut tape, &vars, inputs)?;
        let loss = tape.value(fwd.loss).item();
        let mut grads = tape.backward(fwd.loss)?;
        let out = trainable
            .iter()
            .filter_map(|n| vars.get(n).and_then(|v| grads.take(*v)).map(|g| (n.clone(), g)))
            .collect();
        Ok((loss, out))
    }

    pub fn outputs(&self, inputs: &EpisodeInputs) -> Result<Outputs> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, &BTreeSet::new());
        let fwd = self.forward_on(&mut tape, &vars, inputs)?;
        let value = |v: Var| tape.value(v).clone();
        Ok(Outputs {
            loss: tape.value(fwd.loss).item(),
            fused: value(fwd.fused),
            preds: fwd.preds.iter().map(|&v| value(v)).collect(),
            priors: fwd.priors.iter().map(|&v| value(v).reshape(&tape.value(v).shape()[1..]).unwrap()).collect(),
        })
    }

    pub fn loss(&self, inputs: &EpisodeInputs) -> Result<f64> {
        Ok(self.outputs(inputs)?.loss)
    }

    /// Binary foreground mask of the query at image resolution.
    pub fn predict_mask(&self, inputs: &EpisodeInputs) -> Result<Tensor> {
        let fused = self.outputs(inputs)?.fused;
        tensor::upsample_nearest(&predict::foreground_mask(&fused)?, self.backbone.stride())
    }
}

/// Extractor outputs of every dataset sample, computed once.
pub struct FeatureBank {
    views: Vec<Option<Views>>,
}

impl FeatureBank {
    /// Samples whose mask vanishes at feature resolution are stored as absent.
    pub fn build(dataset: &Dataset, backbone: &Backbone) -> Result<Self> {
        let views = dataset
            .samples()
            .par_iter()
            .map(|s| match extract_views(&s.image, &s.mask, backbone) {
                Ok(v) => Ok(Some(v)),
                Err(Error::EmptyMask) => Ok(None),
                Err(e) => Err(e),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FeatureBank { views })
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn get(&self, index: usize) -> Result<&Views> {
        self.views
            .get(index)
            .ok_or_else(|| Error::InvalidArgument(format!("sample index {index} out of range")))?
            .as_ref()
            .ok_or(Error::EmptyMask)
    }

    /// Support and query views of `episode`; `mirrored` swaps each image with its mirror.
    pub fn episode(&self, episode: &Episode, mirrored: bool) -> Result<(Vec<Views>, Views)> {
        let pick = |i: usize| -> Result<Views> {
            let v = self.get(i)?;
            Ok(if mirrored { v.mirrored() } else { v.clone() })
        };
        let supports = episode.supports.iter().map(|&i| pick(i)).collect::<Result<Vec<_>>>()?;
        Ok((supports, pick(episode.query)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use std::f64::consts::LN_2;

    fn toy_views(rng: &mut ChaCha8Rng, backbone: &Backbone) -> Views {
        loop {
            let image = Tensor::new(vec![3, 16, 16], (0..768).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
            let mask = Tensor::new(vec![16, 16], (0..256).map(|i| ((i % 16) < 9 && (i / 16) > 5) as u8 as f64).collect())
                .unwrap();
            if let Ok(v) = extract_views(&image, &mask, backbone) {
                return v;
            }
        }
    }

    fn toy_model(flags: Flags) -> Model {
        let config = ModelConfig { backbone_hidden: 4, channels: 4, base_classes: 3, ..ModelConfig::default() };
        let backbone = Backbone::standard(1, 4, 4);
        Model::with_backbone(config, flags, backbone, 3)
    }

    fn all_flags() -> Vec<Flags> {
        let mut out = Vec::new();
        for bits in 0..16u8 {
            out.push(Flags {
                sri: bits & 1 != 0,
                qri: bits & 2 != 0,
                base_learner: bits & 4 != 0,
                share_prior_conv: bits & 8 != 0,
            });
        }
        out
    }

    #[test]
    fn zero_head_loss_is_three_ln2() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut model = toy_model(Flags::default());
        for name in HEAD_CONVS {
            let w = model.params.get(&format!("{name}.weight")).unwrap().shape().to_vec();
            model.params.insert(format!("{name}.weight"), Tensor::zeros(&w));
        }
        let sup = toy_views(&mut rng, &model.backbone);
        let q = toy_views(&mut rng, &model.backbone);
        let inputs = model.prepare(&[sup], &q).unwrap();
        assert!((model.loss(&inputs).unwrap() - 3.0 * LN_2).abs() < 1e-12);
    }

    #[test]
    fn every_flag_combination_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for flags in all_flags() {
            let model = toy_model(flags);
            let sup: Vec<Views> = (0..2).map(|_| toy_views(&mut rng, &model.backbone)).collect();
            let q = toy_views(&mut rng, &model.backbone);
            let inputs = model.prepare(&sup, &q).unwrap();
            assert_eq!(inputs.views.len(), if flags.qri { 2 } else { 1 });
            let (loss, grads) = model.loss_and_grads(&inputs, &model.trainable()).unwrap();
            assert!(loss.is_finite() && loss > 0.0, "{flags:?}");
            assert_eq!(grads.len(), model.trainable().len(), "{flags:?}");
            let mask = model.predict_mask(&inputs).unwrap();
            assert_eq!(mask.shape(), &[16, 16]);
        }
    }

    #[test]
    fn disabled_support_reflection_uses_original_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = toy_model(Flags { sri: false, ..Flags::default() });
        let sup = toy_views(&mut rng, &model.backbone);
        let q = toy_views(&mut rng, &model.backbone);
        let inputs = model.prepare(&[sup], &q).unwrap();
        assert_eq!(inputs.proto_o, inputs.proto_f);
        for v in &inputs.views {
            assert_eq!(v.prior_o, v.prior_f);
            assert_eq!(v.theta_o, v.theta_h);
        }
        assert!(!model.trainable().contains("proto.p1"));
    }

    #[test]
    fn full_state_roundtrip() {
        let model = toy_model(Flags { base_learner: true, ..Flags::default() });
        let back = Model::from_state(model.full_state()).unwrap();
        assert_eq!(back.backbone, model.backbone);
        assert_eq!(back.params, model.params);
        assert_eq!(back.flags, model.flags);
        assert_eq!(back.config, ModelConfig { backbone_seed: ModelConfig::default().backbone_seed, ..model.config.clone() });
        let mut missing = model.full_state();
        missing.0.remove("risp.fg.weight");
        assert!(Model::from_state(missing).is_err());
    }
}
