//! Training: the base learner with per-pixel cross-entropy, then the
//! few-shot model with SGD over accumulated episode gradients. Also holds the
//! finite-difference gradient check.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint;
use crate::episodes::{Dataset, EpisodeSampler, FoldSplit, Phase};
use crate::error::{Error, Result};
use crate::invariance::{extract_views, Backbone, Views};
use crate::metrics::{evaluate, ModelSegmenter};
use crate::model::{init_base_learner, EpisodeInputs, FeatureBank, Flags, Model, ModelConfig};
use crate::tensor::{self, OpKind, Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub fold: usize,
    pub shots: usize,
    pub seed: u64,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    /// Episodes whose gradients are averaged per SGD step.
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Mirror each training episode wholesale with probability 0.5.
    pub flip_augment: bool,
    /// Test episodes scored after each epoch for the log; 0 skips scoring.
    pub val_episodes: usize,
    /// Directory for the log and per-epoch checkpoints.
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            fold: 0,
            shots: 1,
            seed: 0,
            epochs: 20,
            episodes_per_epoch: 400,
            batch: 8,
            lr: 5e-2,
            momentum: 0.0,
            flip_augment: false,
            val_episodes: 100,
            out_dir: None,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::InvalidArgument("batch must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainSummary {
    pub epoch_losses: Vec<f64>,
    pub val_miou: Vec<Option<f64>>,
}

/// Plain SGD with optional heavy-ball momentum.
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd { lr, momentum, velocity: BTreeMap::new() }
    }

    pub fn step(&mut self, params: &mut BTreeMap<String, Tensor>, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, g) in grads {
            let p = params.get_mut(name).ok_or_else(|| Error::InvalidArgument(format!("no parameter {name}")))?;
            let dir = if self.momentum == 0.0 {
                g.clone()
            } else {
                let v = match self.velocity.remove(name) {
                    Some(v) => v.zip_map(g, |v, g| self.momentum * v + g)?,
                    None => g.clone(),
                };
                self.velocity.insert(name.clone(), v.clone());
                v
            };
            *p = p.zip_map(&dir, |p, d| p - self.lr * d)?;
        }
        Ok(())
    }
}

fn check_finite(loss: f64, grads: &BTreeMap<String, Tensor>, context: &str) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Diverged(format!("{context}: loss is {loss}")));
    }
    if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
        return Err(Error::Diverged(format!("{context}: gradient of {name} is not finite")));
    }
    Ok(())
}

/// Mean loss and mean gradients over `inputs`, summed in index order.
pub fn batch_gradients(
    model: &Model,
    inputs: &[EpisodeInputs],
    trainable: &BTreeSet<String>,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let parts = inputs.par_iter().map(|x| model.loss_and_grads(x, trainable)).collect::<Result<Vec<_>>>()?;
    let n = parts.len() as f64;
    let mut loss = 0.0;
    let mut acc: BTreeMap<String, Tensor> = BTreeMap::new();
    for (l, grads) in parts {
        loss += l;
        for (name, g) in grads {
            match acc.get_mut(&name) {
                Some(a) => *a = a.zip_map(&g, |a, b| a + b)?,
                None => {
                    acc.insert(name, g);
                }
            }
        }
    }
    for g in acc.values_mut() {
        *g = g.map(|v| v / n);
    }
    Ok((loss / n, acc))
}

fn write_log_line(path: &PathBuf, line: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new().append(true).create(true).open(path).map_err(Error::at(path))?;
    writeln!(f, "{line}").map_err(Error::at(path))
}

/// Meta-trains `model` in place on training episodes of the configured fold.
pub fn train_meta(model: &mut Model, dataset: &Dataset, bank: &FeatureBank, cfg: &TrainConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    if !model.backbone.frozen {
        return Err(Error::InvalidArgument("the feature extractor must stay frozen".into()));
    }
    let split = crate::episodes::split_folds(cfg.fold)?;
    let sampler = EpisodeSampler::new(dataset, &split, Phase::Train, cfg.shots, model.backbone.stride())?;
    let trainable = model.trainable();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sgd = Sgd::new(cfg.lr, cfg.momentum);
    let steps = cfg.episodes_per_epoch.div_ceil(cfg.batch);

    let log_path = match &cfg.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(Error::at(dir))?;
            let p = dir.join("train_log.csv");
            fs::write(&p, "epoch,mean_loss,miou_val\n").map_err(Error::at(&p))?;
            Some(p)
        }
        None => None,
    };

    let mut summary = TrainSummary::default();
    for epoch in 1..=cfg.epochs {
        let mut total = 0.0;
        for step in 0..steps {
            let mut inputs = Vec::with_capacity(cfg.batch);
            while inputs.len() < cfg.batch {
                let episode = sampler.sample(&mut rng)?;
                let mirrored = cfg.flip_augment && rng.random_bool(0.5);
                let (supports, query) = bank.episode(&episode, mirrored)?;
                match model.prepare(&supports, &query) {
                    Ok(x) => inputs.push(x),
                    Err(Error::EmptyMask) => log::debug!("resampling episode with an empty mask"),
                    Err(e) => return Err(e),
                }
            }
            let (loss, grads) = batch_gradients(model, &inputs, &trainable)?;
            check_finite(loss, &grads, &format!("epoch {epoch} step {}", step + 1))?;
            sgd.step(&mut model.params.0, &grads)?;
            total += loss;
        }
        let mean_loss = total / steps.max(1) as f64;
        let miou = if cfg.val_episodes > 0 {
            let seg = ModelSegmenter { model, bank };
            let r = evaluate(&seg, dataset, &split, cfg.shots, model.backbone.stride(), cfg.val_episodes, cfg.seed ^ 0x5eed)?;
            Some(r.miou)
        } else {
            None
        };
        log::info!("epoch {epoch}: loss {mean_loss:.5} val mIoU {}", miou.map_or("-".into(), |m| format!("{m:.2}")));
        if let (Some(path), Some(dir)) = (&log_path, &cfg.out_dir) {
            write_log_line(path, &format!("{epoch},{mean_loss},{}", miou.map_or(String::new(), |m| m.to_string())))?;
            checkpoint::save(&dir.join(format!("meta_epoch{epoch:03}.ckpt")), &model.full_state())?;
        }
        summary.epoch_losses.push(mean_loss);
        summary.val_miou.push(miou);
    }
    if let Some(dir) = &cfg.out_dir {
        checkpoint::save(&dir.join("meta.ckpt"), &model.full_state())?;
    }
    Ok(summary)
}

/// Repeats SGD on one fixed episode and returns the loss before every step
/// followed by the final loss.
pub fn overfit_episode(model: &mut Model, inputs: &EpisodeInputs, steps: usize, lr: f64) -> Result<Vec<f64>> {
    let trainable = model.trainable();
    let mut sgd = Sgd::new(lr, 0.0);
    let mut losses = Vec::with_capacity(steps + 1);
    for step in 0..steps {
        let (loss, grads) = model.loss_and_grads(inputs, &trainable)?;
        check_finite(loss, &grads, &format!("step {}", step + 1))?;
        losses.push(loss);
        sgd.step(&mut model.params.0, &grads)?;
    }
    losses.push(model.loss(inputs)?);
    Ok(losses)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaseConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for BaseConfig {
    fn default() -> Self {
        BaseConfig { epochs: 10, lr: 2.0, momentum: 0.9, batch: 8, seed: 0 }
    }
}

/// Per-pixel labels of one feature-resolution mask: `slot + 1` on the
/// foreground, 0 elsewhere.
fn base_labels(mask: &Tensor, slot: usize) -> Vec<usize> {
    mask.data().iter().map(|&m| if m > 0.5 { slot + 1 } else { 0 }).collect()
}

/// Features and labels of the base-class samples, original view only.
pub fn base_training_set(dataset: &Dataset, bank: &FeatureBank, split: &FoldSplit) -> Result<Vec<(Tensor, Vec<usize>)>> {
    let mut out = Vec::new();
    for (slot, &class) in split.base.iter().enumerate() {
        for &i in dataset.class_indices(class) {
            match bank.get(i) {
                Ok(v) => out.push((v.feat.clone(), base_labels(&v.mask, slot))),
                Err(Error::EmptyMask) => continue,
                Err(e) => return Err(e),
            }
        }
    }
    Ok(out)
}

fn base_step(weight: &Tensor, bias: &Tensor, items: &[&(Tensor, Vec<usize>)]) -> Result<(f64, Tensor, Tensor)> {
    let mut loss = 0.0;
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = Tensor::zeros(bias.shape());
    for (feat, labels) in items {
        let mut tape = Tape::new();
        let w = tape.param(weight.clone());
        let b = tape.param(bias.clone());
        let x = tape.constant(feat.clone());
        let logits = tape.conv2d(x, w, b, 1, 0)?;
        let probs = tape.channel_softmax(logits)?;
        let l = tape.cross_entropy(probs, labels)?;
        loss += tape.value(l).item();
        let grads = tape.backward(l)?;
        gw = gw.zip_map(grads.get(w).unwrap(), |a, g| a + g)?;
        gb = gb.zip_map(grads.get(b).unwrap(), |a, g| a + g)?;
    }
    let n = items.len() as f64;
    Ok((loss / n, gw.map(|v| v / n), gb.map(|v| v / n)))
}

/// Fits the base learner with SGD on shuffled mini-batches. Returns the trained
/// weights and the mean loss of every epoch.
pub fn train_base(
    data: &[(Tensor, Vec<usize>)],
    weight: Tensor,
    bias: Tensor,
    cfg: &BaseConfig,
) -> Result<(Tensor, Tensor, Vec<f64>)> {
    if data.is_empty() || cfg.batch == 0 {
        return Err(Error::InvalidArgument("base training needs samples and a positive batch".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = BTreeMap::from([("w".to_string(), weight), ("b".to_string(), bias)]);
    let mut sgd = Sgd::new(cfg.lr, cfg.momentum);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::new();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let chunks: Vec<&[usize]> = order.chunks(cfg.batch).collect();
        for chunk in &chunks {
            let items: Vec<_> = chunk.iter().map(|&i| &data[i]).collect();
            let (loss, gw, gb) = base_step(&params["w"], &params["b"], &items)?;
            let grads = BTreeMap::from([("w".to_string(), gw), ("b".to_string(), gb)]);
            check_finite(loss, &grads, &format!("base epoch {epoch}"))?;
            sgd.step(&mut params, &grads)?;
            total += loss;
        }
        let mean = total / chunks.len() as f64;
        if epoch_losses.last().is_some_and(|&prev| mean > prev) {
            log::warn!("base learner loss rose in epoch {epoch}: {mean:.5}");
        }
        epoch_losses.push(mean);
    }
    let b = params.remove("b").unwrap();
    let w = params.remove("w").unwrap();
    Ok((w, b, epoch_losses))
}

/// Fraction of pixels whose most probable class equals the label.
pub fn base_accuracy(data: &[(Tensor, Vec<usize>)], weight: &Tensor, bias: &Tensor) -> Result<f64> {
    let mut right = 0usize;
    let mut total = 0usize;
    for (feat, labels) in data {
        let probs = crate::predict::base_probs(feat, weight, bias)?;
        let n = probs.shape()[0];
        let plane = labels.len();
        for (p, &l) in labels.iter().enumerate() {
            let column: Vec<f64> = (0..n).map(|c| probs.data()[c * plane + p]).collect();
            right += (tensor::argmax(&column).0 == l) as usize;
            total += 1;
        }
    }
    Ok(right as f64 / total as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<GradEntry>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    /// Parameters with at least one entry over tolerance.
    pub failures: Vec<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    /// Largest analytic gradient magnitude of a parameter.
    pub fn max_abs_grad(&self, name: &str) -> f64 {
        self.entries.iter().filter(|e| e.name == name).map(|e| e.analytic.abs()).fold(0.0, f64::max)
    }
}

pub const GRADCHECK_EPS: f64 = 1e-4;
pub const GRADCHECK_TOL: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(GRADCHECK_FLOOR)
}

/// A small episode: 32x32 random images, 4-channel extractor, 8x8 features,
/// every switch enabled and a freshly initialised base learner.
pub fn toy_episode(seed: u64) -> Result<(Model, EpisodeInputs)> {
    let config = ModelConfig { backbone_seed: seed, backbone_hidden: 4, channels: 4, base_classes: 4 };
    let backbone = Backbone::standard(seed, 4, 4);
    let flags = Flags { sri: true, qri: true, base_learner: true, share_prior_conv: false };
    let mut model = Model::with_backbone(config, flags, backbone, seed);
    // Move the mixing weights off their symmetric start so both views matter unequally.
    model.params.insert("proto.p1", Tensor::scalar(0.7));
    model.params.insert("proto.p2", Tensor::scalar(0.4));
    model.params.insert("adjust.a1", Tensor::scalar(0.6));
    model.params.insert("adjust.a2", Tensor::scalar(0.5));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut view = |x0: usize, y0: usize, w: usize| -> Result<Views> {
        let image = Tensor::new(vec![3, 32, 32], (0..3 * 1024).map(|_| rng.random_range(0.0..1.0)).collect())?;
        let mask = (0..1024)
            .map(|i| {
                let (x, y) = (i % 32, i / 32);
                // An L shape, so the mask is not mirror-symmetric.
                let inside = (x0..x0 + w).contains(&x) && (y0..y0 + 12).contains(&y)
                    || (x0..x0 + 16).contains(&x) && (y0 + 8..y0 + 12).contains(&y);
                inside as u8 as f64
            })
            .collect();
        extract_views(&image, &Tensor::new(vec![32, 32], mask)?, &model.backbone)
    };
    let support = view(4, 8, 6)?;
    let query = view(10, 14, 8)?;
    let inputs = model.prepare(&[support], &query)?;
    Ok((model, inputs))
}

/// Compares reverse-mode gradients of the total loss with central differences
/// for every trainable scalar of the toy episode. `corrupt` deliberately
/// breaks one op's backward rule.
pub fn grad_check(seed: u64, corrupt: Option<OpKind>) -> Result<GradCheckReport> {
    let (model, inputs) = toy_episode(seed)?;
    let trainable = model.trainable();
    let mut tape = Tape::new();
    let vars = model.register(&mut tape, &trainable);
    let fwd = model.forward_on(&mut tape, &vars, &inputs)?;
    if let Some(kind) = corrupt {
        tape.corrupt_backward(kind);
    }
    let grads = tape.backward(fwd.loss)?;

    let mut entries = Vec::new();
    for name in &trainable {
        let analytic = grads.get(vars[name]).cloned().unwrap_or_else(|| Tensor::zeros(model.params.0[name].shape()));
        for index in 0..analytic.len() {
            let mut probe = model.clone();
            let at = |probe: &mut Model, delta: f64| -> Result<f64> {
                let mut t = model.params.0[name].clone();
                t.data_mut()[index] += delta;
                probe.params.insert(name.clone(), t);
                probe.loss(&inputs)
            };
            let up = at(&mut probe, GRADCHECK_EPS)?;
            let down = at(&mut probe, -GRADCHECK_EPS)?;
            let numeric = (up - down) / (2.0 * GRADCHECK_EPS);
            let a = analytic.data()[index];
            entries.push(GradEntry { name: name.clone(), index, analytic: a, numeric, rel_err: relative_error(a, numeric) });
        }
    }
    let max_rel_err = entries.iter().map(|e| e.rel_err).fold(0.0, f64::max);
    let mut failures: Vec<String> =
        entries.iter().filter(|e| e.rel_err >= GRADCHECK_TOL).map(|e| e.name.clone()).collect();
    failures.dedup();
    Ok(GradCheckReport { entries, max_rel_err, tolerance: GRADCHECK_TOL, failures })
}

/// Trains a fresh base learner for `split` and installs it in `model`.
pub fn fit_base_learner(model: &mut Model, dataset: &Dataset, bank: &FeatureBank, split: &FoldSplit, cfg: &BaseConfig) -> Result<Vec<f64>> {
    if model.config.base_classes != split.base.len() + 1 {
        return Err(Error::InvalidArgument(format!(
            "base learner has {} outputs but the fold has {} base classes plus background",
            model.config.base_classes,
            split.base.len()
        )));
    }
    let data = base_training_set(dataset, bank, split)?;
    let (w0, b0) = init_base_learner(&model.config, cfg.seed);
    let (w, b, losses) = train_base(&data, w0, b0, cfg)?;
    model.params.insert("base.weight", w);
    model.params.insert("base.bias", b);
    Ok(losses)
}
