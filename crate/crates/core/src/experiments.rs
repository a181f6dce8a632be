//! Ablation grid: which reflection components are switched on, and plain
//! mirror augmentation as a contrast.

use std::path::Path;

use rayon::prelude::*;

use crate::episodes::{split_folds, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, ModelSegmenter};
use crate::model::{FeatureBank, Flags, Model, ModelConfig};
use crate::trainer::{train_meta, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Variant {
    Baseline,
    SriOnly,
    QriOnly,
    Full,
    FlipAug,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Baseline, Variant::SriOnly, Variant::QriOnly, Variant::Full, Variant::FlipAug];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::SriOnly => "sri_only",
            Variant::QriOnly => "qri_only",
            Variant::Full => "full",
            Variant::FlipAug => "flip_aug",
        }
    }

    pub fn flags(self) -> Flags {
        let (sri, qri) = match self {
            Variant::Baseline | Variant::FlipAug => (false, false),
            Variant::SriOnly => (true, false),
            Variant::QriOnly => (false, true),
            Variant::Full => (true, true),
        };
        Flags { sri, qri, ..Flags::default() }
    }

    pub fn flip_augment(self) -> bool {
        self == Variant::FlipAug
    }
}

#[derive(Clone, Debug)]
pub struct AblationConfig {
    pub folds: Vec<usize>,
    pub seeds: Vec<u64>,
    pub shots: usize,
    pub n_eval: usize,
    pub model: ModelConfig,
    /// Template for every run; fold, seed, augmentation and output directory are overwritten.
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub variant: Variant,
    pub fold: usize,
    pub seed: u64,
    pub miou: f64,
    pub fbiou: f64,
}

/// Trains and evaluates one variant. Every variant of a (fold, seed) pair
/// starts from the same head initialisation and is scored on the same test episodes.
pub fn run_variant(
    dataset: &Dataset,
    bank: &FeatureBank,
    cfg: &AblationConfig,
    variant: Variant,
    fold: usize,
    seed: u64,
) -> Result<RunResult> {
    let mut model = Model::new(cfg.model.clone(), variant.flags(), seed);
    let train = TrainConfig {
        fold,
        seed,
        shots: cfg.shots,
        flip_augment: variant.flip_augment(),
        out_dir: None,
        val_episodes: 0,
        ..cfg.train.clone()
    };
    train_meta(&mut model, dataset, bank, &train)?;
    let split = split_folds(fold)?;
    let seg = ModelSegmenter { model: &model, bank };
    let eval_seed = 0xe7a1_0000 + seed * 16 + fold as u64;
    let report = evaluate(&seg, dataset, &split, cfg.shots, model.backbone.stride(), cfg.n_eval, eval_seed)?;
    log::info!("{} fold {fold} seed {seed}: mIoU {:.2}", variant.name(), report.miou);
    Ok(RunResult { variant, fold, seed, miou: report.miou, fbiou: report.fbiou })
}

pub fn run_ablation(dataset: &Dataset, cfg: &AblationConfig, variants: &[Variant]) -> Result<Vec<RunResult>> {
    let backbone = Model::new(cfg.model.clone(), Flags::default(), 0).backbone;
    let bank = FeatureBank::build(dataset, &backbone)?;
    let jobs: Vec<(Variant, usize, u64)> = variants
        .iter()
        .flat_map(|&v| cfg.folds.iter().flat_map(move |&f| cfg.seeds.iter().map(move |&s| (v, f, s))))
        .collect();
    jobs.par_iter().map(|&(v, f, s)| run_variant(dataset, &bank, cfg, v, f, s)).collect()
}

/// Mean over every run of `variant`.
pub fn mean_miou(results: &[RunResult], variant: Variant) -> Result<f64> {
    let v: Vec<f64> = results.iter().filter(|r| r.variant == variant).map(|r| r.miou).collect();
    if v.is_empty() {
        return Err(Error::InvalidArgument(format!("no runs of {}", variant.name())));
    }
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

pub const ABLATION_HEADER: [&str; 10] =
    ["variant", "sri", "qri", "flip_aug", "fold", "runs", "miou_mean", "miou_min", "miou_max", "fbiou_mean"];

/// One row per (variant, fold) with statistics over seeds, then one `mean`
/// row per variant over all folds and seeds.
pub fn write_ablation(path: &Path, results: &[RunResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::at(path)(io),
        other => Error::format("ablation csv", format!("{other:?}")),
    })?;
    w.write_record(ABLATION_HEADER)?;
    let onoff = |b: bool| if b { "on" } else { "off" };
    let mut variants: Vec<Variant> = results.iter().map(|r| r.variant).collect();
    variants.sort();
    variants.dedup();
    for v in variants {
        let mut folds: Vec<usize> = results.iter().filter(|r| r.variant == v).map(|r| r.fold).collect();
        folds.sort();
        folds.dedup();
        let groups = folds
            .iter()
            .map(|&f| (f.to_string(), results.iter().filter(|r| r.variant == v && r.fold == f).collect::<Vec<_>>()))
            .chain(std::iter::once(("mean".to_string(), results.iter().filter(|r| r.variant == v).collect())));
        for (label, runs) in groups {
            let n = runs.len() as f64;
            let miou: Vec<f64> = runs.iter().map(|r| r.miou).collect();
            let flags = v.flags();
            w.write_record([
                v.name().to_string(),
                onoff(flags.sri).to_string(),
                onoff(flags.qri).to_string(),
                onoff(v.flip_augment()).to_string(),
                label,
                runs.len().to_string(),
                format!("{:.4}", miou.iter().sum::<f64>() / n),
                format!("{:.4}", miou.iter().cloned().fold(f64::INFINITY, f64::min)),
                format!("{:.4}", miou.iter().cloned().fold(f64::NEG_INFINITY, f64::max)),
                format!("{:.4}", runs.iter().map(|r| r.fbiou).sum::<f64>() / n),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
