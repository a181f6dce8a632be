//! Segmentation quality: per-class IoU over test classes and
//! foreground/background IoU, accumulated over evaluation episodes.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::episodes::{Dataset, Episode, EpisodeSampler, FoldSplit, Phase};
use crate::error::{Error, Result};
use crate::model::{FeatureBank, Model};
use crate::tensor::Tensor;

/// Intersection and union pixel counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub inter: u64,
    pub union: u64,
}

impl Counts {
    pub fn iou(&self) -> Option<f64> {
        (self.union > 0).then(|| self.inter as f64 / self.union as f64)
    }

    fn add(&mut self, other: Counts) {
        self.inter += other.inter;
        self.union += other.union;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConfusionAccumulator {
    classes: Vec<usize>,
    per_class: Vec<Counts>,
    fg: Counts,
    bg: Counts,
}

impl ConfusionAccumulator {
    pub fn new(classes: &[usize]) -> Self {
        ConfusionAccumulator {
            classes: classes.to_vec(),
            per_class: vec![Counts::default(); classes.len()],
            fg: Counts::default(),
            bg: Counts::default(),
        }
    }

    /// Adds one binary prediction of `class_id` against its binary ground truth.
    pub fn update(&mut self, class_id: usize, pred: &Tensor, gt: &Tensor) -> Result<()> {
        if pred.shape() != gt.shape() {
            return Err(Error::shape(format!("prediction {:?} vs ground truth {:?}", pred.shape(), gt.shape())));
        }
        let slot = self
            .classes
            .iter()
            .position(|&c| c == class_id)
            .ok_or_else(|| Error::InvalidArgument(format!("class {class_id} is not evaluated")))?;
        let mut fg = Counts::default();
        let mut bg = Counts::default();
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            let (p, g) = (p > 0.5, g > 0.5);
            fg.inter += (p && g) as u64;
            fg.union += (p || g) as u64;
            bg.inter += (!p && !g) as u64;
            bg.union += (!p || !g) as u64;
        }
        self.per_class[slot].add(fg);
        self.fg.add(fg);
        self.bg.add(bg);
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionAccumulator) -> Result<()> {
        if self.classes != other.classes {
            return Err(Error::InvalidArgument("merging accumulators over different classes".into()));
        }
        for (a, b) in self.per_class.iter_mut().zip(&other.per_class) {
            a.add(*b);
        }
        self.fg.add(other.fg);
        self.bg.add(other.bg);
        Ok(())
    }

    /// IoU per class in percent; `None` for classes never seen in prediction or ground truth.
    pub fn class_iou(&self) -> Vec<(usize, Option<f64>)> {
        self.classes.iter().zip(&self.per_class).map(|(&c, k)| (c, k.iou().map(|v| 100.0 * v))).collect()
    }

    /// Mean class IoU in percent over the classes that occurred. Classes with
    /// an empty union are left out with a warning.
    pub fn miou(&self) -> Result<f64> {
        let mut seen = Vec::new();
        for (c, v) in self.class_iou() {
            match v {
                Some(v) => seen.push(v),
                None => log::warn!("class {c} never occurred; left out of mIoU"),
            }
        }
        if seen.is_empty() {
            return Err(Error::InvalidArgument("no evaluated class occurred".into()));
        }
        Ok(seen.iter().sum::<f64>() / seen.len() as f64)
    }

    /// Mean of foreground IoU and background IoU, in percent.
    pub fn fbiou(&self) -> f64 {
        let fg = self.fg.iou().unwrap_or(0.0);
        let bg = self.bg.iou().unwrap_or(0.0);
        50.0 * (fg + bg)
    }
}

/// Anything that turns an episode into a binary query mask at image resolution.
pub trait Segmenter: Sync {
    fn segment(&self, episode: &Episode) -> Result<Tensor>;
}

pub struct ModelSegmenter<'a> {
    pub model: &'a Model,
    pub bank: &'a FeatureBank,
}

impl Segmenter for ModelSegmenter<'_> {
    fn segment(&self, episode: &Episode) -> Result<Tensor> {
        let (supports, query) = self.bank.episode(episode, false)?;
        let inputs = self.model.prepare(&supports, &query)?;
        self.model.predict_mask(&inputs)
    }
}

/// Answers with the query's own ground truth.
pub struct GroundTruth<'a>(pub &'a Dataset);

impl Segmenter for GroundTruth<'_> {
    fn segment(&self, episode: &Episode) -> Result<Tensor> {
        Ok(self.0.sample(episode.query).mask.clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub fold: usize,
    pub shot: usize,
    pub episodes: usize,
    pub miou: f64,
    pub fbiou: f64,
    pub class_iou: Vec<(usize, Option<f64>)>,
}

/// Draws `n_episodes` test episodes in order from `seed`. Degenerate draws are
/// logged and replaced.
pub fn draw_test_episodes(
    dataset: &Dataset,
    split: &FoldSplit,
    shots: usize,
    feature_stride: usize,
    n_episodes: usize,
    seed: u64,
) -> Result<Vec<Episode>> {
    let sampler = EpisodeSampler::new(dataset, split, Phase::Test, shots, feature_stride)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_episodes);
    let mut failures = 0;
    while out.len() < n_episodes {
        match sampler.sample(&mut rng) {
            Ok(e) => out.push(e),
            Err(Error::DegenerateEpisode { class_id, attempts }) => {
                failures += 1;
                log::warn!("skipping degenerate episode of class {class_id} after {attempts} attempts");
                if failures > n_episodes.max(100) {
                    return Err(Error::DegenerateEpisode { class_id, attempts });
                }
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Segments pre-drawn episodes and accumulates in episode order. With
/// `parallel` the segmentation runs on the rayon pool; the result is the same.
pub fn evaluate_episodes(
    segmenter: &dyn Segmenter,
    dataset: &Dataset,
    split: &FoldSplit,
    shots: usize,
    episodes: &[Episode],
    parallel: bool,
) -> Result<EvalReport> {
    let masks = if parallel {
        episodes.par_iter().map(|e| segmenter.segment(e)).collect::<Result<Vec<_>>>()?
    } else {
        episodes.iter().map(|e| segmenter.segment(e)).collect::<Result<Vec<_>>>()?
    };
    let mut acc = ConfusionAccumulator::new(&split.novel);
    for (e, m) in episodes.iter().zip(&masks) {
        acc.update(e.class_id, m, &dataset.sample(e.query).mask)?;
    }
    Ok(EvalReport {
        fold: split.fold,
        shot: shots,
        episodes: episodes.len(),
        miou: acc.miou()?,
        fbiou: acc.fbiou(),
        class_iou: acc.class_iou(),
    })
}

/// The evaluation protocol: `n_episodes` seeded test episodes, scored in parallel.
pub fn evaluate(
    segmenter: &dyn Segmenter,
    dataset: &Dataset,
    split: &FoldSplit,
    shots: usize,
    feature_stride: usize,
    n_episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    let episodes = draw_test_episodes(dataset, split, shots, feature_stride, n_episodes, seed)?;
    evaluate_episodes(segmenter, dataset, split, shots, &episodes, true)
}

pub const REPORT_HEADER: [&str; 6] = ["fold", "shot", "episodes", "miou", "fbiou", "class_iou"];

/// One CSV row per report; per-class IoUs go in one `class:iou` list separated by `;`.
pub fn write_report(path: &Path, reports: &[EvalReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::at(path)(io),
        other => Error::format("report", format!("{other:?}")),
    })?;
    w.write_record(REPORT_HEADER)?;
    for r in reports {
        let classes = r
            .class_iou
            .iter()
            .map(|(c, v)| format!("{c}:{}", v.map_or("nan".to_string(), |v| format!("{v:.4}"))))
            .collect::<Vec<_>>()
            .join(";");
        w.write_record([
            r.fold.to_string(),
            r.shot.to_string(),
            r.episodes.to_string(),
            format!("{:.4}", r.miou),
            format!("{:.4}", r.fbiou),
            classes,
        ])?;
    }
    w.flush()?;
    Ok(())
}
