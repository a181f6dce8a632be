//! Synthetic dataset, fold splits and the episodic K-shot sampler.
//!
//! A dataset directory holds `images/NNNNN.ppm`, `masks/NNNNN.pgm` and a
//! `manifest.csv` with header `sample_id,class_id,image_path,mask_path`;
//! paths in the manifest are relative to the directory.

pub mod pnm;
pub mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use synth::{render_sample, Sample, ShapeClass, ShapeFamily, IMAGE_SIZE, MIN_FOREGROUND, NUM_CLASSES};

use crate::error::{Error, Result};
use crate::invariance::downsample_mask;

pub const NUM_FOLDS: usize = 4;
pub const CLASSES_PER_FOLD: usize = NUM_CLASSES / NUM_FOLDS;
/// Sampling attempts before an episode is declared degenerate.
pub const MAX_EPISODE_TRIES: usize = 10;
/// Feature stride assumed when generating data (two stride-2 convs).
pub const DEFAULT_FEATURE_STRIDE: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSplit {
    pub fold: usize,
    pub novel: Vec<usize>,
    pub base: Vec<usize>,
}

/// Fold `fold` holds out the contiguous classes `5 * fold .. 5 * fold + 4`.
pub fn split_folds(fold: usize) -> Result<FoldSplit> {
    if fold >= NUM_FOLDS {
        return Err(Error::InvalidArgument(format!("fold must be in 0..{NUM_FOLDS}, got {fold}")));
    }
    let novel: Vec<usize> = (fold * CLASSES_PER_FOLD..(fold + 1) * CLASSES_PER_FOLD).collect();
    let base = (0..NUM_CLASSES).filter(|c| !novel.contains(c)).collect();
    Ok(FoldSplit { fold, novel, base })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Episodes over base classes.
    Train,
    /// Episodes over novel classes.
    Test,
}

impl FoldSplit {
    pub fn classes(&self, phase: Phase) -> &[usize] {
        match phase {
            Phase::Train => &self.base,
            Phase::Test => &self.novel,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub sample_id: usize,
    pub class_id: usize,
    pub image_path: String,
    pub mask_path: String,
}

pub type Manifest = Vec<ManifestRow>;

pub const MANIFEST_HEADER: [&str; 4] = ["sample_id", "class_id", "image_path", "mask_path"];

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(MANIFEST_HEADER)?;
    for r in rows {
        w.write_record([r.sample_id.to_string(), r.class_id.to_string(), r.image_path.clone(), r.mask_path.clone()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().ne(MANIFEST_HEADER) {
        return Err(Error::format("manifest", format!("unexpected header {:?}", r.headers()?)));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| {
            rec[i].parse::<usize>().map_err(|e| Error::format("manifest", format!("{:?}: {e}", &rec[i])))
        };
        rows.push(ManifestRow {
            sample_id: num(0)?,
            class_id: num(1)?,
            image_path: rec[2].to_string(),
            mask_path: rec[3].to_string(),
        });
    }
    Ok(rows)
}

/// Renders `n_per_class` samples of every class. Sample `i` of class `c` has
/// id `c * n_per_class + i` and its own RNG stream, so output is independent
/// of thread scheduling.
pub fn generate_samples(n_per_class: usize, seed: u64) -> Vec<Sample> {
    let classes = ShapeClass::all();
    (0..NUM_CLASSES * n_per_class)
        .into_par_iter()
        .map(|id| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(id as u64);
            render_sample(&classes[id / n_per_class], id, DEFAULT_FEATURE_STRIDE, &mut rng)
        })
        .collect()
}

/// Writes a dataset directory and returns its manifest.
pub fn generate_dataset(n_per_class: usize, seed: u64, out_dir: &Path) -> Result<Manifest> {
    if n_per_class < 2 {
        return Err(Error::InvalidArgument("need at least 2 samples per class".into()));
    }
    for sub in ["images", "masks"] {
        let dir = out_dir.join(sub);
        fs::create_dir_all(&dir).map_err(Error::at(&dir))?;
    }
    let samples = generate_samples(n_per_class, seed);
    let rows = samples
        .par_iter()
        .map(|s| {
            let image_path = format!("images/{:05}.ppm", s.sample_id);
            let mask_path = format!("masks/{:05}.pgm", s.sample_id);
            pnm::write_ppm(&out_dir.join(&image_path), IMAGE_SIZE, IMAGE_SIZE, &s.rgb_bytes())?;
            pnm::write_pgm(&out_dir.join(&mask_path), IMAGE_SIZE, IMAGE_SIZE, &s.mask_bytes())?;
            Ok(ManifestRow { sample_id: s.sample_id, class_id: s.class_id, image_path, mask_path })
        })
        .collect::<Result<Vec<_>>>()?;
    write_manifest(&out_dir.join("manifest.csv"), &rows)?;
    Ok(rows)
}

/// Samples held in memory, indexed by class.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: Option<PathBuf>,
    samples: Vec<Sample>,
    by_class: Vec<Vec<usize>>,
}

impl Dataset {
    pub fn from_samples(samples: Vec<Sample>) -> Result<Self> {
        let mut by_class = vec![Vec::new(); NUM_CLASSES];
        for (i, s) in samples.iter().enumerate() {
            by_class
                .get_mut(s.class_id)
                .ok_or_else(|| Error::InvalidArgument(format!("class id {} out of range", s.class_id)))?
                .push(i);
        }
        Ok(Dataset { root: None, samples, by_class })
    }

    pub fn load(root: &Path) -> Result<Self> {
        let rows = read_manifest(&root.join("manifest.csv"))?;
        let samples = rows
            .par_iter()
            .map(|r| {
                let img = pnm::read_ppm(&root.join(&r.image_path))?;
                let mask = pnm::read_pgm(&root.join(&r.mask_path))?;
                if img.width != img.height || (mask.width, mask.height) != (img.width, img.height) {
                    return Err(Error::format("dataset", format!("sample {} has mismatched sizes", r.sample_id)));
                }
                Ok(Sample::from_bytes(r.sample_id, r.class_id, img.width, &img.data, &mask.data))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut ds = Self::from_samples(samples)?;
        ds.root = Some(root.to_path_buf());
        Ok(ds)
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn sample(&self, index: usize) -> &Sample {
        &self.samples[index]
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Indices of the samples of `class_id`.
    pub fn class_indices(&self, class_id: usize) -> &[usize] {
        &self.by_class[class_id]
    }
}

/// K supports and one query of a single class, as indices into a [`Dataset`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub class_id: usize,
    pub supports: Vec<usize>,
    pub query: usize,
}

#[derive(Clone, Debug)]
pub struct EpisodeSampler<'a> {
    dataset: &'a Dataset,
    classes: Vec<usize>,
    shots: usize,
    feature_stride: usize,
}

impl<'a> EpisodeSampler<'a> {
    pub fn new(dataset: &'a Dataset, split: &FoldSplit, phase: Phase, shots: usize, feature_stride: usize) -> Result<Self> {
        if shots == 0 {
            return Err(Error::InvalidArgument("K must be at least 1".into()));
        }
        let classes: Vec<usize> = split
            .classes(phase)
            .iter()
            .copied()
            .filter(|&c| dataset.class_indices(c).len() > shots)
            .collect();
        if classes.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "no {phase:?} class of fold {} has {} samples",
                split.fold,
                shots + 1
            )));
        }
        Ok(EpisodeSampler { dataset, classes, shots, feature_stride })
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Result<Episode> {
        let class_id = self.classes[rng.random_range(0..self.classes.len())];
        let pool = self.dataset.class_indices(class_id);
        for _ in 0..MAX_EPISODE_TRIES {
            let picked = index::sample(rng, pool.len(), self.shots + 1);
            let mut ids = picked.iter().map(|i| pool[i]);
            let query = ids.next().unwrap();
            let supports: Vec<usize> = ids.collect();
            let usable = supports.iter().all(|&s| {
                downsample_mask(&self.dataset.sample(s).mask, self.feature_stride)
                    .map(|m| m.sum() > 0.0)
                    .unwrap_or(false)
            });
            if usable {
                return Ok(Episode { class_id, supports, query });
            }
        }
        Err(Error::DegenerateEpisode { class_id, attempts: MAX_EPISODE_TRIES })
    }
}
