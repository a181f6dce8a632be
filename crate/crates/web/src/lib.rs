//! Browser demo. A support and a query of one synthetic class are rendered,
//! and the page shows the prior masks the model starts from: the
//! original-support prior, the mirrored-support prior and their fusion. A
//! third panel shows where the frozen extractor fails to commute with mirroring.
//!
//! [`Demo`] holds the logic and is tested natively; [`DemoEpisode`] is the
//! thin wasm-bindgen wrapper used by `www/index.html`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

use reflseg::episodes::{render_sample, Sample, ShapeClass, DEFAULT_FEATURE_STRIDE, IMAGE_SIZE, NUM_CLASSES};
use reflseg::invariance::{extract_views, fuse_priors, raw_priors, Backbone, Views};
use reflseg::model::ModelConfig;
use reflseg::tensor::{flip_h, min_max_normalize, upsample_nearest, Tensor};
use reflseg::{Error, Result};

pub struct Demo {
    backbone: Backbone,
    pub support: Sample,
    pub query: Sample,
}

/// The three prior masks at feature resolution, each in `[0, 1]`.
pub struct Priors {
    pub original: Tensor,
    pub reflected: Tensor,
    pub fused: Tensor,
}

impl Demo {
    pub fn new(class_id: usize, seed: u64) -> Result<Demo> {
        if class_id >= NUM_CLASSES {
            return Err(Error::InvalidArgument(format!("class {class_id} out of range 0..{NUM_CLASSES}")));
        }
        let class = ShapeClass::new(class_id);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let support = render_sample(&class, 0, DEFAULT_FEATURE_STRIDE, &mut rng);
        let query = render_sample(&class, 1, DEFAULT_FEATURE_STRIDE, &mut rng);
        let cfg = ModelConfig::default();
        let backbone = Backbone::standard(cfg.backbone_seed, cfg.backbone_hidden, cfg.channels);
        Ok(Demo { backbone, support, query })
    }

    /// Mirrors the query image and mask in place.
    pub fn mirror_query(&mut self) -> Result<()> {
        self.query.image = flip_h(&self.query.image)?;
        self.query.mask = flip_h(&self.query.mask)?;
        Ok(())
    }

    fn views(&self, s: &Sample) -> Result<Views> {
        extract_views(&s.image, &s.mask, &self.backbone)
    }

    /// Priors of the query against the support and the mirrored support, fused
    /// with weights `w_refl`, `w_orig` and `bias`.
    pub fn priors(&self, w_refl: f64, w_orig: f64, bias: f64) -> Result<Priors> {
        let support = self.views(&self.support)?;
        let query = self.views(&self.query)?;
        let (po, pf) = raw_priors(&query.feat, &[support])?;
        let weight = Tensor::new(vec![1, 2, 1, 1], vec![w_refl, w_orig])?;
        let fused = fuse_priors(&po, &pf, &weight, &Tensor::full(&[1], bias))?;
        Ok(Priors { original: min_max_normalize(&po), reflected: min_max_normalize(&pf), fused })
    }

    /// Per feature pixel, `|E(flip(I)) - flip(E(I))|` over channels for the
    /// query, scaled so the largest value is 1. All zeros for a mirror-equivariant extractor.
    pub fn flip_discrepancy(&self) -> Result<Tensor> {
        let feat = self.backbone.forward(&self.query.image)?;
        let feat_h = self.backbone.forward(&flip_h(&self.query.image)?)?;
        let diff = feat_h.zip_map(&flip_h(&feat)?, |a, b| (a - b) * (a - b))?;
        let (c, h, w) = (diff.shape()[0], diff.shape()[1], diff.shape()[2]);
        let plane = h * w;
        let mut out = vec![0.0; plane];
        for ch in 0..c {
            for (p, o) in out.iter_mut().enumerate() {
                *o += diff.data()[ch * plane + p];
            }
        }
        let out: Vec<f64> = out.into_iter().map(f64::sqrt).collect();
        let max = out.iter().cloned().fold(0.0, f64::max);
        let scaled = if max > 0.0 { out.iter().map(|v| v / max).collect() } else { out };
        Tensor::new(vec![h, w], scaled)
    }
}

/// RGBA bytes of an RGB sample image.
pub fn image_rgba(s: &Sample) -> Vec<u8> {
    s.rgb_bytes().chunks(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect()
}

/// RGBA bytes of a `[0, 1]` map upsampled to image size, in gray.
pub fn gray_rgba(map: &Tensor) -> Result<Vec<u8>> {
    let up = upsample_to_image(map)?;
    Ok(up.data().iter().flat_map(|&v| {
        let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        [g, g, g, 255]
    }).collect())
}

/// RGBA bytes of a `[0, 1]` map as black-red-yellow heat.
pub fn heat_rgba(map: &Tensor) -> Result<Vec<u8>> {
    let up = upsample_to_image(map)?;
    Ok(up.data().iter().flat_map(|&v| {
        let v = v.clamp(0.0, 1.0);
        let r = (2.0 * v).min(1.0);
        let g = (2.0 * v - 1.0).max(0.0);
        [(r * 255.0).round() as u8, (g * 255.0).round() as u8, 0, 255]
    }).collect())
}

fn upsample_to_image(map: &Tensor) -> Result<Tensor> {
    let h = map.shape()[0];
    if h == 0 || !IMAGE_SIZE.is_multiple_of(h) {
        return Err(Error::InvalidArgument(format!("cannot upsample {h} rows to {IMAGE_SIZE}")));
    }
    upsample_nearest(map, IMAGE_SIZE / h)
}

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct DemoEpisode(Demo);

#[wasm_bindgen]
impl DemoEpisode {
    #[wasm_bindgen(constructor)]
    pub fn new(class_id: u32, seed: u32) -> std::result::Result<DemoEpisode, JsError> {
        Demo::new(class_id as usize, seed as u64).map(DemoEpisode).map_err(js)
    }

    pub fn size() -> u32 {
        IMAGE_SIZE as u32
    }

    pub fn support_rgba(&self) -> Vec<u8> {
        image_rgba(&self.0.support)
    }

    pub fn query_rgba(&self) -> Vec<u8> {
        image_rgba(&self.0.query)
    }

    pub fn mirror_query(&mut self) -> std::result::Result<(), JsError> {
        self.0.mirror_query().map_err(js)
    }

    /// Original, mirrored-support and fused priors, each as RGBA bytes, back to back.
    pub fn priors_rgba(&self, w_refl: f64, w_orig: f64, bias: f64) -> std::result::Result<Vec<u8>, JsError> {
        let p = self.0.priors(w_refl, w_orig, bias).map_err(js)?;
        let mut out = gray_rgba(&p.original).map_err(js)?;
        out.extend(gray_rgba(&p.reflected).map_err(js)?);
        out.extend(gray_rgba(&p.fused).map_err(js)?);
        Ok(out)
    }

    pub fn flip_discrepancy_rgba(&self) -> std::result::Result<Vec<u8>, JsError> {
        heat_rgba(&self.0.flip_discrepancy().map_err(js)?).map_err(js)
    }
}
