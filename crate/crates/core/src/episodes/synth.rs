//! Procedural stand-in for a 20-class segmentation benchmark: one textured
//! shape per image over a textured, noisy background.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 64;
pub const NUM_CLASSES: usize = 20;
/// Minimum foreground pixels per generated mask at image resolution.
pub const MIN_FOREGROUND: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeFamily {
    Disk,
    /// Ring with a gap on one side.
    Ring,
    /// Right triangle.
    Triangle,
    /// Cross whose vertical arm is off-centre.
    Cross,
    /// Diagonal bar.
    Bar,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 5] =
        [ShapeFamily::Disk, ShapeFamily::Ring, ShapeFamily::Triangle, ShapeFamily::Cross, ShapeFamily::Bar];

    /// Whether a horizontal mirror changes the silhouette.
    pub fn is_mirror_asymmetric(self) -> bool {
        self != ShapeFamily::Disk
    }

    /// Membership test in shape-local coordinates scaled so the shape spans roughly `[-1, 1]`.
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            ShapeFamily::Disk => u * u + v * v <= 1.0,
            ShapeFamily::Ring => {
                let r2 = u * u + v * v;
                (0.3..=1.0).contains(&r2) && !(u > 0.0 && v.abs() < 0.35)
            }
            ShapeFamily::Triangle => u >= -1.0 && v <= 1.0 && u <= v,
            ShapeFamily::Cross => {
                let vertical = (u - 0.25).abs() <= 0.3 && v.abs() <= 1.0;
                let horizontal = v.abs() <= 0.3 && u.abs() <= 1.0;
                vertical || horizontal
            }
            ShapeFamily::Bar => {
                let across = (u + v) / std::f64::consts::SQRT_2;
                let along = (u - v) / std::f64::consts::SQRT_2;
                across.abs() <= 0.32 && along.abs() <= 1.0
            }
        }
    }
}

/// Generator parameters of one semantic class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapeClass {
    pub id: usize,
    pub family: ShapeFamily,
    /// Stripe frequency in radians per pixel.
    pub texture_freq: f64,
    /// Stripe orientation in radians; never axis-aligned, so mirroring changes it.
    pub stripe_angle: f64,
    pub hue: f64,
}

impl ShapeClass {
    pub fn new(id: usize) -> Self {
        assert!(id < NUM_CLASSES, "class id {id} out of range");
        let group = id / ShapeFamily::ALL.len();
        const FREQS: [f64; 4] = [0.35, 0.55, 0.8, 1.1];
        const ANGLES_DEG: [f64; 4] = [25.0, 60.0, 115.0, 155.0];
        ShapeClass {
            id,
            family: ShapeFamily::ALL[id % ShapeFamily::ALL.len()],
            texture_freq: FREQS[group],
            stripe_angle: ANGLES_DEG[(id + group) % 4].to_radians(),
            hue: (id as f64 * 0.618_033_988_75).fract(),
        }
    }

    pub fn all() -> Vec<ShapeClass> {
        (0..NUM_CLASSES).map(ShapeClass::new).collect()
    }
}

/// One image/mask pair, stored at the 8-bit precision it has on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub sample_id: usize,
    pub class_id: usize,
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor,
    /// `[H, W]` in `{0, 1}`.
    pub mask: Tensor,
}

impl Sample {
    pub fn from_bytes(sample_id: usize, class_id: usize, size: usize, rgb: &[u8], gray: &[u8]) -> Sample {
        let plane = size * size;
        let mut image = vec![0.0; 3 * plane];
        for p in 0..plane {
            for c in 0..3 {
                image[c * plane + p] = rgb[3 * p + c] as f64 / 255.0;
            }
        }
        let mask = gray.iter().map(|&g| if g >= 128 { 1.0 } else { 0.0 }).collect();
        Sample {
            sample_id,
            class_id,
            image: Tensor::new(vec![3, size, size], image).unwrap(),
            mask: Tensor::new(vec![size, size], mask).unwrap(),
        }
    }

    pub fn rgb_bytes(&self) -> Vec<u8> {
        let plane = self.mask.len();
        let d = self.image.data();
        (0..plane).flat_map(|p| (0..3).map(move |c| to_u8(d[c * plane + p]))).collect()
    }

    pub fn mask_bytes(&self) -> Vec<u8> {
        self.mask.data().iter().map(|&m| if m > 0.5 { 255 } else { 0 }).collect()
    }

    pub fn foreground(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m > 0.5).count()
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Renders one sample of `class` from `rng`. Pose, size and mirroring are random;
/// poses leaving fewer than [`MIN_FOREGROUND`] foreground pixels, or no
/// `stride`-downsampled foreground, are redrawn.
pub fn render_sample(class: &ShapeClass, sample_id: usize, stride: usize, rng: &mut ChaCha8Rng) -> Sample {
    let size = IMAGE_SIZE;
    let noise = Normal::new(0.0, 0.04).unwrap();
    loop {
        let cx = rng.random_range(18.0..46.0);
        let cy = rng.random_range(18.0..46.0);
        let radius = rng.random_range(10.0..18.0);
        let mirror = if rng.random_bool(0.5) { -1.0 } else { 1.0 };
        let bg_hue: f64 = rng.random();
        let bg_freq = rng.random_range(0.1..0.6);
        let bg_angle = rng.random_range(0.0..std::f64::consts::PI);
        let bg_phase = rng.random_range(0.0..std::f64::consts::TAU);
        let fg_phase = rng.random_range(0.0..std::f64::consts::TAU);

        let plane = size * size;
        let mut rgb = vec![0u8; 3 * plane];
        let mut mask = vec![0u8; plane];
        let (sa, ca) = class.stripe_angle.sin_cos();
        let (sb, cb) = bg_angle.sin_cos();
        for y in 0..size {
            for x in 0..size {
                let p = y * size + x;
                let dx = (x as f64 + 0.5 - cx) * mirror;
                let dy = y as f64 + 0.5 - cy;
                let inside = class.family.contains(dx / radius, dy / radius);
                let color = if inside {
                    mask[p] = 255;
                    let stripe = (class.texture_freq * (dx * ca + dy * sa) + fg_phase).sin();
                    hsv_to_rgb(class.hue, 0.75, 0.6 + 0.3 * stripe)
                } else {
                    let (fx, fy) = (x as f64, y as f64);
                    let stripe = (bg_freq * (fx * cb + fy * sb) + bg_phase).sin();
                    hsv_to_rgb(bg_hue, 0.3, 0.4 + 0.2 * stripe)
                };
                for c in 0..3 {
                    rgb[3 * p + c] = to_u8(color[c] + noise.sample(rng));
                }
            }
        }

        let sample = Sample::from_bytes(sample_id, class.id, size, &rgb, &mask);
        if sample.foreground() >= MIN_FOREGROUND
            && crate::invariance::downsample_mask(&sample.mask, stride).map(|m| m.sum() > 0.0).unwrap_or(false)
        {
            return sample;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::flip_h;
    use rand::SeedableRng;

    #[test]
    fn classes_are_distinct() {
        let classes = ShapeClass::all();
        for a in &classes {
            for b in &classes {
                if a.id != b.id {
                    assert!(
                        a.family != b.family || a.texture_freq != b.texture_freq || a.hue != b.hue,
                        "classes {} and {} coincide",
                        a.id,
                        b.id
                    );
                }
            }
        }
        assert!(classes.iter().filter(|c| c.family.is_mirror_asymmetric()).count() >= 8);
    }

    #[test]
    fn asymmetric_families_change_under_mirror() {
        for family in ShapeFamily::ALL {
            let n = 41;
            let grid: Vec<bool> = (0..n * n)
                .map(|i| {
                    let u = ((i % n) as f64 - 20.0) / 20.0;
                    let v = ((i / n) as f64 - 20.0) / 20.0;
                    family.contains(u, v)
                })
                .collect();
            let mirrored: Vec<bool> = (0..n * n).map(|i| grid[(i / n) * n + (n - 1 - i % n)]).collect();
            assert_eq!(grid != mirrored, family.is_mirror_asymmetric(), "{family:?}");
        }
    }

    #[test]
    fn render_is_deterministic_and_valid() {
        let class = ShapeClass::new(7);
        let a = render_sample(&class, 3, 4, &mut ChaCha8Rng::seed_from_u64(11));
        let b = render_sample(&class, 3, 4, &mut ChaCha8Rng::seed_from_u64(11));
        assert_eq!(a, b);
        assert!(a.foreground() >= MIN_FOREGROUND);
        assert!(a.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_ne!(flip_h(&a.mask).unwrap(), a.mask);
    }
}
