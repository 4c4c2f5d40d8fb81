//! Seeded synthetic scenes: random colored rectangles under a cast
//! illuminant, optionally with two illuminants split down the middle.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cnn::NetworkParams;
use crate::error::{Error, Result};
use crate::image::{cast_illuminant, compose_two_illuminants, save_illuminant_map, save_ppm16, Illuminant, LinearImage};
use crate::local::IlluminantMap;
use crate::manifest::{Dataset, DatasetManifest, ManifestEntry, Sample, FOLDS};
use crate::patch::{stream_seed, ExclusionMask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub count: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    /// Number of rectangles painted over the background.
    pub rects: usize,
    /// Largest rectangle side in pixels.
    pub max_rect: usize,
    /// Range of the r = R/(R+G+B) chromaticity of drawn illuminants.
    pub r_range: (f64, f64),
    /// Range of the g = G/(R+G+B) chromaticity of drawn illuminants.
    pub g_range: (f64, f64),
    /// Amplitude of uniform additive noise on the base scene.
    pub noise: f64,
    pub two_illuminant: bool,
    /// Rescale each base scene so its channel means are equal.
    pub gray_world: bool,
    /// Paint a pure white square into every base scene.
    pub white_patch: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 30,
            width: 128,
            height: 128,
            seed: 0,
            rects: 200,
            max_rect: 16,
            r_range: (0.22, 0.45),
            g_range: (0.28, 0.42),
            noise: 0.01,
            two_illuminant: false,
            gray_world: false,
            white_patch: false,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.width < 2 || self.height < 1 {
            return bad(format!("scene size {}x{} too small", self.width, self.height));
        }
        for (name, (lo, hi)) in [("r", self.r_range), ("g", self.g_range)] {
            if !(0.0 < lo && lo <= hi && hi < 1.0) {
                return bad(format!("{name} chromaticity range ({lo}, {hi}) must satisfy 0 < lo <= hi < 1"));
            }
        }
        if self.r_range.1 + self.g_range.1 >= 1.0 {
            return bad("r and g ranges leave no room for a positive blue channel".into());
        }
        if !(0.0..0.5).contains(&self.noise) {
            return bad(format!("noise {} outside [0, 0.5)", self.noise));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SynthImage {
    pub id: String,
    /// The scene before casting.
    pub scene: LinearImage,
    pub image: LinearImage,
    /// Global ground truth; for two-illuminant images the normalized mean of
    /// the two halves' illuminants.
    pub illuminant: Illuminant,
    pub fold: usize,
    pub gt_map: Option<IlluminantMap>,
}

/// Illuminant with rg chromaticity drawn uniformly from the configured box.
pub fn random_illuminant(rng: &mut impl Rng, cfg: &SynthConfig) -> Illuminant {
    let r = rng.gen_range(cfg.r_range.0..=cfg.r_range.1);
    let g = rng.gen_range(cfg.g_range.0..=cfg.g_range.1);
    Illuminant::normalize([r, g, 1.0 - r - g]).expect("validated chromaticity box")
}

fn random_color(rng: &mut impl Rng) -> [f64; 3] {
    if rng.gen_bool(0.25) {
        let v = rng.gen_range(0.05..0.9);
        [v; 3]
    } else {
        [0, 1, 2].map(|_| rng.gen_range(0.05..0.9))
    }
}

/// Base scene under neutral light, values in [0, 1].
pub fn base_scene(rng: &mut impl Rng, cfg: &SynthConfig) -> LinearImage {
    let (w, h) = (cfg.width, cfg.height);
    let mut px = vec![random_color(rng); w * h];
    for _ in 0..cfg.rects {
        let rw = rng.gen_range(1..=cfg.max_rect.clamp(1, w));
        let rh = rng.gen_range(1..=cfg.max_rect.clamp(1, h));
        let x0 = rng.gen_range(0..=w - rw);
        let y0 = rng.gen_range(0..=h - rh);
        let c = random_color(rng);
        for y in y0..y0 + rh {
            px[y * w + x0..y * w + x0 + rw].fill(c);
        }
    }
    let cap = if cfg.white_patch { 0.95 } else { 1.0 };
    if cfg.noise > 0.0 {
        for p in &mut px {
            for v in p.iter_mut() {
                *v = (*v + rng.gen_range(-cfg.noise..=cfg.noise)).clamp(0.0, cap);
            }
        }
    }
    if cfg.gray_world {
        let n = px.len() as f64;
        let mean = [0, 1, 2].map(|c| px.iter().map(|p| p[c]).sum::<f64>() / n);
        let gray = (mean[0] + mean[1] + mean[2]) / 3.0;
        for p in &mut px {
            for c in 0..3 {
                p[c] *= gray / mean[c];
            }
        }
        let peak = px.iter().flatten().fold(0.0f64, |m, v| m.max(*v));
        if peak > cap {
            let s = cap / peak;
            px.iter_mut().flatten().for_each(|v| *v *= s);
        }
    }
    if cfg.white_patch {
        let side = (w.min(h) / 8).max(1);
        let x0 = rng.gen_range(0..=w - side);
        let y0 = rng.gen_range(0..=h - side);
        for y in y0..y0 + side {
            px[y * w + x0..y * w + x0 + side].fill([1.0; 3]);
        }
    }
    LinearImage::new(w, h, px).expect("scene values are finite and nonnegative")
}

/// Generates `cfg.count` images; image `i` uses its own RNG stream and
/// lands in fold `i % 3`.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<SynthImage>> {
    cfg.validate()?;
    (0..cfg.count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, i as u64));
            let scene = base_scene(&mut rng, cfg);
            let left = random_illuminant(&mut rng, cfg);
            let (image, illuminant, gt_map) = if cfg.two_illuminant {
                let right = random_illuminant(&mut rng, cfg);
                let (img, map) = compose_two_illuminants(&scene, &left, &right)?;
                let (l, r) = (left.rgb(), right.rgb());
                let mean = Illuminant::normalize([0, 1, 2].map(|c| l[c] + r[c]))?;
                (img, mean, Some(map))
            } else {
                (cast_illuminant(&scene, &left), left, None)
            };
            Ok(SynthImage {
                id: format!("img{i:04}"),
                scene,
                image,
                illuminant,
                fold: i % FOLDS,
                gt_map,
            })
        })
        .collect()
}

/// In-memory dataset built from generated images, without touching disk.
pub fn to_dataset(images: &[SynthImage]) -> Dataset {
    Dataset {
        samples: images
            .iter()
            .map(|s| Sample {
                id: s.id.clone(),
                image: s.image.clone(),
                illuminant: s.illuminant,
                fold: s.fold,
                mask: ExclusionMask::default(),
                gt_map: s.gt_map.clone(),
            })
            .collect(),
    }
}

/// Writes images, ground-truth maps and `manifest.json` into `dir`.
pub fn write_dataset(cfg: &SynthConfig, dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let images = generate(cfg)?;
    let mut entries = Vec::with_capacity(images.len());
    for s in &images {
        let image_path = format!("{}.ppm", s.id);
        save_ppm16(&s.image, dir.join(&image_path))?;
        let gt_map_path = match &s.gt_map {
            Some(map) => {
                let p = format!("{}_gt.ppm", s.id);
                save_illuminant_map(map, dir.join(&p))?;
                Some(p)
            }
            None => None,
        };
        entries.push(ManifestEntry {
            id: s.id.clone(),
            image_path,
            ground_truth: s.illuminant.rgb(),
            fold: s.fold,
            exclusion_rects: Vec::new(),
            gt_map_path,
        });
    }
    let manifest = DatasetManifest::new(entries);
    manifest.write(dir.join("manifest.json"))?;
    Ok(manifest)
}

/// A fixed network whose patch output is the per-channel maximum of the
/// stretched patch: identity 1×1 convolution, one pooling cell spanning the
/// patch, identity fully connected and output layers.
pub fn white_patch_network() -> NetworkParams {
    let mut p = NetworkParams::zeros(3, 1, 1, 3);
    for c in 0..3 {
        p.conv_w.data_mut()[c * 3 + c] = 1.0;
        p.fc_w.data_mut()[c * 3 + c] = 1.0;
        p.out_w.data_mut()[c * 3 + c] = 1.0;
    }
    p
}

/// A 3×3 grid of `patch`-sized cells, one of them cast by an outlier
/// illuminant. Returns the image with the clean and outlier illuminants.
pub fn outlier_image(seed: u64, patch: usize, noise: f64) -> Result<(LinearImage, Illuminant, Illuminant)> {
    let cfg = SynthConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clean = random_illuminant(&mut rng, &cfg);
    let outlier = loop {
        let o = Illuminant::normalize([0, 1, 2].map(|_| rng.gen_range(0.05..1.0)))?;
        if crate::evaluation::angular_error(&o, &clean)? > 5.0 {
            break o;
        }
    };
    let bad_cell = rng.gen_range(0..9);
    let side = 3 * patch;
    let mut px = Vec::with_capacity(side * side);
    let reflect: Vec<[f64; 3]> = (0..side * side)
        .map(|_| [0, 1, 2].map(|_| rng.gen_range(0.1..0.8) + rng.gen_range(-noise..=noise)))
        .collect();
    for y in 0..side {
        for x in 0..side {
            let cell = (y / patch) * 3 + x / patch;
            let (lx, ly) = (x % patch, y % patch);
            // Each cell holds a black and a white pixel so its maximum and
            // minimum are pinned.
            let r = match (lx, ly) {
                (0, 0) => [0.0; 3],
                (1, 0) => [1.0; 3],
                _ => reflect[y * side + x].map(|v| v.clamp(0.0, 0.95)),
            };
            let ill = if cell == bad_cell { outlier } else { clean };
            let i = ill.rgb();
            px.push([r[0] * i[0], r[1] * i[1], r[2] * i[2]]);
        }
    }
    Ok((LinearImage::new(side, side, px)?, clean, outlier))
}
