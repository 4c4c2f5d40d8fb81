//! Resizing, grid and random patch extraction, exclusion masks and global
//! histogram stretching.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::LinearImage;

/// Maximum rejected draws per patch before sampling gives up.
pub const MAX_REJECTIONS: usize = 10_000;

/// Square image patch, stored row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub size: usize,
    /// Top-left corner in source-image pixels.
    pub origin: (usize, usize),
    pub data: Vec<f64>,
    /// Set by [`histogram_stretch`] when the patch has no contrast.
    pub degenerate: bool,
}

impl Patch {
    /// Copies the `size`×`size` block at `origin` out of `img`.
    pub fn from_image(img: &LinearImage, origin: (usize, usize), size: usize) -> Self {
        let mut data = Vec::with_capacity(size * size * 3);
        for y in origin.1..origin.1 + size {
            for x in origin.0..origin.0 + size {
                data.extend_from_slice(&img.pixel(x, y));
            }
        }
        Self {
            size,
            origin,
            data,
            degenerate: false,
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.size + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

/// Axis-aligned rectangle `(x, y, w, h)` in source pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Self { x, y, w, h }
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.x < other.x + other.w
            && other.x < self.x + self.w
            && self.y < other.y + other.h
            && other.y < self.y + self.h
    }
}

/// Regions random patches must avoid, such as a reference chart.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExclusionMask {
    pub rects: Vec<Rect>,
}

impl ExclusionMask {
    pub fn new(rects: Vec<Rect>) -> Self {
        Self { rects }
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        for r in &self.rects {
            if r.x + r.w > width || r.y + r.h > height {
                return Err(Error::Parameter(format!(
                    "mask rectangle {r:?} exceeds image bounds {width}x{height}"
                )));
            }
        }
        Ok(())
    }

    pub fn blocks(&self, footprint: &Rect) -> bool {
        self.rects.iter().any(|r| r.w > 0 && r.h > 0 && r.intersects(footprint))
    }
}

/// Downscales so that `max(w, h) <= target` using bilinear interpolation.
/// Images already small enough are returned unchanged.
pub fn resize_max_side(img: &LinearImage, target: usize) -> LinearImage {
    let (w, h) = (img.width(), img.height());
    let longest = w.max(h);
    if longest <= target {
        return img.clone();
    }
    let scale = target as f64 / longest as f64;
    let nw = ((w as f64 * scale).round() as usize).max(1);
    let nh = ((h as f64 * scale).round() as usize).max(1);
    let sx = w as f64 / nw as f64;
    let sy = h as f64 / nh as f64;

    let axis = |i: usize, step: f64, len: usize| -> (usize, usize, f64) {
        let pos = ((i as f64 + 0.5) * step - 0.5).clamp(0.0, (len - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        (lo, hi, pos - lo as f64)
    };

    let mut data = vec![[0.0; 3]; nw * nh];
    crate::parallel::for_each_row(&mut data, nw, |y, row| {
        let (y0, y1, fy) = axis(y, sy, h);
        for (x, out) in row.iter_mut().enumerate() {
            let (x0, x1, fx) = axis(x, sx, w);
            let (a, b, c, d) = (img.pixel(x0, y0), img.pixel(x1, y0), img.pixel(x0, y1), img.pixel(x1, y1));
            for ch in 0..3 {
                let top = a[ch] + (b[ch] - a[ch]) * fx;
                let bottom = c[ch] + (d[ch] - c[ch]) * fx;
                out[ch] = (top + (bottom - top) * fy).max(0.0);
            }
        }
    });
    LinearImage::from_raw(nw, nh, data)
}

/// Non-overlapping patches tiled from the origin in row-major order; partial
/// border patches are dropped.
pub fn extract_grid_patches(img: &LinearImage, size: usize) -> Vec<Patch> {
    let (gw, gh) = grid_dims(img, size);
    let mut out = Vec::with_capacity(gw * gh);
    for gy in 0..gh {
        for gx in 0..gw {
            out.push(Patch::from_image(img, (gx * size, gy * size), size));
        }
    }
    out
}

/// Grid shape `(floor(w/size), floor(h/size))`.
pub fn grid_dims(img: &LinearImage, size: usize) -> (usize, usize) {
    if size == 0 {
        return (0, 0);
    }
    (img.width() / size, img.height() / size)
}

/// Derives the per-image generator seed from a global seed and an index.
pub fn stream_seed(global: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the combined key
    let mut z = global
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Draws `count` patches with uniform random origins (with replacement),
/// rejecting footprints that touch the mask.
pub fn sample_random_patches(
    img: &LinearImage,
    size: usize,
    count: usize,
    mask: &ExclusionMask,
    seed: u64,
) -> Result<Vec<Patch>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let (w, h) = (img.width(), img.height());
    if size == 0 || size > w || size > h {
        return Err(Error::SamplingImpossible(format!(
            "patch size {size} does not fit in {w}x{h}"
        )));
    }
    let (max_x, max_y) = (w - size, h - size);
    let fits = |x: usize, y: usize| !mask.blocks(&Rect::new(x, y, size, size));
    if !(0..=max_y).any(|y| (0..=max_x).any(|x| fits(x, y))) {
        return Err(Error::SamplingImpossible(
            "exclusion mask leaves no valid patch origin".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut rejections = 0;
        let origin = loop {
            let x = rng.gen_range(0..=max_x);
            let y = rng.gen_range(0..=max_y);
            if fits(x, y) {
                break (x, y);
            }
            rejections += 1;
            if rejections >= MAX_REJECTIONS {
                return Err(Error::SamplingImpossible(format!(
                    "{MAX_REJECTIONS} consecutive draws hit the exclusion mask"
                )));
            }
        };
        out.push(Patch::from_image(img, origin, size));
    }
    Ok(out)
}

/// Global affine stretch of all channels jointly to `[0, 1]`.
///
/// Patches with range below `1e-12` come back zero-filled and flagged
/// degenerate.
pub fn histogram_stretch(p: &Patch) -> Patch {
    let (lo, hi) = p
        .data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    let range = hi - lo;
    if range.is_nan() || range < 1e-12 {
        return Patch {
            size: p.size,
            origin: p.origin,
            data: vec![0.0; p.data.len()],
            degenerate: true,
        };
    }
    Patch {
        size: p.size,
        origin: p.origin,
        data: p.data.iter().map(|v| (v - lo) / range).collect(),
        degenerate: false,
    }
}
