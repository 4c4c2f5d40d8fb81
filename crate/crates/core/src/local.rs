//! Per-patch illuminant maps for spatially varying illumination, 3×3 spatial
//! filtering of the map, and per-cell angular error maps.

use std::fmt::Write as _;

use crate::cnn::NetworkParams;
use crate::error::{Error, Result};
use crate::estimator::estimate_patch;
use crate::evaluation::angular_error;
use crate::image::{Illuminant, LinearImage};
use crate::parallel;
use crate::patch::{extract_grid_patches, grid_dims, histogram_stretch};
use crate::statistics::reflect;

/// Grid of illuminants, one per `patch_size`×`patch_size` cell, row-major.
/// A `patch_size` of 1 is a per-pixel map.
#[derive(Clone, Debug, PartialEq)]
pub struct IlluminantMap {
    grid_w: usize,
    grid_h: usize,
    patch_size: usize,
    estimates: Vec<Illuminant>,
}

impl IlluminantMap {
    pub fn new(grid_w: usize, grid_h: usize, patch_size: usize, estimates: Vec<Illuminant>) -> Result<Self> {
        if grid_w == 0 || grid_h == 0 || patch_size == 0 {
            return Err(Error::Shape(format!(
                "map grid {grid_w}x{grid_h} with cell size {patch_size} is empty"
            )));
        }
        if estimates.len() != grid_w * grid_h {
            return Err(Error::Shape(format!(
                "{grid_w}x{grid_h} map needs {} estimates, got {}",
                grid_w * grid_h,
                estimates.len()
            )));
        }
        Ok(Self {
            grid_w,
            grid_h,
            patch_size,
            estimates,
        })
    }

    pub fn uniform(grid_w: usize, grid_h: usize, patch_size: usize, ill: Illuminant) -> Result<Self> {
        Self::new(grid_w, grid_h, patch_size, vec![ill; grid_w * grid_h])
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn estimates(&self) -> &[Illuminant] {
        &self.estimates
    }

    pub fn get(&self, x: usize, y: usize) -> Illuminant {
        self.estimates[y * self.grid_w + x]
    }

    /// Aggregates this map onto a coarser grid of `cell`×`cell` blocks of
    /// this map's cells (partial blocks dropped). Each block takes the
    /// illuminant covering most of its cells; ties go to the one met first in
    /// row-major order, which is the left one for a vertical split.
    pub fn majority_downsample(&self, cell: usize) -> Result<Self> {
        let (gw, gh) = (self.grid_w / cell.max(1), self.grid_h / cell.max(1));
        let mut out = Vec::with_capacity(gw * gh);
        for by in 0..gh {
            for bx in 0..gw {
                let mut counts: Vec<(Illuminant, usize)> = Vec::new();
                for y in by * cell..(by + 1) * cell {
                    for x in bx * cell..(bx + 1) * cell {
                        let ill = self.get(x, y);
                        match counts.iter_mut().find(|(i, _)| *i == ill) {
                            Some((_, n)) => *n += 1,
                            None => counts.push((ill, 1)),
                        }
                    }
                }
                let best = counts.iter().map(|(_, n)| *n).max().unwrap_or(0);
                let winner = counts.iter().find(|(_, n)| *n == best).map(|(i, _)| *i);
                out.push(winner.ok_or_else(|| Error::Shape("empty block".into()))?);
            }
        }
        Self::new(gw, gh, self.patch_size * cell, out)
    }

    /// Renders the map as an image, each cell a `patch_size` square whose
    /// color is the unit illuminant scaled by 1/√3.
    pub fn to_image(&self) -> LinearImage {
        let s = self.patch_size;
        let k = 1.0 / 3f64.sqrt();
        let (w, h) = (self.grid_w * s, self.grid_h * s);
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                data.push(self.get(x / s, y / s).rgb().map(|v| v * k));
            }
        }
        LinearImage::from_raw(w, h, data)
    }

    /// CSV with header `grid_x,grid_y,r,g,b`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("grid_x,grid_y,r,g,b\n");
        for y in 0..self.grid_h {
            for x in 0..self.grid_w {
                let v = self.get(x, y).rgb();
                let _ = writeln!(s, "{x},{y},{:.6},{:.6},{:.6}", v[0], v[1], v[2]);
            }
        }
        s
    }
}

/// Per-patch estimates over the non-overlapping grid.
///
/// Degenerate (flat) cells take the estimate of the nearest usable cell;
/// among equally near cells the leftmost, then the topmost, wins.
pub fn estimate_local_map(params: &NetworkParams, img: &LinearImage, patch_size: usize) -> Result<IlluminantMap> {
    let (gw, gh) = grid_dims(img, patch_size);
    if gw == 0 || gh == 0 {
        return Err(Error::ImageTooSmall(format!(
            "{}x{} image has no {patch_size}-pixel patch",
            img.width(),
            img.height()
        )));
    }
    let patches = extract_grid_patches(img, patch_size);
    let cells: Vec<Option<Illuminant>> = parallel::map(&patches, |p| {
        let s = histogram_stretch(p);
        if s.degenerate {
            Ok(None)
        } else {
            estimate_patch(params, &s).map(Some)
        }
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let usable: Vec<(usize, usize, Illuminant)> = cells
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.map(|ill| (i % gw, i / gw, ill)))
        .collect();
    if usable.is_empty() {
        return Err(Error::EstimationImpossible("every patch is degenerate".into()));
    }
    let estimates = cells
        .iter()
        .enumerate()
        .map(|(i, c)| {
            c.unwrap_or_else(|| {
                let (x, y) = ((i % gw) as i64, (i / gw) as i64);
                usable
                    .iter()
                    .min_by_key(|(ux, uy, _)| {
                        let (dx, dy) = (*ux as i64 - x, *uy as i64 - y);
                        (dx * dx + dy * dy, *ux, *uy)
                    })
                    .map(|(_, _, ill)| *ill)
                    .expect("non-empty")
            })
        })
        .collect();
    IlluminantMap::new(gw, gh, patch_size, estimates)
}

/// The normalized 3×3 kernel sampled from a Gaussian with σ = 0.8.
pub fn gaussian_3x3_kernel() -> [[f64; 3]; 3] {
    let t = [-1.0f64, 0.0, 1.0].map(|i| (-(i * i) / (2.0 * 0.8 * 0.8)).exp());
    let total: f64 = t.iter().sum::<f64>().powi(2);
    let mut k = [[0.0; 3]; 3];
    for (dy, row) in k.iter_mut().enumerate() {
        for (dx, v) in row.iter_mut().enumerate() {
            *v = t[dy] * t[dx] / total;
        }
    }
    k
}

fn neighborhood(map: &IlluminantMap, x: usize, y: usize) -> [[f64; 3]; 9] {
    let mut out = [[0.0; 3]; 9];
    for dy in 0..3 {
        for dx in 0..3 {
            let sx = reflect(x as i64 + dx as i64 - 1, map.grid_w);
            let sy = reflect(y as i64 + dy as i64 - 1, map.grid_h);
            out[dy * 3 + dx] = map.get(sx, sy).rgb();
        }
    }
    out
}

/// Gaussian-filtered cell values before renormalization.
pub fn gaussian_3x3_raw(map: &IlluminantMap) -> Vec<[f64; 3]> {
    let k = gaussian_3x3_kernel();
    (0..map.grid_w * map.grid_h)
        .map(|i| {
            let nb = neighborhood(map, i % map.grid_w, i / map.grid_w);
            let mut acc = [0.0; 3];
            for (j, v) in nb.iter().enumerate() {
                for c in 0..3 {
                    acc[c] += k[j / 3][j % 3] * v[c];
                }
            }
            acc
        })
        .collect()
}

/// Per-channel 3×3 median cell values before renormalization.
pub fn median_3x3_raw(map: &IlluminantMap) -> Vec<[f64; 3]> {
    (0..map.grid_w * map.grid_h)
        .map(|i| {
            let nb = neighborhood(map, i % map.grid_w, i / map.grid_w);
            [0, 1, 2].map(|c| {
                let mut v = nb.map(|p| p[c]);
                v.sort_by(f64::total_cmp);
                v[4]
            })
        })
        .collect()
}

fn renormalized(map: &IlluminantMap, raw: Vec<[f64; 3]>) -> Result<IlluminantMap> {
    let est = raw.into_iter().map(Illuminant::normalize).collect::<Result<Vec<_>>>()?;
    IlluminantMap::new(map.grid_w, map.grid_h, map.patch_size, est)
}

/// 3×3 Gaussian smoothing of the map (reflect padding), then renormalization.
pub fn filter_gaussian_3x3(map: &IlluminantMap) -> Result<IlluminantMap> {
    renormalized(map, gaussian_3x3_raw(map))
}

/// Per-channel 3×3 median of the map (reflect padding), then renormalization.
pub fn filter_median_3x3(map: &IlluminantMap) -> Result<IlluminantMap> {
    renormalized(map, median_3x3_raw(map))
}

/// Per-cell angular errors in degrees.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorMap {
    pub grid_w: usize,
    pub grid_h: usize,
    pub degrees: Vec<f64>,
}

impl ErrorMap {
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.degrees[y * self.grid_w + x]
    }

    /// CSV with header `grid_x,grid_y,degrees`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("grid_x,grid_y,degrees\n");
        for (i, d) in self.degrees.iter().enumerate() {
            let _ = writeln!(s, "{},{},{d:.4}", i % self.grid_w, i / self.grid_w);
        }
        s
    }
}

pub fn angular_error_map(est: &IlluminantMap, gt: &IlluminantMap) -> Result<ErrorMap> {
    if (est.grid_w, est.grid_h) != (gt.grid_w, gt.grid_h) {
        return Err(Error::Shape(format!(
            "estimate grid {}x{} vs ground truth {}x{}",
            est.grid_w, est.grid_h, gt.grid_w, gt.grid_h
        )));
    }
    let degrees = est
        .estimates
        .iter()
        .zip(&gt.estimates)
        .map(|(a, b)| angular_error(a, b))
        .collect::<Result<_>>()?;
    Ok(ErrorMap {
        grid_w: est.grid_w,
        grid_h: est.grid_h,
        degrees,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::summarize;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ill(v: [f64; 3]) -> Illuminant {
        Illuminant::normalize(v).unwrap()
    }

    fn random_map(w: usize, h: usize, seed: u64) -> IlluminantMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let est = (0..w * h)
            .map(|_| ill([rng.gen::<f64>() + 0.05, rng.gen::<f64>() + 0.05, rng.gen::<f64>() + 0.05]))
            .collect();
        IlluminantMap::new(w, h, 32, est).unwrap()
    }

    #[test]
    fn constant_map_is_fixed_point() {
        let m = IlluminantMap::uniform(5, 4, 32, ill([0.6, 0.5, 0.3])).unwrap();
        for f in [filter_gaussian_3x3(&m).unwrap(), filter_median_3x3(&m).unwrap()] {
            for (a, b) in f.estimates().iter().zip(m.estimates()) {
                assert!(angular_error(a, b).unwrap() < 1e-6);
            }
        }
        let one = IlluminantMap::uniform(1, 1, 32, ill([0.6, 0.5, 0.3])).unwrap();
        assert!(filter_median_3x3(&one).is_ok());
    }

    #[test]
    fn single_outlier() {
        let base = ill([0.6, 0.5, 0.3]);
        let mut est = vec![base; 25];
        est[12] = ill([0.1, 0.2, 0.9]);
        let m = IlluminantMap::new(5, 5, 32, est).unwrap();
        let med = filter_median_3x3(&m).unwrap();
        assert!(med.estimates().iter().all(|e| *e == base));
        let gauss = filter_gaussian_3x3(&m).unwrap();
        let centre = angular_error(&gauss.get(2, 2), &base).unwrap();
        let before = angular_error(&m.get(2, 2), &base).unwrap();
        assert!(centre > 0.1 && centre < before);
        let gt = IlluminantMap::uniform(5, 5, 32, base).unwrap();
        let max_err = |m: &IlluminantMap| angular_error_map(m, &gt).unwrap().degrees.into_iter().fold(0.0, f64::max);
        assert!(max_err(&gauss) <= max_err(&m));
        assert!(max_err(&med) <= max_err(&m));
    }

    #[test]
    fn gaussian_matches_dense_convolution() {
        let m = random_map(6, 4, 3);
        let raw = gaussian_3x3_raw(&m);
        let s = 0.8f64;
        let w = |d: i64| (-(d * d) as f64 / (2.0 * s * s)).exp();
        let norm: f64 = (-1..=1).flat_map(|a| (-1..=1).map(move |b| w(a) * w(b))).sum();
        // Mirror padding written out explicitly for the oracle.
        let mirror = |i: i64, n: i64| if i < 0 { -i } else if i >= n { 2 * (n - 1) - i } else { i };
        for y in 0..4i64 {
            for x in 0..6i64 {
                let mut acc = [0.0; 3];
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let v = m.get(mirror(x + dx, 6) as usize, mirror(y + dy, 4) as usize).rgb();
                        for c in 0..3 {
                            acc[c] += w(dx) * w(dy) / norm * v[c];
                        }
                    }
                }
                let got = raw[(y * 6 + x) as usize];
                for c in 0..3 {
                    assert!((got[c] - acc[c]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn median_output_comes_from_neighborhood() {
        let m = random_map(7, 5, 4);
        let raw = median_3x3_raw(&m);
        for y in 0..5 {
            for x in 0..7 {
                let nb = neighborhood(&m, x, y);
                for c in 0..3 {
                    assert!(nb.iter().any(|p| p[c] == raw[y * 7 + x][c]));
                }
            }
        }
    }

    #[test]
    fn error_map_cases() {
        let a = ill([1.0, 0.0, 0.0]);
        let m = IlluminantMap::uniform(3, 2, 32, a).unwrap();
        let e = angular_error_map(&m, &m).unwrap();
        assert!(e.degrees.iter().all(|d| *d == 0.0));
        let mut est = vec![a; 6];
        est[4] = ill([0.0, 1.0, 0.0]);
        let e = angular_error_map(&IlluminantMap::new(3, 2, 32, est).unwrap(), &m).unwrap();
        assert!((e.get(1, 1) - 90.0).abs() < 1e-9);
        assert_eq!(e.degrees.iter().filter(|d| **d == 0.0).count(), 5);
        let other = IlluminantMap::uniform(2, 3, 32, a).unwrap();
        assert!(angular_error_map(&m, &other).is_err());
    }

    #[test]
    fn error_map_statistics_compose_with_summarize() {
        let est = random_map(5, 5, 8);
        let gt = random_map(5, 5, 9);
        let e = angular_error_map(&est, &gt).unwrap();
        let direct: Vec<f64> = est
            .estimates()
            .iter()
            .zip(gt.estimates())
            .map(|(a, b)| angular_error(a, b).unwrap())
            .collect();
        assert_eq!(summarize(&e.degrees).unwrap(), summarize(&direct).unwrap());
    }

    #[test]
    fn majority_downsample_takes_left_on_ties() {
        let l = ill([1.0, 0.2, 0.2]);
        let r = ill([0.2, 0.2, 1.0]);
        // 6 pixels wide, cell 4: first cell has 3 left and 1 right column.
        let px: Vec<_> = (0..6 * 4).map(|i| if i % 6 < 3 { l } else { r }).collect();
        let m = IlluminantMap::new(6, 4, 1, px).unwrap();
        let g = m.majority_downsample(4).unwrap();
        assert_eq!((g.grid_w(), g.grid_h()), (1, 1));
        assert_eq!(g.get(0, 0), l);
        // Exactly half: columns 0..2 left, 2..4 right.
        let px: Vec<_> = (0..4 * 2).map(|i| if i % 4 < 2 { l } else { r }).collect();
        let m = IlluminantMap::new(4, 2, 1, px).unwrap();
        assert_eq!(m.majority_downsample(2).unwrap().estimates(), &[l, r]);
        let px: Vec<_> = (0..4 * 4).map(|i| if i % 4 < 2 { l } else { r }).collect();
        let m = IlluminantMap::new(4, 4, 1, px).unwrap();
        assert_eq!(m.majority_downsample(4).unwrap().get(0, 0), l);
    }

    #[test]
    fn csv_and_image_export() {
        let m = IlluminantMap::uniform(2, 1, 3, Illuminant::neutral()).unwrap();
        let csv = m.to_csv();
        assert!(csv.starts_with("grid_x,grid_y,r,g,b\n0,0,0.577350"));
        assert_eq!(csv.lines().count(), 3);
        let img = m.to_image();
        assert_eq!((img.width(), img.height()), (6, 3));
        assert!((img.pixel(5, 2)[0] - 1.0 / 3.0).abs() < 1e-12);
    }
}
