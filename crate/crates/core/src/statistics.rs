//! The derivative/Minkowski-norm estimator family (gray world, white point,
//! shades of gray, general gray world, gray edge) and the do-nothing
//! baseline.
//!
//! An estimate is computed in three stages: Gaussian smoothing at scale
//! `sigma`, the per-channel magnitude of the `n`-th order spatial derivative,
//! and a per-channel Minkowski `p`-mean over all pixels. Sums run row-major
//! and sequentially, so repeated runs are bit-identical.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Illuminant, LinearImage};
use crate::parallel;

/// Minkowski norm exponent, with an explicit infinity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum MinkowskiNorm {
    Finite(f64),
    Infinity,
}

impl fmt::Display for MinkowskiNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MinkowskiNorm::Finite(p) => write!(f, "{p}"),
            MinkowskiNorm::Infinity => f.write_str("inf"),
        }
    }
}

/// The `(n, p, sigma)` triple selecting one estimator of the family.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeFrameworkParams {
    order: u8,
    norm: MinkowskiNorm,
    sigma: f64,
}

impl EdgeFrameworkParams {
    /// Validated constructor. Derivatives of order ≥ 1 need `sigma > 0`.
    pub fn new(order: u8, norm: MinkowskiNorm, sigma: f64) -> Result<Self> {
        Self::build(order, norm, sigma, false)
    }

    /// Like [`new`](Self::new) but allows derivatives on the raw image.
    pub fn new_unsmoothed(order: u8, norm: MinkowskiNorm, sigma: f64) -> Result<Self> {
        Self::build(order, norm, sigma, true)
    }

    fn build(order: u8, norm: MinkowskiNorm, sigma: f64, allow_unsmoothed: bool) -> Result<Self> {
        if order > 2 {
            return Err(Error::Parameter(format!(
                "derivative order must be 0, 1 or 2, got {order}"
            )));
        }
        if !sigma.is_finite() || sigma < 0.0 {
            return Err(Error::Parameter(format!("sigma must be >= 0, got {sigma}")));
        }
        if let MinkowskiNorm::Finite(p) = norm {
            if !p.is_finite() || p <= 0.0 {
                return Err(Error::Parameter(format!(
                    "Minkowski norm must be > 0 or infinity, got {p}"
                )));
            }
        }
        if order >= 1 && sigma == 0.0 && !allow_unsmoothed {
            return Err(Error::Parameter(format!(
                "derivative order {order} requires sigma > 0"
            )));
        }
        Ok(Self { order, norm, sigma })
    }

    pub fn order(&self) -> u8 {
        self.order
    }

    pub fn norm(&self) -> MinkowskiNorm {
        self.norm
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }
}

/// Named presets of the estimator family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Preset {
    GW,
    WP,
    SoG,
    #[allow(non_camel_case_types)]
    gGW,
    GE1,
    GE2,
}

impl Preset {
    pub const ALL: [Preset; 6] = [
        Preset::GW,
        Preset::WP,
        Preset::SoG,
        Preset::gGW,
        Preset::GE1,
        Preset::GE2,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Preset::GW => "GW",
            Preset::WP => "WP",
            Preset::SoG => "SoG",
            Preset::gGW => "gGW",
            Preset::GE1 => "GE1",
            Preset::GE2 => "GE2",
        }
    }

    pub fn params(&self) -> EdgeFrameworkParams {
        use MinkowskiNorm::*;
        let (order, norm, sigma) = match self {
            Preset::GW => (0, Finite(1.0), 0.0),
            Preset::WP => (0, Infinity, 0.0),
            Preset::SoG => (0, Finite(4.0), 0.0),
            Preset::gGW => (0, Finite(9.0), 9.0),
            Preset::GE1 => (1, Finite(1.0), 6.0),
            Preset::GE2 => (2, Finite(1.0), 1.0),
        };
        EdgeFrameworkParams { order, norm, sigma }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .iter()
            .copied()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Preset::ALL.iter().map(|p| p.name()).collect();
                Error::Parameter(format!(
                    "unknown preset {s:?}; valid names are {}",
                    names.join(", ")
                ))
            })
    }
}

/// Looks up a preset by name and returns its parameter triple.
pub fn preset(name: &str) -> Result<EdgeFrameworkParams> {
    name.parse::<Preset>().map(|p| p.params())
}

/// The estimate that assumes the image is already balanced.
pub fn do_nothing() -> Illuminant {
    Illuminant::neutral()
}

/// Normalized 1-D Gaussian taps for radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Mirror index without edge repetition (`d c b | a b c d | c b a`).
pub(crate) fn reflect(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    (if m < n as i64 { m } else { period - m }) as usize
}

/// Separable Gaussian blur with reflect padding; `sigma = 0` is the identity.
pub fn gaussian_smooth(img: &LinearImage, sigma: f64) -> LinearImage {
    if sigma <= 0.0 {
        return img.clone();
    }
    let taps = gaussian_kernel(sigma);
    let radius = (taps.len() / 2) as i64;
    let (w, h) = (img.width(), img.height());
    let src = img.pixels();

    let mut horizontal = vec![[0.0; 3]; w * h];
    parallel::for_each_row(&mut horizontal, w, |y, row| {
        for (x, out) in row.iter_mut().enumerate() {
            let mut acc = [0.0; 3];
            for (k, t) in taps.iter().enumerate() {
                let sx = reflect(x as i64 + k as i64 - radius, w);
                let p = src[y * w + sx];
                for c in 0..3 {
                    acc[c] += t * p[c];
                }
            }
            *out = acc;
        }
    });

    let mut out = vec![[0.0; 3]; w * h];
    parallel::for_each_row(&mut out, w, |y, row| {
        for (x, o) in row.iter_mut().enumerate() {
            let mut acc = [0.0; 3];
            for (k, t) in taps.iter().enumerate() {
                let sy = reflect(y as i64 + k as i64 - radius, h);
                let p = horizontal[sy * w + x];
                for c in 0..3 {
                    acc[c] += t * p[c];
                }
            }
            // Weighted sums of nonnegative values with positive weights.
            *o = acc.map(|v| v.max(0.0));
        }
    });
    LinearImage::from_raw(w, h, out)
}

/// Per-channel magnitude of the `order`-th spatial derivative.
///
/// Order 1 uses central differences, order 2 the 3-point second differences
/// plus the 4-point cross stencil; both replicate border pixels.
pub fn derivative_magnitude(img: &LinearImage, order: u8) -> Result<LinearImage> {
    let (w, h) = (img.width(), img.height());
    let src = img.pixels();
    let at = |x: i64, y: i64| -> [f64; 3] {
        let cx = x.clamp(0, w as i64 - 1) as usize;
        let cy = y.clamp(0, h as i64 - 1) as usize;
        src[cy * w + cx]
    };
    let mut out = vec![[0.0; 3]; w * h];
    match order {
        0 => {
            for (o, p) in out.iter_mut().zip(src) {
                *o = p.map(f64::abs);
            }
        }
        1 => parallel::for_each_row(&mut out, w, |y, row| {
            let y = y as i64;
            for (x, o) in row.iter_mut().enumerate() {
                let x = x as i64;
                let (r, l, d, u) = (at(x + 1, y), at(x - 1, y), at(x, y + 1), at(x, y - 1));
                for c in 0..3 {
                    let dx = 0.5 * (r[c] - l[c]);
                    let dy = 0.5 * (d[c] - u[c]);
                    o[c] = (dx * dx + dy * dy).sqrt();
                }
            }
        }),
        2 => parallel::for_each_row(&mut out, w, |y, row| {
            let y = y as i64;
            for (x, o) in row.iter_mut().enumerate() {
                let x = x as i64;
                let centre = at(x, y);
                let (r, l, d, u) = (at(x + 1, y), at(x - 1, y), at(x, y + 1), at(x, y - 1));
                let (rd, ru, ld, lu) = (
                    at(x + 1, y + 1),
                    at(x + 1, y - 1),
                    at(x - 1, y + 1),
                    at(x - 1, y - 1),
                );
                for c in 0..3 {
                    let dxx = r[c] - 2.0 * centre[c] + l[c];
                    let dyy = d[c] - 2.0 * centre[c] + u[c];
                    let dxy = 0.25 * (rd[c] - ru[c] - ld[c] + lu[c]);
                    o[c] = (dxx * dxx + dyy * dyy + 2.0 * dxy * dxy).sqrt();
                }
            }
        }),
        n => {
            return Err(Error::Parameter(format!(
                "derivative order must be 0, 1 or 2, got {n}"
            )))
        }
    }
    Ok(LinearImage::from_raw(w, h, out))
}

/// Per-channel Minkowski mean `(sum |v|^p / N)^(1/p)`, or the maximum for
/// `p = inf`.
pub fn minkowski_mean(values: &[[f64; 3]], norm: MinkowskiNorm) -> [f64; 3] {
    let mut acc = [0.0f64; 3];
    match norm {
        MinkowskiNorm::Infinity => {
            for v in values {
                for c in 0..3 {
                    acc[c] = acc[c].max(v[c].abs());
                }
            }
            acc
        }
        MinkowskiNorm::Finite(p) => {
            for v in values {
                for c in 0..3 {
                    acc[c] += if p == 1.0 { v[c].abs() } else { v[c].abs().powf(p) };
                }
            }
            let n = values.len() as f64;
            acc.map(|s| {
                let mean = s / n;
                if p == 1.0 {
                    mean
                } else {
                    mean.powf(1.0 / p)
                }
            })
        }
    }
}

/// Unnormalized per-channel response of the estimator on `img`.
pub fn minkowski_response(img: &LinearImage, params: &EdgeFrameworkParams) -> Result<[f64; 3]> {
    let smoothed = gaussian_smooth(img, params.sigma);
    let deriv = derivative_magnitude(&smoothed, params.order)?;
    Ok(minkowski_mean(deriv.pixels(), params.norm))
}

/// Estimates the illuminant direction with the `(n, p, sigma)` estimator.
pub fn minkowski_estimate(img: &LinearImage, params: &EdgeFrameworkParams) -> Result<Illuminant> {
    let response = minkowski_response(img, params)?;
    if response.iter().all(|v| *v == 0.0) {
        return Err(Error::DegenerateEstimate(
            "estimator response is zero in every channel".into(),
        ));
    }
    Illuminant::normalize(response)
}
