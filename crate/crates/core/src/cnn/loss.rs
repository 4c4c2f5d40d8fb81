use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{norm3, Illuminant};

/// Cosine clamp keeping `arccos` away from its singular derivative.
pub const ANGULAR_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Euclidean,
    Angular,
}

impl LossKind {
    pub fn eval(&self, est: [f64; 3], gt: &Illuminant) -> Result<(f64, [f64; 3])> {
        match self {
            LossKind::Euclidean => Ok(euclidean_loss(est, gt.rgb())),
            LossKind::Angular => angular_loss(est, gt),
        }
    }
}

/// `½‖est − gt‖²` and its gradient `est − gt`.
pub fn euclidean_loss(est: [f64; 3], g: [f64; 3]) -> (f64, [f64; 3]) {
    let r = [est[0] - g[0], est[1] - g[1], est[2] - g[2]];
    (0.5 * (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]), r)
}

/// Angle in radians between `est` and the unit vector `gt`, with gradient.
pub fn angular_loss(est: [f64; 3], gt: &Illuminant) -> Result<(f64, [f64; 3])> {
    let norm = norm3(est);
    if norm.is_nan() || norm < 1e-9 {
        return Err(Error::DegenerateEstimate(format!(
            "estimate {est:?} has norm below 1e-9"
        )));
    }
    let g = gt.rgb();
    let u = est.map(|v| v / norm);
    let cos = u[0] * g[0] + u[1] * g[1] + u[2] * g[2];
    let clamped = cos.clamp(-1.0 + ANGULAR_CLAMP, 1.0 - ANGULAR_CLAMP);
    let loss = clamped.acos();
    if clamped != cos {
        return Ok((loss, [0.0; 3]));
    }
    // d acos(c)/dc · dc/dest, with dc/dest = (g − c·u)/‖est‖
    let scale = -1.0 / ((1.0 - cos * cos).sqrt() * norm);
    let grad = [0, 1, 2].map(|c| scale * (g[c] - cos * u[c]));
    Ok((loss, grad))
}
