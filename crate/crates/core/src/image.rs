//! Linear RGB images, illuminants, von Kries casting/correction and 16-bit
//! binary PPM IO.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::local::IlluminantMap;

/// Row-major linear RGB raster with nonnegative finite channel values.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearImage {
    width: usize,
    height: usize,
    data: Vec<[f64; 3]>,
}

impl LinearImage {
    pub fn new(width: usize, height: usize, data: Vec<[f64; 3]>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage(format!(
                "dimensions must be at least 1x1, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::InvalidImage(format!(
                "expected {} pixels for {width}x{height}, got {}",
                width * height,
                data.len()
            )));
        }
        if let Some(i) = data
            .iter()
            .position(|p| p.iter().any(|v| !v.is_finite() || *v < 0.0))
        {
            return Err(Error::InvalidImage(format!(
                "pixel {i} has a negative or non-finite channel: {:?}",
                data[i]
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Result<Self> {
        Self::new(width, height, vec![rgb; width * height])
    }

    /// Builds an image from a per-pixel function `f(x, y)`.
    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> [f64; 3],
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, data)
    }

    /// Internal constructor for data already known to satisfy the invariants.
    pub(crate) fn from_raw(width: usize, height: usize, data: Vec<[f64; 3]>) -> Self {
        debug_assert_eq!(data.len(), width * height);
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[[f64; 3]] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        self.data[y * self.width + x]
    }

    pub fn into_pixels(self) -> Vec<[f64; 3]> {
        self.data
    }

    /// Multiplies every channel by `factor` (must be nonnegative).
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(
            self.width,
            self.height,
            self.data
                .iter()
                .map(|p| [p[0] * factor, p[1] * factor, p[2] * factor])
                .collect(),
        )
    }
}

/// Unit-length RGB illuminant color.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct Illuminant([f64; 3]);

impl Illuminant {
    /// Normalizes `v` to unit Euclidean length.
    pub fn normalize(v: [f64; 3]) -> Result<Self> {
        if v.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::InvalidIlluminant(v));
        }
        let norm = norm3(v);
        if !norm.is_finite() || norm <= 0.0 {
            return Err(Error::InvalidIlluminant(v));
        }
        // Already unit length: keep the bits so normalizing is idempotent.
        if (norm - 1.0).abs() < 1e-15 {
            return Ok(Self(v));
        }
        Ok(Self([v[0] / norm, v[1] / norm, v[2] / norm]))
    }

    /// The neutral illuminant (1,1,1)/√3.
    pub fn neutral() -> Self {
        let c = 1.0 / 3f64.sqrt();
        Self([c, c, c])
    }

    pub fn rgb(&self) -> [f64; 3] {
        self.0
    }

    pub fn is_strictly_positive(&self) -> bool {
        self.0.iter().all(|c| *c > 0.0)
    }
}

impl TryFrom<[f64; 3]> for Illuminant {
    type Error = Error;

    fn try_from(v: [f64; 3]) -> Result<Self> {
        Self::normalize(v)
    }
}

impl From<Illuminant> for [f64; 3] {
    fn from(i: Illuminant) -> Self {
        i.0
    }
}

pub(crate) fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

pub fn normalize(v: [f64; 3]) -> Result<Illuminant> {
    Illuminant::normalize(v)
}

/// Result of a von Kries correction.
#[derive(Clone, Debug)]
pub struct Corrected {
    pub image: LinearImage,
    /// Number of channel values above 1 after correction.
    pub saturated: usize,
}

/// Divides every pixel channel by the matching illuminant channel.
pub fn correct_von_kries(img: &LinearImage, ill: &Illuminant) -> Result<Corrected> {
    let gains = ill.rgb();
    if let Some(c) = gains.iter().position(|g| *g <= 0.0) {
        return Err(Error::DivisionByZero {
            channel: c,
            value: gains[c],
        });
    }
    let mut saturated = 0;
    let data: Vec<[f64; 3]> = img
        .pixels()
        .iter()
        .map(|p| {
            let mut out = [0.0; 3];
            for c in 0..3 {
                out[c] = (p[c] / gains[c]).max(0.0);
                if out[c] > 1.0 {
                    saturated += 1;
                }
            }
            out
        })
        .collect();
    Ok(Corrected {
        image: LinearImage::from_raw(img.width(), img.height(), data),
        saturated,
    })
}

/// Multiplies every pixel channel by the matching illuminant channel.
pub fn cast_illuminant(img: &LinearImage, ill: &Illuminant) -> LinearImage {
    let g = ill.rgb();
    let data = img
        .pixels()
        .iter()
        .map(|p| [p[0] * g[0], p[1] * g[1], p[2] * g[2]])
        .collect();
    LinearImage::from_raw(img.width(), img.height(), data)
}

/// Casts columns `[0, w/2)` with `left` and `[w/2, w)` with `right`.
///
/// Returns the cast image and a pixel-resolution ground-truth map.
pub fn compose_two_illuminants(
    img: &LinearImage,
    left: &Illuminant,
    right: &Illuminant,
) -> Result<(LinearImage, IlluminantMap)> {
    let (w, h) = (img.width(), img.height());
    if w < 2 {
        return Err(Error::ImageTooSmall(format!(
            "two-illuminant composition needs width >= 2, got {w}"
        )));
    }
    let split = w / 2;
    let mut data = Vec::with_capacity(w * h);
    let mut truth = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let ill = if x < split { left } else { right };
            let g = ill.rgb();
            let p = img.pixel(x, y);
            data.push([p[0] * g[0], p[1] * g[1], p[2] * g[2]]);
            truth.push(*ill);
        }
    }
    let map = IlluminantMap::new(w, h, 1, truth)?;
    Ok((LinearImage::from_raw(w, h, data), map))
}

const PPM_MAX: f64 = 65535.0;

/// Encodes an image as binary P6 with maxval 65535.
pub fn encode_ppm16(img: &LinearImage, comment: Option<&str>) -> Vec<u8> {
    let mut out = Vec::with_capacity(img.pixels().len() * 6 + 64);
    out.extend_from_slice(b"P6\n");
    if let Some(c) = comment {
        for line in c.lines() {
            out.extend_from_slice(format!("# {line}\n").as_bytes());
        }
    }
    out.extend_from_slice(format!("{} {}\n65535\n", img.width(), img.height()).as_bytes());
    for p in img.pixels() {
        for v in p {
            let q = (v.clamp(0.0, 1.0) * PPM_MAX + 0.5).floor() as u16;
            out.extend_from_slice(&q.to_be_bytes());
        }
    }
    out
}

/// Decodes a binary P6 PPM with maxval 65535.
pub fn decode_ppm16(bytes: &[u8]) -> Result<LinearImage> {
    let mut cur = HeaderCursor { bytes, pos: 0, token_start: 0 };
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(Error::Format {
            offset: 0,
            message: "missing P6 magic".into(),
        });
    }
    cur.pos = 2;
    let width = cur.next_number("width")?;
    let height = cur.next_number("height")?;
    let maxval = cur.next_number("maxval")?;
    let maxval_offset = cur.token_start;
    if maxval != 65535 {
        return Err(Error::Format {
            offset: maxval_offset,
            message: format!("maxval must be 65535, got {maxval}"),
        });
    }
    // Exactly one whitespace byte separates the header from the payload.
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => {
            return Err(Error::Format {
                offset: cur.pos,
                message: "expected whitespace after maxval".into(),
            })
        }
    }
    if width == 0 || height == 0 {
        return Err(Error::Format {
            offset: 0,
            message: format!("zero dimension {width}x{height}"),
        });
    }
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(6))
        .ok_or_else(|| Error::Format {
            offset: 0,
            message: "dimensions overflow".into(),
        })?;
    let payload = &bytes[cur.pos..];
    if payload.len() < expected {
        return Err(Error::Format {
            offset: cur.pos + payload.len(),
            message: format!(
                "truncated payload: expected {expected} bytes, found {}",
                payload.len()
            ),
        });
    }
    let data = payload[..expected]
        .chunks_exact(6)
        .map(|s| {
            let ch = |i: usize| u16::from_be_bytes([s[2 * i], s[2 * i + 1]]) as f64 / PPM_MAX;
            [ch(0), ch(1), ch(2)]
        })
        .collect();
    Ok(LinearImage::from_raw(width, height, data))
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    token_start: usize,
}

impl HeaderCursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn next_number(&mut self, what: &str) -> Result<usize> {
        let start = self.pos;
        self.skip_space_and_comments();
        if self.pos == start {
            return Err(Error::Format {
                offset: self.pos,
                message: format!("expected whitespace before {what}"),
            });
        }
        let digits_start = self.pos;
        self.token_start = digits_start;
        while self
            .bytes
            .get(self.pos)
            .is_some_and(|b| b.is_ascii_digit())
        {
            self.pos += 1;
        }
        if self.pos == digits_start {
            return Err(Error::Format {
                offset: self.pos,
                message: format!("expected {what}"),
            });
        }
        std::str::from_utf8(&self.bytes[digits_start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format {
                offset: digits_start,
                message: format!("{what} out of range"),
            })
    }
}

pub fn save_ppm16(img: &LinearImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ppm16(img, None)).map_err(|e| Error::io(path, e))
}

pub fn load_ppm16(path: impl AsRef<Path>) -> Result<LinearImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm16(&bytes)
}

const MAP_COMMENT: &str =
    "illuminant map: each pixel is a unit RGB vector scaled by 65535/sqrt(3)";

fn map_scale() -> f64 {
    1.0 / 3f64.sqrt()
}

/// Writes an illuminant map with one pixel per cell.
pub fn save_illuminant_map(map: &IlluminantMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let s = map_scale();
    let data = map
        .estimates()
        .iter()
        .map(|i| {
            let v = i.rgb();
            [v[0] * s, v[1] * s, v[2] * s]
        })
        .collect();
    let img = LinearImage::from_raw(map.grid_w(), map.grid_h(), data);
    fs::write(path, encode_ppm16(&img, Some(MAP_COMMENT))).map_err(|e| Error::io(path, e))
}

/// Reads a map written by [`save_illuminant_map`]; `patch_size` is the
/// number of image pixels per cell side.
pub fn load_illuminant_map(path: impl AsRef<Path>, patch_size: usize) -> Result<IlluminantMap> {
    let img = load_ppm16(path)?;
    let estimates = img
        .pixels()
        .iter()
        .map(|p| Illuminant::normalize(*p))
        .collect::<Result<Vec<_>>>()?;
    IlluminantMap::new(img.width(), img.height(), patch_size, estimates)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: [f64; 3], b: [f64; 3], tol: f64) -> bool {
        a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn normalize_examples() {
        let n = Illuminant::normalize([1.0, 1.0, 1.0]).unwrap().rgb();
        assert!(close(n, [0.5774; 3], 1e-4));
        assert_eq!(Illuminant::normalize([2.0, 0.0, 0.0]).unwrap().rgb(), [1.0, 0.0, 0.0]);
        // ‖(0.3,0.5,0.4)‖ = √0.5
        let n = Illuminant::normalize([0.3, 0.5, 0.4]).unwrap().rgb();
        let r = 0.5f64.sqrt();
        assert!(close(n, [0.3 / r, 0.5 / r, 0.4 / r], 1e-15));
        assert!(close(n, [0.4243, std::f64::consts::FRAC_1_SQRT_2, 0.5657], 1e-4));
        assert!((norm3(n) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn normalize_rejects_bad_vectors() {
        for v in [[0.0; 3], [-0.1, 1.0, 1.0], [f64::NAN, 1.0, 1.0], [f64::INFINITY, 0.0, 0.0]] {
            assert!(matches!(Illuminant::normalize(v), Err(Error::InvalidIlluminant(_))));
        }
    }

    #[test]
    fn image_invariants() {
        assert!(LinearImage::new(0, 1, vec![]).is_err());
        assert!(LinearImage::new(2, 1, vec![[0.0; 3]]).is_err());
        assert!(LinearImage::new(1, 1, vec![[-1.0, 0.0, 0.0]]).is_err());
        assert!(LinearImage::new(1, 1, vec![[f64::NAN, 0.0, 0.0]]).is_err());
    }

    #[test]
    fn correction_examples() {
        let img = LinearImage::filled(1, 1, [0.2; 3]).unwrap();
        let out = correct_von_kries(&img, &Illuminant::neutral()).unwrap();
        assert!(close(out.image.pixel(0, 0), [0.2 * 3f64.sqrt(); 3], 1e-12));
        assert!(close(out.image.pixel(0, 0), [0.3464; 3], 1e-4));
        assert_eq!(out.saturated, 0);

        let ill = Illuminant::normalize([0.8, 0.5, 0.33]).unwrap();
        let img = LinearImage::filled(1, 1, [0.4, 0.2, 0.1]).unwrap();
        let out = correct_von_kries(&img, &ill).unwrap().image.pixel(0, 0);
        let g = ill.rgb();
        assert!(close(out, [0.4 / g[0], 0.2 / g[1], 0.1 / g[2]], 1e-15));
    }

    #[test]
    fn correction_counts_saturation_and_rejects_zero_channels() {
        let img = LinearImage::filled(2, 1, [0.9; 3]).unwrap();
        let out = correct_von_kries(&img, &Illuminant::neutral()).unwrap();
        assert_eq!(out.saturated, 6);
        let ill = Illuminant::normalize([1.0, 1.0, 0.0]).unwrap();
        assert!(matches!(
            correct_von_kries(&img, &ill),
            Err(Error::DivisionByZero { channel: 2, .. })
        ));
    }

    #[test]
    fn cast_examples() {
        let white = LinearImage::filled(1, 1, [1.0; 3]).unwrap();
        let ill = Illuminant::normalize([0.6, 0.6, 0.5291]).unwrap();
        assert!(close(cast_illuminant(&white, &ill).pixel(0, 0), ill.rgb(), 0.0));
        let img = LinearImage::filled(2, 2, [0.3, 0.6, 0.9]).unwrap();
        let out = cast_illuminant(&img, &Illuminant::neutral());
        let s = 1.0 / 3f64.sqrt();
        assert!(close(out.pixel(1, 1), [0.3 * s, 0.6 * s, 0.9 * s], 1e-15));
    }

    #[test]
    fn compose_splits_at_half_width() {
        let img = LinearImage::filled(4, 2, [1.0; 3]).unwrap();
        let l = Illuminant::normalize([1.0, 0.2, 0.2]).unwrap();
        let r = Illuminant::normalize([0.2, 0.2, 1.0]).unwrap();
        let (out, map) = compose_two_illuminants(&img, &l, &r).unwrap();
        for y in 0..2 {
            for x in 0..4 {
                let want = if x < 2 { l } else { r };
                assert_eq!(out.pixel(x, y), want.rgb());
                assert_eq!(map.get(x, y), want);
            }
        }
        let odd = LinearImage::filled(5, 1, [1.0; 3]).unwrap();
        let (_, map) = compose_two_illuminants(&odd, &l, &r).unwrap();
        assert_eq!(map.get(1, 0), l);
        assert_eq!(map.get(2, 0), r);
        let narrow = LinearImage::filled(1, 3, [1.0; 3]).unwrap();
        assert!(matches!(
            compose_two_illuminants(&narrow, &l, &r),
            Err(Error::ImageTooSmall(_))
        ));
    }

    #[test]
    fn compose_equal_illuminants_matches_cast() {
        let img = LinearImage::from_fn(6, 3, |x, y| [x as f64 * 0.1, y as f64 * 0.2, 0.5]).unwrap();
        let i = Illuminant::normalize([0.7, 0.5, 0.3]).unwrap();
        let (out, _) = compose_two_illuminants(&img, &i, &i).unwrap();
        assert_eq!(out, cast_illuminant(&img, &i));
    }

    #[test]
    fn ppm_single_pixel() {
        let mut bytes = b"P6\n1 1\n65535\n".to_vec();
        bytes.extend_from_slice(&[0xff, 0xff, 0, 0, 0, 0]);
        let img = decode_ppm16(&bytes).unwrap();
        assert_eq!(img.pixel(0, 0), [1.0, 0.0, 0.0]);
    }

    #[test]
    fn ppm_accepts_header_comments() {
        let mut bytes = b"P6 # hi\n# another\n1\n1 65535\n".to_vec();
        bytes.extend_from_slice(&[0, 0, 0xff, 0xff, 0, 0]);
        assert_eq!(decode_ppm16(&bytes).unwrap().pixel(0, 0), [0.0, 1.0, 0.0]);
    }

    #[test]
    fn ppm_truncated_reports_lengths() {
        let mut bytes = b"P6\n2 1\n65535\n".to_vec();
        bytes.extend_from_slice(&[0; 7]);
        let err = decode_ppm16(&bytes).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expected 12"), "{msg}");
        assert!(msg.contains("found 7"), "{msg}");
        assert!(matches!(err, Error::Format { offset: 20, .. }));
    }

    #[test]
    fn ppm_rejects_other_maxval_and_magic() {
        let bytes = b"P6\n1 1\n255\n\0\0\0".to_vec();
        assert!(matches!(decode_ppm16(&bytes), Err(Error::Format { offset: 7, .. })));
        assert!(matches!(decode_ppm16(b"P5\n1 1\n65535\n"), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(decode_ppm16(b"P6\nx 1\n65535\n"), Err(Error::Format { .. })));
    }

    #[test]
    fn ppm_quantization_rounds_half_up_and_clamps() {
        let img = LinearImage::new(
            3,
            1,
            vec![[0.5 / 65535.0, 2.0, 0.0], [1.0, 1.0, 1.0], [0.49 / 65535.0, 0.0, 0.0]],
        )
        .unwrap();
        let bytes = encode_ppm16(&img, None);
        let back = decode_ppm16(&bytes).unwrap();
        assert_eq!(back.pixel(0, 0), [1.0 / 65535.0, 1.0, 0.0]);
        assert_eq!(back.pixel(2, 0)[0], 0.0);
    }

    #[test]
    fn illuminant_serde_normalizes() {
        let i: Illuminant = serde_json::from_str("[2.0, 0.0, 0.0]").unwrap();
        assert_eq!(i.rgb(), [1.0, 0.0, 0.0]);
        assert!(serde_json::from_str::<Illuminant>("[0.0, 0.0, 0.0]").is_err());
    }
}
