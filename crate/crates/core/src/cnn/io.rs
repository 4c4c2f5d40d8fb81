//! Binary weights file.
//!
//! Layout (little-endian): magic `CCNN`, `u32` format version, then for each
//! layer in [`LAYER_NAMES`](super::LAYER_NAMES) order a `u32` dimension
//! count, the `u32` dimensions and the `f32` payload in row-major order.
//! Convolution weights of 1×1 kernels are written with dims `[K, 3]`,
//! wider kernels as `[K, k, k, 3]`.

use std::fs;
use std::path::Path;

use super::network::NetworkParams;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"CCNN";
pub const WEIGHTS_VERSION: u32 = 1;

pub fn encode_weights(params: &NetworkParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.num_parameters() * 4);
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    for (i, t) in params.layers().into_iter().enumerate() {
        let dims: Vec<usize> = if i == 0 && params.kernel_width() == 1 {
            vec![params.kernel_count(), 3]
        } else {
            t.shape().to_vec()
        };
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for d in dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_weights(bytes: &[u8]) -> Result<NetworkParams> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != WEIGHTS_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "missing CCNN magic".into(),
        });
    }
    let version = r.u32()?;
    if version != WEIGHTS_VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported weights version {version}"),
        });
    }
    let mut layers = Vec::with_capacity(6);
    for i in 0..6 {
        let ndims = r.u32()? as usize;
        if ndims == 0 || ndims > 4 {
            return Err(Error::Format {
                offset: r.pos - 4,
                message: format!("layer {i} has {ndims} dimensions"),
            });
        }
        let mut dims = (0..ndims).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let payload = r.take(n * 4)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        if i == 0 && dims.len() == 2 {
            dims = vec![dims[0], 1, 1, dims[1]];
        }
        layers.push(Tensor::from_vec(&dims, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            offset: r.pos,
            message: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    let mut it = layers.into_iter();
    let mut next = || it.next().expect("six layers");
    NetworkParams::new(next(), next(), next(), next(), next(), next())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len()).ok_or_else(|| Error::Format {
            offset: self.bytes.len(),
            message: format!(
                "truncated weights file: need {n} bytes at offset {}, {} available",
                self.pos,
                self.bytes.len() - self.pos
            ),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn save_weights(params: &NetworkParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_weights(params)).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<NetworkParams> {
    let path = path.as_ref();
    decode_weights(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
