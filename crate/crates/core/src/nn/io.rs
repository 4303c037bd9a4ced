//! Self-describing binary model format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset 0   8 bytes  magic "HNNMODEL"
//!        8   u32      format version (currently 1)
//!        12  u64      seed provenance (RNG seed the parameters came from)
//!        20  u32      input dimension
//!        24  u32      layer count
//! per layer: u8 kind (0 = Dense, 1 = ReLU, 2 = Sigmoid);
//!            Dense adds u32 in_dim, u32 out_dim
//! then, for each Dense layer in order:
//!            in_dim*out_dim f64 weights (row-major [in, out]), out_dim f64 bias
//! ```
//!
//! Parse failures report the absolute byte offset of the first bad byte.

use std::fs;
use std::path::Path;

use super::{Layer, Network};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"HNNMODEL";
pub const FORMAT_VERSION: u32 = 1;

const KIND_DENSE: u8 = 0;
const KIND_RELU: u8 = 1;
const KIND_SIGMOID: u8 = 2;

/// Serializes a network (with the seed its parameters came from) to bytes.
pub fn encode_network<S: Scalar>(net: &Network<S>, seed_provenance: u64) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&seed_provenance.to_le_bytes());
    out.extend_from_slice(&(net.input_dim() as u32).to_le_bytes());
    out.extend_from_slice(&(net.layers().len() as u32).to_le_bytes());
    for layer in net.layers() {
        match layer {
            Layer::Dense { weights, .. } => {
                out.push(KIND_DENSE);
                out.extend_from_slice(&(weights.shape()[0] as u32).to_le_bytes());
                out.extend_from_slice(&(weights.shape()[1] as u32).to_le_bytes());
            }
            Layer::Relu => out.push(KIND_RELU),
            Layer::Sigmoid => out.push(KIND_SIGMOID),
        }
    }
    for layer in net.layers() {
        if let Layer::Dense { weights, bias } = layer {
            for v in weights.data().iter().chain(bias.data()) {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    base: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Parse {
                offset: self.base + self.bytes.len(),
                message: format!("file truncated while reading {what}"),
            });
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn offset(&self) -> usize {
        self.base + self.pos
    }
}

enum LayerDesc {
    Dense { in_dim: usize, out_dim: usize },
    Relu,
    Sigmoid,
}

/// Decodes a network block; `base` is the block's absolute offset in the
/// containing file so parse errors report file positions. The block must
/// span `bytes` exactly.
pub fn decode_network<S: Scalar>(bytes: &[u8], base: usize) -> Result<(Network<S>, u64)> {
    let mut r = Reader { bytes, pos: 0, base };

    let magic = r.take(MAGIC.len(), "magic")?;
    if magic != MAGIC {
        return Err(Error::Parse {
            offset: base,
            message: format!("bad magic {magic:?}, expected {MAGIC:?}"),
        });
    }
    let version = r.u32("format version")?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let seed = r.u64("seed provenance")?;
    let input_dim = r.u32("input dimension")? as usize;
    let layer_count = r.u32("layer count")? as usize;

    let mut descs = Vec::with_capacity(layer_count);
    for i in 0..layer_count {
        let at = r.offset();
        let kind = r.u8("layer kind")?;
        descs.push(match kind {
            KIND_DENSE => LayerDesc::Dense {
                in_dim: r.u32("dense in_dim")? as usize,
                out_dim: r.u32("dense out_dim")? as usize,
            },
            KIND_RELU => LayerDesc::Relu,
            KIND_SIGMOID => LayerDesc::Sigmoid,
            other => {
                return Err(Error::Parse {
                    offset: at,
                    message: format!("unknown layer kind {other} at layer {i}"),
                })
            }
        });
    }

    let mut layers = Vec::with_capacity(layer_count);
    for desc in &descs {
        layers.push(match *desc {
            LayerDesc::Dense { in_dim, out_dim } => {
                let mut w = Vec::with_capacity(in_dim * out_dim);
                for _ in 0..in_dim * out_dim {
                    w.push(S::of(r.f64("dense weights")?));
                }
                let mut b = Vec::with_capacity(out_dim);
                for _ in 0..out_dim {
                    b.push(S::of(r.f64("dense bias")?));
                }
                Layer::dense(
                    Tensor::new(vec![in_dim, out_dim], w)?,
                    Tensor::from_vec(b),
                )?
            }
            LayerDesc::Relu => Layer::Relu,
            LayerDesc::Sigmoid => Layer::Sigmoid,
        });
    }

    if r.pos != bytes.len() {
        return Err(Error::Parse {
            offset: r.offset(),
            message: format!("{} trailing bytes after parameters", bytes.len() - r.pos),
        });
    }

    let net = Network::new(input_dim, layers).map_err(|e| Error::Parse {
        offset: base,
        message: format!("layer dimensions do not chain: {e}"),
    })?;
    Ok((net, seed))
}

pub fn save_network<S: Scalar>(
    net: &Network<S>,
    seed_provenance: u64,
    path: impl AsRef<Path>,
) -> Result<()> {
    fs::write(path, encode_network(net, seed_provenance))?;
    Ok(())
}

/// Loads a network and the seed provenance recorded in its header.
pub fn load_network<S: Scalar>(path: impl AsRef<Path>) -> Result<(Network<S>, u64)> {
    let bytes = fs::read(path)?;
    decode_network(&bytes, 0)
}
