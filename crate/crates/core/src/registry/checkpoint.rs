//! Versioned little-endian tensor container.
//!
//! Layout: magic `PFPT`, format version `u32`, tensor count `u32`, then per
//! tensor a `u16` name length, the UTF-8 name, a `u8` rank, `rank` dims as
//! `u32`, and the row-major `f32` payload.

use ndarray::{Array1, Array2};
use thiserror::Error;

use crate::diffusion::{Architecture, DenoiserWeights, Dense, ModelWeights};
use crate::error::{Error, Result};
use crate::preference::{AdapterWeights, LoraLayer};

pub const MAGIC: &[u8; 4] = b"PFPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CheckpointError {
    #[error("truncated: needed {needed} bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0} (expected {FORMAT_VERSION})")]
    Version(u32),
    #[error("malformed: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) -> Self {
        Self {
            name: name.into(),
            dims,
            data,
        }
    }
}

pub fn encode_tensors(tensors: &[Tensor]) -> Vec<u8> {
    let payload: usize = tensors.iter().map(|t| t.data.len() * 4 + t.name.len() + 8).sum();
    let mut out = Vec::with_capacity(12 + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        debug_assert_eq!(t.dims.iter().product::<usize>(), t.data.len());
        out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(t.dims.len() as u8);
        for &d in &t.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len());
        let Some(end) = end else {
            return Err(CheckpointError::Truncated {
                offset: self.pos,
                needed: n,
            });
        };
        let out = &self.data[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_tensors(data: &[u8]) -> Result<Vec<Tensor>, CheckpointError> {
    let mut r = Reader { data, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let count = r.u32()? as usize;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let len = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| CheckpointError::Malformed(format!("tensor {name} is too large")))?;
        let bytes = r.take(len)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push(Tensor { name, dims, data });
    }
    if r.pos != data.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes",
            data.len() - r.pos
        )));
    }
    Ok(tensors)
}

/// Either a full base denoiser or a low-rank adapter on top of one.
#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    Base(ModelWeights),
    Adapter(AdapterWeights<f32>),
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        match self {
            Self::Base(w) => {
                let a = w.arch();
                let arch = [a.pixels, a.time_dim, a.prompts, a.hidden];
                tensors.push(Tensor::new("arch", vec![4], arch.iter().map(|&v| exact_f32(v)).collect::<Result<_>>()?));
                for (i, layer) in w.layers().iter().enumerate() {
                    tensors.push(matrix(format!("dense{i}.weight"), &layer.weight));
                    tensors.push(Tensor::new(
                        format!("dense{i}.bias"),
                        vec![layer.bias.len()],
                        layer.bias.to_vec(),
                    ));
                }
            }
            Self::Adapter(ad) => {
                let alpha = ad.alpha() as f32;
                if f64::from(alpha) != ad.alpha() {
                    return Err(Error::Config(format!(
                        "adapter alpha {} is not representable as f32",
                        ad.alpha()
                    )));
                }
                tensors.push(Tensor::new("lora.config", vec![2], vec![exact_f32(ad.rank())?, alpha]));
                for (i, layer) in ad.layers().iter().enumerate() {
                    tensors.push(matrix(format!("dense{i}.lora_a"), &layer.a));
                    tensors.push(matrix(format!("dense{i}.lora_b"), &layer.b));
                }
            }
        }
        Ok(encode_tensors(&tensors))
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self, CheckpointError> {
        let tensors = decode_tensors(data)?;
        let malformed = |m: String| CheckpointError::Malformed(m);
        let first = tensors.first().ok_or_else(|| malformed("no tensors".into()))?;
        let mut rest = tensors.iter().skip(1);
        let mut next = |name: String, rank: usize| -> Result<&Tensor, CheckpointError> {
            let t = rest
                .next()
                .ok_or_else(|| malformed(format!("missing tensor {name}")))?;
            if t.name != name || t.dims.len() != rank {
                return Err(malformed(format!(
                    "expected rank-{rank} tensor {name}, found {} {:?}",
                    t.name, t.dims
                )));
            }
            Ok(t)
        };
        let checkpoint = match first.name.as_str() {
            "arch" => {
                let a = header_ints(first, 4)?;
                let arch = Architecture {
                    pixels: a[0],
                    time_dim: a[1],
                    prompts: a[2],
                    hidden: a[3],
                };
                let mut layers = Vec::new();
                for i in 0..arch.layer_shapes().len() {
                    let w = next(format!("dense{i}.weight"), 2)?;
                    let b = next(format!("dense{i}.bias"), 1)?;
                    layers.push(Dense {
                        weight: to_matrix(w)?,
                        bias: Array1::from(b.data.clone()),
                    });
                }
                let weights = DenoiserWeights::from_layers(arch, layers).map_err(|e| malformed(e.to_string()))?;
                Self::Base(weights)
            }
            "lora.config" => {
                if first.dims != [2] {
                    return Err(malformed(format!("lora.config has dims {:?}", first.dims)));
                }
                let rank = int_value(first.data[0], "rank")?;
                let alpha = f64::from(first.data[1]);
                let mut layers = Vec::new();
                for i in 0..crate::diffusion::network::LAYERS {
                    let a = next(format!("dense{i}.lora_a"), 2)?;
                    let b = next(format!("dense{i}.lora_b"), 2)?;
                    layers.push(LoraLayer {
                        a: to_matrix(a)?,
                        b: to_matrix(b)?,
                    });
                }
                let adapter = AdapterWeights::from_layers(rank, alpha, layers).map_err(|e| malformed(e.to_string()))?;
                Self::Adapter(adapter)
            }
            other => return Err(malformed(format!("unknown leading tensor {other}"))),
        };
        if let Some(extra) = rest.next() {
            return Err(malformed(format!("unexpected tensor {}", extra.name)));
        }
        Ok(checkpoint)
    }
}

fn matrix(name: String, m: &Array2<f32>) -> Tensor {
    let (rows, cols) = m.dim();
    Tensor::new(name, vec![rows, cols], m.iter().copied().collect())
}

fn to_matrix(t: &Tensor) -> Result<Array2<f32>, CheckpointError> {
    Array2::from_shape_vec((t.dims[0], t.dims[1]), t.data.clone())
        .map_err(|e| CheckpointError::Malformed(format!("{}: {e}", t.name)))
}

fn exact_f32(v: usize) -> Result<f32> {
    if v > 1 << 24 {
        return Err(Error::Config(format!("size {v} does not fit the checkpoint header")));
    }
    Ok(v as f32)
}

fn int_value(v: f32, what: &str) -> Result<usize, CheckpointError> {
    if v.fract() != 0.0 || v < 0.0 || v > (1u32 << 24) as f32 {
        return Err(CheckpointError::Malformed(format!("{what} {v} is not a size")));
    }
    Ok(v as usize)
}

fn header_ints(t: &Tensor, n: usize) -> Result<Vec<usize>, CheckpointError> {
    if t.dims != [n] {
        return Err(CheckpointError::Malformed(format!("{} has dims {:?}", t.name, t.dims)));
    }
    t.data.iter().map(|&v| int_value(v, &t.name)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn micro() -> Architecture {
        Architecture {
            pixels: 4,
            time_dim: 2,
            prompts: 2,
            hidden: 3,
        }
    }

    #[test]
    fn base_round_trip_is_bit_exact() {
        let w: ModelWeights = DenoiserWeights::init(micro(), &mut ChaCha8Rng::seed_from_u64(1));
        let bytes = Checkpoint::Base(w.clone()).to_bytes().unwrap();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), Checkpoint::Base(w));
    }

    #[test]
    fn adapter_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ad = AdapterWeights::<f32>::init(&micro(), 2, 4.0, &mut rng).unwrap();
        ad.layers_mut()[1].b.fill(-0.125);
        let bytes = Checkpoint::Adapter(ad.clone()).to_bytes().unwrap();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), Checkpoint::Adapter(ad));
    }

    #[test]
    fn header_corruptions_are_named() {
        let w: ModelWeights = DenoiserWeights::zeros(micro());
        let bytes = Checkpoint::Base(w).to_bytes().unwrap();

        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&magic), Err(CheckpointError::BadMagic(_))));

        let mut version = bytes.clone();
        version[4] = 9;
        assert_eq!(Checkpoint::from_bytes(&version), Err(CheckpointError::Version(9)));

        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(CheckpointError::Truncated { .. })
        ));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(Checkpoint::from_bytes(&extra), Err(CheckpointError::Malformed(_))));
    }

    #[test]
    fn unrepresentable_alpha_is_rejected() {
        let ad = AdapterWeights::<f32>::zeros(&micro(), 1, 0.1).unwrap();
        assert!(Checkpoint::Adapter(ad).to_bytes().is_err());
    }

    #[test]
    fn tensor_layout() {
        let bytes = encode_tensors(&[Tensor::new("ab", vec![2], vec![1.0, -2.0])]);
        let mut expected = b"PFPT".to_vec();
        expected.extend_from_slice(&[1, 0, 0, 0, 1, 0, 0, 0, 2, 0, b'a', b'b', 1, 2, 0, 0, 0]);
        expected.extend_from_slice(&[0, 0, 0x80, 0x3f, 0, 0, 0, 0xc0]);
        assert_eq!(bytes, expected);
    }
}
