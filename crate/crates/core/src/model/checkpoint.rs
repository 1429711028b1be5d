//! Checkpoint byte layout (integers and floats little-endian):
//!
//! ```text
//! magic       8 bytes  "SCCAMCK\0"
//! version     u32
//! config      height u32, width u32, reduction u32, spatial_size u32,
//!             hidden u32, embed_dim u32, normalize u8, bn_epsilon f64,
//!             bn_momentum f64
//! tensors     u32 count, then per tensor: name (u32 length + UTF-8),
//!             rank u32, dims u32 x rank, values f64 x product(dims)
//! moments     per batch-norm layer: initialized u8, channels u32,
//!             mean f64 x channels, var f64 x channels
//! classifier  u8 present flag; if 1, one tensor record named "classifier.weight"
//! checksum    8 bytes, leading bytes of SHA-256 over everything above
//! ```
//!
//! Encoder tensors appear in the order of [`super::ENCODER_TENSORS`].

use sha2::{Digest, Sha256};

use super::{ClassifierParams, EncoderParams, ModelConfig, ModelError, ENCODER_TENSORS};
use crate::numerics::{RunningMoments, Tensor};

const MAGIC: &[u8; 8] = b"SCCAMCK\0";
pub const CHECKPOINT_VERSION: u32 = 1;
const CLASSIFIER: &str = "classifier.weight";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub encoder: EncoderParams,
    pub classifier: Option<ClassifierParams>,
}

pub fn serialize(checkpoint: &Checkpoint) -> Vec<u8> {
    let enc = &checkpoint.encoder;
    let c = &enc.config;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    for v in [c.height, c.width, c.reduction, c.spatial_size, c.hidden, c.embed_dim] {
        put_u32(&mut out, v as u32);
    }
    out.push(c.normalize as u8);
    out.extend_from_slice(&c.bn_epsilon.to_le_bytes());
    out.extend_from_slice(&c.bn_momentum.to_le_bytes());
    put_u32(&mut out, enc.tensors.len() as u32);
    for (name, t) in ENCODER_TENSORS.iter().zip(&enc.tensors) {
        put_tensor(&mut out, name, t);
    }
    for m in &enc.moments {
        out.push(m.initialized as u8);
        put_u32(&mut out, m.mean.len() as u32);
        put_f64s(&mut out, &m.mean);
        put_f64s(&mut out, &m.var);
    }
    match &checkpoint.classifier {
        Some(cls) => {
            out.push(1);
            put_tensor(&mut out, CLASSIFIER, &cls.weight);
        }
        None => out.push(0),
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest[..8]);
    out
}

pub fn deserialize(bytes: &[u8]) -> Result<Checkpoint, ModelError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(ModelError::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    if bytes.len() < MAGIC.len() + 4 + 8 {
        return Err(ModelError::Checksum);
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Version { found: version, expected: CHECKPOINT_VERSION });
    }
    let (body, sum) = bytes.split_at(bytes.len() - 8);
    if Sha256::digest(body)[..8] != *sum {
        return Err(ModelError::Checksum);
    }
    let mut r = Reader { bytes: body, at: 12 };
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let [height, width, reduction, spatial_size, hidden, embed_dim] = dims;
    let normalize = match r.u8()? {
        0 => false,
        1 => true,
        b => return Err(ModelError::Checkpoint(format!("invalid normalize flag {b}"))),
    };
    let bn_epsilon = r.f64()?;
    let bn_momentum = r.f64()?;
    let config = ModelConfig { height, width, reduction, spatial_size, hidden, embed_dim, bn_epsilon, bn_momentum, normalize };
    let count = r.u32()? as usize;
    if count != ENCODER_TENSORS.len() {
        return Err(ModelError::Checkpoint(format!("{count} encoder tensors, expected {}", ENCODER_TENSORS.len())));
    }
    let tensors = ENCODER_TENSORS.iter().map(|name| r.tensor(name)).collect::<Result<Vec<_>, _>>()?;
    let mut encoder = EncoderParams::from_tensors(config, tensors)?;
    for m in encoder.moments.iter_mut() {
        let initialized = r.u8()? == 1;
        let channels = r.u32()? as usize;
        if channels != m.mean.len() {
            return Err(ModelError::Checkpoint(format!("{channels} batch-norm channels, expected {}", m.mean.len())));
        }
        let mean = r.f64s(channels)?;
        let var = r.f64s(channels)?;
        *m = RunningMoments { mean, var, momentum: m.momentum, initialized };
    }
    let classifier = match r.u8()? {
        0 => None,
        1 => Some(ClassifierParams::from_weight(r.tensor(CLASSIFIER)?)?),
        b => return Err(ModelError::Checkpoint(format!("invalid classifier flag {b}"))),
    };
    if r.at != body.len() {
        return Err(ModelError::Checkpoint(format!("{} trailing bytes", body.len() - r.at)));
    }
    if let Some(cls) = &classifier {
        if cls.embed_dim() != encoder.config.embed_dim {
            return Err(ModelError::Dimension {
                what: "classifier input",
                expected: encoder.config.embed_dim.to_string(),
                found: cls.embed_dim().to_string(),
            });
        }
    }
    Ok(Checkpoint { encoder, classifier })
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.rank() as u32);
    for &d in t.shape() {
        put_u32(out, d as u32);
    }
    put_f64s(out, t.data());
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], ModelError> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| ModelError::Checkpoint("unexpected end of data".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ModelError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, ModelError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, ModelError> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| ModelError::Checkpoint("size overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn tensor(&mut self, expected: &str) -> Result<Tensor, ModelError> {
        let len = self.u32()? as usize;
        let name = self.take(len)?;
        if name != expected.as_bytes() {
            return Err(ModelError::Checkpoint(format!(
                "expected tensor {expected}, found {}",
                String::from_utf8_lossy(name)
            )));
        }
        let rank = self.u32()? as usize;
        let shape = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let n = n.ok_or_else(|| ModelError::Checkpoint(format!("{expected}: size overflow")))?;
        Ok(Tensor::new(&shape, self.f64s(n)?)?)
    }
}
