//! Binary checkpoints of a [`ModelBundle`].
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "HEADKD\0\x01"
//! version    u32
//! arch       u32 input_dim, u32 n_hidden, n_hidden x u32, u32 embedding_dim, u32 num_classes
//! adapter    u8 kind (0 none, 1 identity, 2 linear), u32 feature_dim
//! aux head   u8 (0 absent, 1 present)
//! provenance u32 length + UTF-8 config hash, u32 length + UTF-8 phase tag
//! tensors    u32 count, then per tensor:
//!            u32 name length, name bytes, u8 trainable, u32 rank,
//!            rank x u64 dims, row-major f64 data
//! ```
//!
//! Tensors appear in [`ModelBundle::named_layers`] order, weight before
//! bias, named `<layer>.weight` and `<layer>.bias`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{DimensionAdapter, MlpArch, ModelBundle};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"HEADKD\0\x01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Provenance {
    /// SHA-256 hex digest of the canonical config that produced the model.
    pub config_hash: String,
    /// Training phase, e.g. `train` or `shkd-step-I1`.
    pub phase: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelBundle,
    pub provenance: Provenance,
}

impl Checkpoint {
    pub fn new(model: ModelBundle, provenance: Provenance) -> Self {
        Self { model, provenance }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let m = &self.model;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        put_u32(&mut out, m.arch.input_dim as u32);
        put_u32(&mut out, m.arch.hidden.len() as u32);
        for &h in &m.arch.hidden {
            put_u32(&mut out, h as u32);
        }
        put_u32(&mut out, m.arch.embedding_dim as u32);
        put_u32(&mut out, m.arch.num_classes as u32);
        let (kind, dim) = match &m.adapter {
            None => (0u8, m.embedding_dim()),
            Some(DimensionAdapter::Identity { dim }) => (1, *dim),
            Some(DimensionAdapter::Linear(l)) => (2, l.out_dim()),
        };
        out.push(kind);
        put_u32(&mut out, dim as u32);
        out.push(m.aux_head.is_some() as u8);
        put_str(&mut out, &self.provenance.config_hash);
        put_str(&mut out, &self.provenance.phase);

        let layers = m.named_layers();
        put_u32(&mut out, 2 * layers.len() as u32);
        for (name, layer) in layers {
            for (suffix, t) in [("weight", &layer.weight), ("bias", &layer.bias)] {
                put_str(&mut out, &format!("{name}.{suffix}"));
                out.push(layer.trainable as u8);
                put_u32(&mut out, t.shape().len() as u32);
                for &d in t.shape() {
                    out.extend_from_slice(&(d as u64).to_le_bytes());
                }
                for &v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint(
                "not a checkpoint (bad magic bytes)".into(),
            ));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let input_dim = r.u32()? as usize;
        let n_hidden = r.u32()? as usize;
        let hidden = (0..n_hidden)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let arch = MlpArch {
            input_dim,
            hidden,
            embedding_dim: r.u32()? as usize,
            num_classes: r.u32()? as usize,
        };
        arch.validate().map_err(|e| {
            Error::Checkpoint(format!("invalid architecture {}: {e}", arch.describe()))
        })?;
        let adapter_kind = r.u8()?;
        let feature_dim = r.u32()? as usize;
        let feature_dim = match adapter_kind {
            0 => None,
            1 if feature_dim == arch.embedding_dim => Some(feature_dim),
            2 if feature_dim != arch.embedding_dim => Some(feature_dim),
            1 | 2 => {
                return Err(Error::Checkpoint(format!(
                    "adapter kind {adapter_kind} inconsistent with embedding {} -> features {feature_dim}",
                    arch.embedding_dim
                )))
            }
            k => return Err(Error::Checkpoint(format!("unknown adapter kind {k}"))),
        };
        let has_aux = match r.u8()? {
            0 => false,
            1 => true,
            v => return Err(Error::Checkpoint(format!("bad aux-head flag {v}"))),
        };
        let provenance = Provenance {
            config_hash: r.string()?,
            phase: r.string()?,
        };

        // Skeleton with the right shapes; every parameter is overwritten below.
        let mut model = ModelBundle::init(&arch, feature_dim, 0)?;
        if has_aux {
            model.aux_head = Some(model.head.clone());
        }
        let expected: Vec<(String, Vec<usize>, Vec<usize>)> = model
            .named_layers()
            .into_iter()
            .map(|(n, l)| (n, l.weight.shape().to_vec(), l.bias.shape().to_vec()))
            .collect();
        let count = r.u32()? as usize;
        if count != 2 * expected.len() {
            return Err(Error::Checkpoint(format!(
                "architecture {} expects {} tensors, file has {count}",
                arch.describe(),
                2 * expected.len()
            )));
        }
        for (layer, (name, wshape, bshape)) in model.layers_mut().into_iter().zip(expected) {
            let (w, w_trainable) = r.tensor(&format!("{name}.weight"), &wshape)?;
            let (b, b_trainable) = r.tensor(&format!("{name}.bias"), &bshape)?;
            if w_trainable != b_trainable {
                return Err(Error::Checkpoint(format!(
                    "{name}: weight and bias disagree on the trainable flag"
                )));
            }
            layer.weight = w;
            layer.bias = b;
            layer.trainable = w_trainable;
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { model, provenance })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes =
            fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Checkpoint(format!(
                    "truncated: needed {n} bytes at offset {}",
                    self.pos
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("invalid UTF-8 string at offset {}", self.pos)))
    }

    fn tensor(&mut self, name: &str, shape: &[usize]) -> Result<(Tensor, bool)> {
        let found = self.string()?;
        if found != name {
            return Err(Error::Checkpoint(format!(
                "expected tensor {name}, found {found}"
            )));
        }
        let trainable = match self.u8()? {
            0 => false,
            1 => true,
            v => return Err(Error::Checkpoint(format!("{name}: bad trainable flag {v}"))),
        };
        let rank = self.u32()? as usize;
        let dims = (0..rank)
            .map(|_| self.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if dims != shape {
            return Err(Error::Checkpoint(format!(
                "{name}: shape {dims:?} does not match the architecture's {shape:?}"
            )));
        }
        let n: usize = dims.iter().product();
        let raw = self.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok((Tensor::new(dims, data)?, trainable))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let arch = MlpArch::new(3, &[5], 4, 3);
        let teacher = ModelBundle::init(&MlpArch::new(3, &[7], 6, 3), None, 9).unwrap();
        let model = ModelBundle::init(&arch, Some(6), 1)
            .unwrap()
            .attach_teacher_head(&teacher.head)
            .unwrap();
        Checkpoint::new(
            model,
            Provenance {
                config_hash: "abc".into(),
                phase: "shkd-step-I2".into(),
            },
        )
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
        assert!(back.model.aux_head.as_ref().unwrap().is_frozen());
    }

    #[test]
    fn identity_adapter_round_trips() {
        let model = ModelBundle::init(&MlpArch::new(2, &[], 4, 2), Some(4), 3).unwrap();
        let c = Checkpoint::new(model, Provenance::default());
        assert_eq!(Checkpoint::from_bytes(&c.to_bytes()).unwrap(), c);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&magic).is_err());
        let mut version = bytes;
        version[8] = 7;
        assert!(Checkpoint::from_bytes(&version).is_err());
    }
}
