//! Versioned binary checkpoints.
//!
//! Layout: `GPCKPT\0\0`, format version (u32 LE), manifest length (u64 LE),
//! JSON manifest, raw little-endian parameter blobs in manifest order, and
//! a trailing sha256 over everything before it.

use std::fs;
use std::path::Path;

use gp_tensor::{Float, Module};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, GpError, Result};

const MAGIC: &[u8; 8] = b"GPCKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
    pub bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Model family, e.g. `segmenter`, `geomprompt`, `recovery`.
    pub kind: String,
    /// Architecture config needed to rebuild the module before loading.
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    blob: Vec<u8>,
}

impl Checkpoint {
    pub fn from_module<T: Float>(kind: &str, config: serde_json::Value, m: &dyn Module<T>) -> Self {
        let mut tensors = Vec::new();
        let mut blob = Vec::new();
        m.visit("", &mut |name, p| {
            let bytes = T::to_le_bytes_vec(p.value.data());
            tensors.push(TensorEntry {
                name: name.to_string(),
                shape: p.value.shape().to_vec(),
                dtype: T::DTYPE.to_string(),
                offset: blob.len(),
                bytes: bytes.len(),
            });
            blob.extend_from_slice(&bytes);
        });
        Self { manifest: Manifest { kind: kind.to_string(), config, tensors }, blob }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest)?;
        let mut out = Vec::with_capacity(MAGIC.len() + 12 + manifest.len() + self.blob.len() + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&self.blob);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| GpError::Checkpoint(m);
        if bytes.len() < MAGIC.len() + 12 + 32 {
            return Err(bad("file too short".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch".into()));
        }
        if &body[..8] != MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let mlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let rest = &body[20..];
        if mlen > rest.len() {
            return Err(bad("manifest length exceeds file".into()));
        }
        let manifest: Manifest = serde_json::from_slice(&rest[..mlen]).map_err(|e| bad(format!("manifest: {e}")))?;
        let blob = rest[mlen..].to_vec();
        for t in &manifest.tensors {
            if t.offset + t.bytes > blob.len() {
                return Err(bad(format!("tensor {} extends past the data section", t.name)));
            }
        }
        Ok(Self { manifest, blob })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        fs::write(path, self.to_bytes()?).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(GpError::MissingPrerequisite(path.to_path_buf()));
        }
        Self::from_bytes(&fs::read(path).map_err(io_err(path))?)
    }

    /// Decode the stored architecture config.
    pub fn config<C: serde::de::DeserializeOwned>(&self) -> Result<C> {
        serde_json::from_value(self.manifest.config.clone()).map_err(|e| GpError::Checkpoint(format!("config: {e}")))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.manifest.kind != kind {
            return Err(GpError::Checkpoint(format!("expected a {kind} checkpoint, found {}", self.manifest.kind)));
        }
        Ok(())
    }

    /// Copy stored values into `m`. Names, shapes and dtype must match
    /// exactly, and every parameter of `m` must be present.
    pub fn load_into<T: Float>(&self, m: &mut dyn Module<T>) -> Result<()> {
        let mut err = None;
        let mut seen = 0;
        m.visit_mut("", &mut |name, p| {
            if err.is_some() {
                return;
            }
            let Some(t) = self.manifest.tensors.iter().find(|t| t.name == name) else {
                err = Some(format!("missing tensor {name}"));
                return;
            };
            if t.dtype != T::DTYPE || t.shape != p.value.shape() || t.bytes != p.value.len() * T::BYTES {
                err = Some(format!("tensor {name}: stored {} {:?}, expected {} {:?}", t.dtype, t.shape, T::DTYPE, p.value.shape()));
                return;
            }
            let vals = T::from_le_bytes_slice(&self.blob[t.offset..t.offset + t.bytes]);
            p.value.data_mut().copy_from_slice(&vals);
            seen += 1;
        });
        if let Some(e) = err {
            return Err(GpError::Checkpoint(e));
        }
        if seen != self.manifest.tensors.len() {
            return Err(GpError::Checkpoint(format!("checkpoint has {} tensors, module uses {seen}", self.manifest.tensors.len())));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmenter::{SegmenterConfig, ToySegmenter};
    use gp_tensor::param::snapshot_bits;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(seed: u64) -> ToySegmenter<f32> {
        ToySegmenter::new(&SegmenterConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let a = net(1);
        let ck = Checkpoint::from_module("segmenter", serde_json::to_value(&a.cfg).unwrap(), &a);
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        let mut b = net(2);
        assert_ne!(snapshot_bits(&a), snapshot_bits(&b));
        back.load_into(&mut b).unwrap();
        assert_eq!(snapshot_bits(&a), snapshot_bits(&b));
        assert_eq!(back.config::<SegmenterConfig>().unwrap(), a.cfg);
    }

    #[test]
    fn corruption_is_detected() {
        let a = net(1);
        let bytes = Checkpoint::from_module("segmenter", serde_json::Value::Null, &a).to_bytes().unwrap();
        for pos in [0, 9, 30, bytes.len() / 2, bytes.len() - 1] {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x10;
            assert!(matches!(Checkpoint::from_bytes(&bad), Err(GpError::Checkpoint(_))), "flip at {pos}");
        }
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 5]).is_err());
        assert!(Checkpoint::from_bytes(b"short").is_err());
    }

    #[test]
    fn mismatched_architecture_is_rejected() {
        let a = net(1);
        let ck = Checkpoint::from_module("segmenter", serde_json::Value::Null, &a);
        let cfg = SegmenterConfig { num_classes: 4, ..Default::default() };
        let mut other = ToySegmenter::<f32>::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(ck.load_into(&mut other).is_err());
        let mut wide = ToySegmenter::<f64>::new(&SegmenterConfig::default(), &mut ChaCha8Rng::seed_from_u64(0));
        assert!(ck.load_into(&mut wide).is_err());
        assert!(ck.expect_kind("recovery").is_err());
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/seg.ckpt");
        let a = net(3);
        Checkpoint::from_module("segmenter", serde_json::Value::Null, &a).save(&path).unwrap();
        let mut b = net(4);
        Checkpoint::load(&path).unwrap().load_into(&mut b).unwrap();
        assert_eq!(snapshot_bits(&a), snapshot_bits(&b));
        assert!(matches!(Checkpoint::load(&dir.path().join("none")), Err(GpError::MissingPrerequisite(_))));
    }
}
