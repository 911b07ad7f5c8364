//! Binary checkpoint format.
//!
//! ```text
//! magic        8 bytes  "SHEDCKPT"
//! version      u32
//! arch_len     u32, then arch_len bytes of architecture JSON
//! tensors      u32 count, then per tensor:
//!                u32 rank, rank x u64 extents, prod(extents) x f64
//! meta_len     u32, then meta_len bytes of provenance JSON
//! checksum     8 bytes, leading bytes of SHA-256 over everything above
//! ```
//!
//! All integers and floats are little-endian. Tensors appear in layer
//! order, weight before bias, for layers that carry parameters.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{Architecture, LayerParams, Network, TrainConfig};
use crate::bytes::{Reader, Truncated};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SHEDCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("checkpoint version {found} is incompatible with this build (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl From<Truncated> for CheckpointError {
    fn from(t: Truncated) -> Self {
        CheckpointError::Format(t.to_string())
    }
}

/// Where a checkpoint came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    /// Fingerprint of the training set.
    pub dataset_id: String,
    /// Fingerprint of the original validation set behind `base_val_accuracy`.
    pub val_fingerprint: String,
    pub base_val_accuracy: f64,
    #[serde(default)]
    pub train: Option<TrainConfig>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub provenance: Provenance,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let arch = serde_json::to_vec(self.network.architecture()).expect("architecture serializes");
        let meta = serde_json::to_vec(&self.provenance).expect("provenance serializes");
        let tensors: Vec<&Tensor> = self
            .network
            .params()
            .iter()
            .flat_map(|p| p.weight.iter().chain(p.bias.iter()))
            .collect();
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_u32(&mut out, arch.len());
        out.extend_from_slice(&arch);
        put_u32(&mut out, tensors.len());
        for t in tensors {
            put_u32(&mut out, t.rank());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        put_u32(&mut out, meta.len());
        out.extend_from_slice(&meta);
        let sum = Sha256::digest(&out);
        out.extend_from_slice(&sum[..8]);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
        let fmt = |m: String| CheckpointError::Format(m);
        let mut r = Reader::new(bytes);
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(fmt("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version { found: version, expected: CHECKPOINT_VERSION });
        }
        if bytes.len() < 8 + 4 + 8 {
            return Err(fmt("file too short".into()));
        }
        let (body, sum) = bytes.split_at(bytes.len() - 8);
        if Sha256::digest(body)[..8] != *sum {
            return Err(fmt("checksum mismatch".into()));
        }
        let mut r = Reader::new(&body[12..]);
        let arch_len = r.u32()? as usize;
        let arch: Architecture =
            serde_json::from_slice(r.take(arch_len)?).map_err(|e| fmt(format!("architecture: {e}")))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(fmt(format!("tensor rank {rank} is implausible")));
            }
            let mut shape = Vec::with_capacity(rank);
            let mut n: usize = 1;
            for _ in 0..rank {
                let d = usize::try_from(r.u64()?).map_err(|_| fmt("extent overflow".into()))?;
                n = n.checked_mul(d).ok_or_else(|| fmt("extent overflow".into()))?;
                shape.push(d);
            }
            if n.checked_mul(8).map_or(true, |b| b > r.remaining()) {
                return Err(fmt(format!("tensor of {n} elements exceeds remaining payload")));
            }
            let data = r.f64s(n)?;
            tensors.push(Tensor::new(shape, data).map_err(|e| fmt(e.to_string()))?);
        }
        let meta_len = r.u32()? as usize;
        let provenance: Provenance =
            serde_json::from_slice(r.take(meta_len)?).map_err(|e| fmt(format!("metadata: {e}")))?;
        if r.remaining() != 0 {
            return Err(fmt(format!("{} trailing bytes", r.remaining())));
        }

        let mut it = tensors.into_iter();
        let mut params = Vec::with_capacity(arch.layers.len());
        for spec in &arch.layers {
            if spec.has_weights() {
                let weight = it.next().ok_or_else(|| fmt("missing weight tensor".into()))?;
                let bias = it.next().ok_or_else(|| fmt("missing bias tensor".into()))?;
                params.push(LayerParams { weight: Some(weight), bias: Some(bias) });
            } else {
                params.push(LayerParams { weight: None, bias: None });
            }
        }
        if it.next().is_some() {
            return Err(fmt("more tensors than the architecture declares".into()));
        }
        let network = Network::from_parts(arch, params).map_err(|e| fmt(e.to_string()))?;
        Ok(Checkpoint { network, provenance })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes())
            .map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
        let bytes =
            std::fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
        Checkpoint::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let network = Network::init(Architecture::reference(5), 4).unwrap();
        Checkpoint {
            network,
            provenance: Provenance {
                seed: 4,
                dataset_id: "abc".into(),
                val_fingerprint: "def".into(),
                base_val_accuracy: 0.979,
                train: None,
            },
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        for (a, b) in ck.network.params().iter().zip(back.network.params()) {
            for (x, y) in [(&a.weight, &b.weight), (&a.bias, &b.bias)] {
                let bits = |t: &Option<Tensor>| t.as_ref().map(|t| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
                assert_eq!(bits(x), bits(y));
            }
        }
        assert_eq!(back.provenance, ck.provenance);
    }

    #[test]
    fn provenance_floats_round_trip_exactly() {
        let mut ck = sample();
        for n in [7u32, 75, 149, 997, 2400] {
            for k in 0..=n {
                ck.provenance.base_val_accuracy = f64::from(k) / f64::from(n);
                let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
                assert_eq!(back.provenance.base_val_accuracy.to_bits(), ck.provenance.base_val_accuracy.to_bits());
            }
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("base.ckpt");
        let ck = sample();
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), Checkpoint { network: ck.network.clone(), ..ck.clone() });
        assert!(matches!(Checkpoint::load(&dir.path().join("missing")), Err(CheckpointError::Io { .. })));
    }

    #[test]
    fn truncation_is_a_format_error() {
        let bytes = sample().to_bytes();
        for cut in [0, 5, 11, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(CheckpointError::Format(_))), "cut {cut}");
        }
    }

    #[test]
    fn version_bump_is_reported() {
        let mut bytes = sample().to_bytes();
        bytes[8] += 1;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(CheckpointError::Version { found: 2, expected: 1 })
        ));
    }

    #[test]
    fn wrong_magic_is_a_format_error() {
        let mut bytes = sample().to_bytes();
        bytes[..8].copy_from_slice(b"NOTCKPT!");
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::Format(_))));
    }
}
