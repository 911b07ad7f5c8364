use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::ShiftSpec;
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 8] = b"SHEDDATA";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{0}")]
    Usage(String),
    #[error("dataset format error: {0}")]
    Format(String),
    #[error("dataset format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Which part of the pipeline a dataset belongs to. Evaluation code checks
/// the tag to keep selection data out of reported accuracies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Val,
    /// An unsplit shifted set.
    Whole,
    EditTrain,
    EditTest,
}

impl SplitTag {
    fn code(self) -> u32 {
        match self {
            SplitTag::Train => 0,
            SplitTag::Val => 1,
            SplitTag::Whole => 2,
            SplitTag::EditTrain => 3,
            SplitTag::EditTest => 4,
        }
    }

    fn from_code(c: u32) -> Option<Self> {
        Some(match c {
            0 => SplitTag::Train,
            1 => SplitTag::Val,
            2 => SplitTag::Whole,
            3 => SplitTag::EditTrain,
            4 => SplitTag::EditTest,
            _ => return None,
        })
    }
}

/// Labeled images `[n, c, h, w]` in `[0, 1]` with their generation record.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    class_count: usize,
    seed: u64,
    shift: Option<ShiftSpec>,
    split: SplitTag,
}

impl Dataset {
    pub fn new(
        images: Tensor,
        labels: Vec<usize>,
        class_count: usize,
        seed: u64,
        split: SplitTag,
    ) -> Result<Self, DatasetError> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(DatasetError::Usage(format!(
                "images {:?} do not match {} labels",
                images.shape(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(DatasetError::Usage(format!("label {bad} outside 0..{class_count}")));
        }
        Ok(Dataset { images, labels, class_count, seed, shift: None, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn shift(&self) -> Option<&ShiftSpec> {
        self.shift.as_ref()
    }

    pub fn split(&self) -> SplitTag {
        self.split
    }

    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub(crate) fn with_images(&self, images: Tensor, shift: ShiftSpec) -> Dataset {
        Dataset { images, shift: Some(shift), ..self.clone() }
    }

    pub fn with_split(mut self, split: SplitTag) -> Dataset {
        self.split = split;
        self
    }

    /// The examples at `rows`, in that order.
    pub fn select(&self, rows: &[usize], split: SplitTag) -> Dataset {
        Dataset {
            images: self.images.select_rows(rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            class_count: self.class_count,
            seed: self.seed,
            shift: self.shift.clone(),
            split,
        }
    }

    /// Examples per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.class_count];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    /// Content hash over class count, labels and pixel bits.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.class_count as u64).to_le_bytes());
        for &d in self.images.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for &l in &self.labels {
            h.update((l as u32).to_le_bytes());
        }
        for v in self.images.data() {
            h.update(v.to_bits().to_le_bytes());
        }
        let digest = h.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Serializes as: magic, version u32, n u64, c/h/w u32, class count u32,
    /// seed u64, split tag u32, spec length u32 + JSON bytes, `n*c*h*w` f64
    /// pixels, `n` u32 labels, then the first 8 bytes of the SHA-256 of
    /// everything before. All integers and floats little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let spec = serde_json::to_vec(&self.shift).expect("shift spec serializes");
        let s = self.images.shape();
        let mut out = Vec::with_capacity(64 + spec.len() + self.images.numel() * 8 + self.len() * 4);
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&(s[0] as u64).to_le_bytes());
        for &d in &s[1..] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.class_count as u32).to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.split.code().to_le_bytes());
        out.extend_from_slice(&(spec.len() as u32).to_le_bytes());
        out.extend_from_slice(&spec);
        for v in self.images.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &l in &self.labels {
            out.extend_from_slice(&(l as u32).to_le_bytes());
        }
        let sum = Sha256::digest(&out);
        out.extend_from_slice(&sum[..8]);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Dataset, DatasetError> {
        let mut r = crate::bytes::Reader::new(bytes);
        let fmt = |e: crate::bytes::Truncated| DatasetError::Format(e.to_string());
        if r.take(8).map_err(fmt)? != DATASET_MAGIC {
            return Err(DatasetError::Format("bad magic bytes".into()));
        }
        let version = r.u32().map_err(fmt)?;
        if version != DATASET_VERSION {
            return Err(DatasetError::Version { found: version, expected: DATASET_VERSION });
        }
        if bytes.len() < 8 + 4 + 8 {
            return Err(DatasetError::Format("file too short".into()));
        }
        let (body, sum) = bytes.split_at(bytes.len() - 8);
        if Sha256::digest(body)[..8] != *sum {
            return Err(DatasetError::Format("checksum mismatch".into()));
        }
        let mut r = crate::bytes::Reader::new(&body[12..]);
        let n = r.u64().map_err(fmt)?;
        let (c, h, w) = (r.u32().map_err(fmt)?, r.u32().map_err(fmt)?, r.u32().map_err(fmt)?);
        let class_count = r.u32().map_err(fmt)? as usize;
        let seed = r.u64().map_err(fmt)?;
        let split = SplitTag::from_code(r.u32().map_err(fmt)?)
            .ok_or_else(|| DatasetError::Format("unknown split tag".into()))?;
        let spec_len = r.u32().map_err(fmt)? as usize;
        let shift: Option<ShiftSpec> = serde_json::from_slice(r.take(spec_len).map_err(fmt)?)
            .map_err(|e| DatasetError::Format(format!("shift spec: {e}")))?;
        let per = (c as u64)
            .checked_mul(h as u64)
            .and_then(|v| v.checked_mul(w as u64))
            .ok_or_else(|| DatasetError::Format("image extent overflow".into()))?;
        let needed = n
            .checked_mul(per)
            .and_then(|v| v.checked_mul(8))
            .and_then(|v| v.checked_add(n.checked_mul(4)?))
            .ok_or_else(|| DatasetError::Format("payload size overflow".into()))?;
        if needed != r.remaining() as u64 {
            return Err(DatasetError::Format(format!(
                "payload holds {} bytes, header implies {needed}",
                r.remaining()
            )));
        }
        let (n, per) = (n as usize, per as usize);
        let data = r.f64s(n * per).map_err(fmt)?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(DatasetError::Format("non-finite pixel".into()));
        }
        let labels: Vec<usize> = (0..n).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_, _>>().map_err(fmt)?;
        let images = Tensor::new(vec![n, c as usize, h as usize, w as usize], data)
            .map_err(|e| DatasetError::Format(e.to_string()))?;
        let mut d = Dataset::new(images, labels, class_count, seed, split)
            .map_err(|e| DatasetError::Format(e.to_string()))?;
        d.shift = shift;
        Ok(d)
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let io = |source| DatasetError::Io { path: path.display().to_string(), source };
        let mut f = std::fs::File::create(path).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Dataset, DatasetError> {
        let io = |source| DatasetError::Io { path: path.display().to_string(), source };
        let mut bytes = Vec::new();
        std::fs::File::open(path).map_err(io)?.read_to_end(&mut bytes).map_err(io)?;
        Dataset::from_bytes(&bytes)
    }
}
