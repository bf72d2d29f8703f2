//! Binary dataset (`EEGD`) and checkpoint (`DCVT`) formats.
//!
//! Both are little-endian with IEEE-754 `f32` payloads.
//!
//! Dataset layout:
//!
//! ```text
//! "EEGD" | version u32 = 1 | n_samples u64 | n_channels u32 | n_timesteps u32
//! n_samples × { x f32, y f32, orig_x f32, orig_y f32, participant u32, cluster u32 }
//! n_samples × n_channels × n_timesteps f32 (row-major)
//! ```
//!
//! A cluster id of `0xFFFF_FFFF` means "unset".
//!
//! Checkpoint layout:
//!
//! ```text
//! "DCVT" | version u32 = 1 | json_len u32 | config JSON (UTF-8)
//! repeated { name_len u32 | name | rank u32 | dims u32 × rank | values f32 × numel }
//! CRC-32 (IEEE) of every preceding byte, u32
//! ```
//!
//! Writers go through a temporary file in the destination directory and
//! rename it into place.

use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;

use crate::dataset::{Dataset, GazeLabel};
use crate::error::{DataError, Error, Result};
use crate::model::{parameter_layout, Model, ModelConfig};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: [u8; 4] = *b"EEGD";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DCVT";
pub const FORMAT_VERSION: u32 = 1;

const DATASET_HEADER_LEN: u64 = 24;
const LABEL_RECORD_LEN: u64 = 24;
const UNSET_CLUSTER: u32 = u32::MAX;

/// Writes `bytes` to a temporary file next to `path` and renames it into
/// place, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Bounds-checked little-endian reader over an in-memory file.
struct Cursor<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Cursor<'b> {
    fn new(buf: &'b [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'b [u8], DataError> {
        match self.pos.checked_add(n) {
            Some(end) if end <= self.buf.len() => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            _ => Err(DataError::Truncated {
                offset: self.pos as u64,
                needed: n as u64,
                len: self.buf.len() as u64,
            }),
        }
    }

    fn u32(&mut self) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, DataError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, DataError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<(), DataError> {
        let found: [u8; 4] = self.take(4)?.try_into().unwrap();
        if found != expected {
            return Err(DataError::BadMagic { expected, found });
        }
        Ok(())
    }

    fn version(&mut self) -> Result<(), DataError> {
        let offset = self.pos as u64;
        let found = self.u32()?;
        if found != FORMAT_VERSION {
            return Err(DataError::UnsupportedVersion { found, offset });
        }
        Ok(())
    }
}

pub fn encode_dataset(d: &Dataset) -> Vec<u8> {
    let n = d.len();
    let mut out = Vec::with_capacity(
        (DATASET_HEADER_LEN + LABEL_RECORD_LEN * n as u64) as usize + d.eeg().len() * 4,
    );
    out.extend_from_slice(&DATASET_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(d.channels() as u32).to_le_bytes());
    out.extend_from_slice(&(d.timesteps() as u32).to_le_bytes());
    for l in d.labels() {
        for v in [l.x_px, l.y_px, l.orig_x_px, l.orig_y_px] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&l.participant_id.to_le_bytes());
        out.extend_from_slice(&l.cluster_id.unwrap_or(UNSET_CLUSTER).to_le_bytes());
    }
    for v in d.eeg() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut cur = Cursor::new(bytes);
    cur.magic(DATASET_MAGIC)?;
    cur.version()?;
    let n = cur.u64()?;
    let channels = cur.u32()? as u64;
    let timesteps = cur.u32()? as u64;
    let expected = n
        .checked_mul(LABEL_RECORD_LEN)
        .and_then(|labels| {
            n.checked_mul(channels)
                .and_then(|v| v.checked_mul(timesteps))
                .and_then(|v| v.checked_mul(4))
                .and_then(|data| labels.checked_add(data))
        })
        .and_then(|body| body.checked_add(DATASET_HEADER_LEN));
    let actual = bytes.len() as u64;
    match expected {
        Some(e) if e == actual => {}
        Some(e) => return Err(DataError::SizeMismatch { expected: e, actual }.into()),
        None => {
            return Err(DataError::Malformed {
                offset: 8,
                detail: "declared sizes overflow".into(),
            }
            .into())
        }
    }
    if channels == 0 || timesteps == 0 {
        return Err(DataError::Malformed {
            offset: 16,
            detail: "zero channels or timesteps".into(),
        }
        .into());
    }
    let n = n as usize;
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let x = cur.f32()?;
        let y = cur.f32()?;
        let ox = cur.f32()?;
        let oy = cur.f32()?;
        let participant = cur.u32()?;
        let cluster = cur.u32()?;
        labels.push(GazeLabel {
            x_px: x,
            y_px: y,
            orig_x_px: ox,
            orig_y_px: oy,
            participant_id: participant,
            cluster_id: (cluster != UNSET_CLUSTER).then_some(cluster),
        });
    }
    let blob = cur.take(bytes.len() - cur.pos)?;
    let eeg = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Dataset::new(channels as usize, timesteps as usize, labels, eeg)
}

pub fn write_dataset(path: impl AsRef<Path>, d: &Dataset) -> Result<()> {
    write_atomic(path.as_ref(), &encode_dataset(d))
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    decode_dataset(&read_file(path.as_ref())?)
}

/// Header fields of a dataset file, read without decoding the payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetHeader {
    pub version: u32,
    pub n_samples: u64,
    pub channels: u32,
    pub timesteps: u32,
}

pub fn read_dataset_header(bytes: &[u8]) -> Result<DatasetHeader> {
    let mut cur = Cursor::new(bytes);
    cur.magic(DATASET_MAGIC)?;
    let version = cur.u32()?;
    Ok(DatasetHeader {
        version,
        n_samples: cur.u64()?,
        channels: cur.u32()?,
        timesteps: cur.u32()?,
    })
}

pub fn encode_checkpoint(model: &Model) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(model.config())
        .map_err(|e| Error::InvalidConfig(format!("config not serializable: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (name, t) in model.params().iter().chain(model.buffers()) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Stored configuration and raw parameter records of a checkpoint.
#[derive(Debug, Clone)]
pub struct CheckpointContents {
    pub config: ModelConfig,
    pub tensors: IndexMap<String, Tensor>,
}

pub fn decode_checkpoint_contents(bytes: &[u8]) -> Result<CheckpointContents> {
    let mut cur = Cursor::new(bytes);
    cur.magic(CHECKPOINT_MAGIC)?;
    cur.version()?;
    if bytes.len() < 16 {
        return Err(DataError::Truncated {
            offset: bytes.len() as u64,
            needed: 16 - bytes.len() as u64,
            len: bytes.len() as u64,
        }
        .into());
    }
    let body_end = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(DataError::CrcMismatch { stored, computed }.into());
    }
    let mut cur = Cursor {
        buf: &bytes[..body_end],
        pos: cur.pos,
    };
    let json_len = cur.u32()? as usize;
    let json_at = cur.pos as u64;
    let config: ModelConfig = serde_json::from_slice(cur.take(json_len)?).map_err(|e| DataError::Malformed {
        offset: json_at,
        detail: format!("config JSON: {e}"),
    })?;
    let mut tensors = IndexMap::new();
    while cur.pos < body_end {
        let at = cur.pos as u64;
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| DataError::Malformed {
                offset: at,
                detail: "parameter name is not UTF-8".into(),
            })?
            .to_string();
        let rank = cur.u32()? as usize;
        // Each dimension needs four bytes; reject absurd ranks before allocating.
        if rank == 0 || rank > (body_end - cur.pos) / 4 {
            return Err(DataError::Malformed {
                offset: at,
                detail: format!("parameter `{name}` has invalid rank {rank}"),
            }
            .into());
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(cur.u32()? as usize);
        }
        let count = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let count = match count {
            Some(c) if c > 0 && c <= (body_end - cur.pos) / 4 => c,
            _ => {
                return Err(DataError::Malformed {
                    offset: at,
                    detail: format!("parameter `{name}` dims {dims:?} exceed the file"),
                }
                .into())
            }
        };
        let values = cur
            .take(count * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let t = Tensor::new(dims, values)?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(DataError::DuplicateParameter(name).into());
        }
    }
    Ok(CheckpointContents { config, tensors })
}

/// Decodes a checkpoint. With `expected` set, the stored parameters must
/// match the layout of that configuration; the first mismatch is reported.
pub fn decode_checkpoint(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Model> {
    let contents = decode_checkpoint_contents(bytes)?;
    let config = expected.cloned().unwrap_or(contents.config);
    let layout = parameter_layout(&config)?;
    let mut tensors = contents.tensors;
    let mut params = IndexMap::new();
    let mut buffers = IndexMap::new();
    for spec in &layout {
        let t = tensors.shift_remove(&spec.name).ok_or_else(|| DataError::ShapeConflict {
            name: spec.name.clone(),
            detail: "missing from checkpoint".into(),
        })?;
        if t.shape() != spec.shape.as_slice() {
            return Err(DataError::ShapeConflict {
                name: spec.name.clone(),
                detail: format!("stored {:?}, expected {:?}", t.shape(), spec.shape),
            }
            .into());
        }
        if spec.buffer {
            buffers.insert(spec.name.clone(), t);
        } else {
            params.insert(spec.name.clone(), t);
        }
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(DataError::ShapeConflict {
            name: extra.clone(),
            detail: "not part of the expected model".into(),
        }
        .into());
    }
    Model::from_parts(config, params, buffers)
}

pub fn write_checkpoint(path: impl AsRef<Path>, model: &Model) -> Result<()> {
    write_atomic(path.as_ref(), &encode_checkpoint(model)?)
}

pub fn read_checkpoint(path: impl AsRef<Path>, expected: Option<&ModelConfig>) -> Result<Model> {
    decode_checkpoint(&read_file(path.as_ref())?, expected)
}
