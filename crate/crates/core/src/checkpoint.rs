//! Binary checkpoint: a JSON header with the model configuration and
//! normalization statistics, followed by named `f64` tensors.
//!
//! Layout (little-endian): magic `RGLC`, version `u32`, header length `u64`,
//! header JSON, tensor count `u32`, then per tensor: name length `u32`, name
//! bytes, rank `u32`, extents `u64` each, values `f64`.

use std::io::Write;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::data::NormStats;
use crate::error::{RaglError, Result};
use crate::graph_conv::SparseAdjacency;
use crate::model::{Forecaster, ModelConfig, ParameterSet};
use crate::tape::NamedTensors;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RGLC";
pub const CHECKPOINT_VERSION: u32 = 1;
const GEO_TENSOR: &str = "geo.triplets";

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    norm: NormStats,
}

pub fn encode_checkpoint(model: &Forecaster) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        config: model.cfg.clone(),
        norm: model.norm.clone(),
    })
    .map_err(|e| RaglError::Checkpoint(e.to_string()))?;
    let mut tensors: Vec<(&str, Tensor)> = model.params.iter().map(|(k, v)| (k.as_str(), v.clone())).collect();
    if let Some(g) = &model.geo {
        tensors.push((GEO_TENSOR, geo_triplets(g)?));
    }
    let mut w = Vec::new();
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    w.write_u64::<LittleEndian>(header.len() as u64)?;
    w.write_all(&header)?;
    w.write_u32::<LittleEndian>(tensors.len() as u32)?;
    for (name, t) in &tensors {
        w.write_u32::<LittleEndian>(name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        w.write_u32::<LittleEndian>(t.shape().len() as u32)?;
        for &d in t.shape() {
            w.write_u64::<LittleEndian>(d as u64)?;
        }
        for &v in t.data() {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    Ok(w)
}

fn geo_triplets(g: &SparseAdjacency) -> Result<Tensor> {
    let mut data = Vec::with_capacity(g.nnz() * 3);
    for i in 0..g.n_nodes() {
        for (j, w) in g.row(i) {
            data.extend_from_slice(&[i as f64, j as f64, w]);
        }
    }
    Tensor::matrix(g.nnz(), 3, data)
}

fn geo_from_triplets(n: usize, t: &Tensor) -> Result<SparseAdjacency> {
    if t.shape().len() != 2 || t.cols() != 3 {
        return Err(RaglError::Checkpoint(format!("adjacency block has shape {:?}", t.shape())));
    }
    let mut rows = vec![Vec::new(); n];
    for r in 0..t.rows() {
        let (i, j) = (t.at(r, 0) as usize, t.at(r, 1) as usize);
        if i >= n || j >= n {
            return Err(RaglError::Checkpoint(format!("adjacency entry ({i}, {j}) outside {n} nodes")));
        }
        rows[i].push((j, t.at(r, 2)));
    }
    SparseAdjacency::from_rows(n, rows)
}

fn truncated(e: std::io::Error, what: &'static str, bytes: &[u8]) -> RaglError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        RaglError::Checkpoint(format!("file ends inside {what} ({} bytes total)", bytes.len()))
    } else {
        e.into()
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Forecaster> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(RaglError::BadMagic {
            expected: String::from_utf8_lossy(CHECKPOINT_MAGIC).into(),
            found: String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into(),
        });
    }
    let mut r = &bytes[4..];
    let version = r.read_u32::<LittleEndian>().map_err(|e| truncated(e, "header", bytes))?;
    if version != CHECKPOINT_VERSION {
        return Err(RaglError::Version(version));
    }
    let hlen = r.read_u64::<LittleEndian>().map_err(|e| truncated(e, "header", bytes))? as usize;
    if hlen > r.len() {
        return Err(RaglError::Checkpoint(format!("header of {hlen} bytes exceeds file")));
    }
    let header: Header =
        serde_json::from_slice(&r[..hlen]).map_err(|e| RaglError::Checkpoint(format!("header: {e}")))?;
    r = &r[hlen..];
    let count = r.read_u32::<LittleEndian>().map_err(|e| truncated(e, "tensor count", bytes))?;
    let mut tensors = NamedTensors::new();
    for _ in 0..count {
        let nlen = r.read_u32::<LittleEndian>().map_err(|e| truncated(e, "tensor name", bytes))? as usize;
        if nlen > r.len() {
            return Err(RaglError::Checkpoint("tensor name exceeds file".into()));
        }
        let name = String::from_utf8(r[..nlen].to_vec())
            .map_err(|_| RaglError::Checkpoint("tensor name is not UTF-8".into()))?;
        r = &r[nlen..];
        let rank = r.read_u32::<LittleEndian>().map_err(|e| truncated(e, "tensor shape", bytes))?;
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(r.read_u64::<LittleEndian>().map_err(|e| truncated(e, "tensor shape", bytes))? as usize);
        }
        let len: usize = shape.iter().product();
        if len.saturating_mul(8) > r.len() {
            return Err(RaglError::Checkpoint(format!("tensor `{name}` exceeds file")));
        }
        let mut data = vec![0.0; len];
        r.read_f64_into::<LittleEndian>(&mut data)?;
        if tensors.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(RaglError::Checkpoint(format!("duplicate tensor `{name}`")));
        }
    }
    if !r.is_empty() {
        return Err(RaglError::Checkpoint(format!("{} trailing bytes", r.len())));
    }
    let geo = match tensors.remove(GEO_TENSOR) {
        Some(t) => Some(geo_from_triplets(header.config.n_nodes, &t)?),
        None => None,
    };
    let params = ParameterSet::from_tensors(&header.config, tensors)?;
    Forecaster::from_parts(header.config, params, header.norm, geo)
}

/// Writes through a temporary file in the destination directory and renames
/// it into place, so a failed write leaves nothing behind.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        tmp.as_file().set_permissions(std::fs::Permissions::from_mode(0o644))?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| RaglError::Io(e.error))?;
    Ok(())
}

pub fn save_checkpoint(model: &Forecaster, path: &Path) -> Result<()> {
    atomic_write(path, &encode_checkpoint(model)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Forecaster> {
    decode_checkpoint(&std::fs::read(path)?)
}
