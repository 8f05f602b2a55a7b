//! Binary sequence files and the JSON dataset manifest.
//!
//! Layout (little-endian): `b"PSTM"`, `u32` version, `u32` T, C, H, W, then
//! eight `f32` per channel (min, max, six reserved zeros), then the payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ChannelStats, DatasetError, FieldSequence, Result};

const MAGIC: &[u8; 4] = b"PSTM";
const VERSION: u32 = 1;
const STATS_SLOTS: usize = 8;

pub fn write_sequence(path: &Path, seq: &FieldSequence) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for d in seq.dims() {
        let d = u32::try_from(d).map_err(|_| DatasetError::Format(format!("dim {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    for s in seq.stats() {
        let mut block = [0f32; STATS_SLOTS];
        block[0] = s.min;
        block[1] = s.max;
        for v in block {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    for v in seq.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)
        .map_err(|e| DatasetError::Format(format!("truncated payload: {e}")))?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn read_sequence(path: &Path) -> Result<FieldSequence> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(DatasetError::Format(format!("{}: wrong magic", path.display())));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(DatasetError::Format(format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = read_u32(&mut r)? as usize;
    }
    let stats = read_f32s(&mut r, dims[1] * STATS_SLOTS)?
        .chunks_exact(STATS_SLOTS)
        .map(|b| ChannelStats { min: b[0], max: b[1] })
        .collect();
    let data = read_f32s(&mut r, dims.iter().product())?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(DatasetError::Format(format!("{} trailing bytes", rest.len())));
    }
    let mut seq = FieldSequence::new(dims, data)?.with_stats(stats)?;
    seq.source = Some(path.display().to_string());
    Ok(seq)
}

/// One generated sequence: its file (relative to the manifest), solver
/// kind, every sampled parameter, and the split it belongs to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub kind: String,
    pub params: serde_json::Value,
    pub split: String,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(w, entries)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let r = BufReader::new(File::open(path)?);
    Ok(serde_json::from_reader(r)?)
}
