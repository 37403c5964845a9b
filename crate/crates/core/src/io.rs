//! Binary snapshot and checkpoint files.
//!
//! Both formats are little-endian: a four-byte magic, a `u32` version, the
//! array headers and payload, then a length-prefixed JSON metadata block
//! carrying the resolved config, the seed and the SHA-256 of the payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::snapshot::SnapshotMatrix;

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"DLAB";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DLCK";
pub const FORMAT_VERSION: u32 = 1;

/// Upper bound on any length field, to fail fast on corrupt headers.
const MAX_LEN: u64 = 1 << 36;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    /// What the file holds, e.g. `"burgers-states"` or `"cnn-node"`.
    pub kind: String,
    pub seed: u64,
    pub config: serde_json::Value,
    /// Hex SHA-256 of the payload bytes.
    pub sha256: String,
    /// Free-form extras such as normalization constants.
    #[serde(default)]
    pub extra: serde_json::Value,
}

impl Metadata {
    pub fn new(kind: &str, seed: u64, config: serde_json::Value) -> Self {
        Metadata {
            kind: kind.to_string(),
            seed,
            config,
            sha256: String::new(),
            extra: serde_json::Value::Null,
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    out.reserve(vs.len() * 8);
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("truncated file at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        if v > MAX_LEN {
            return Err(Error::Format(format!("length field {v} is implausible")));
        }
        Ok(v as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("payload too large".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

fn header(cur: &mut Cursor<'_>, magic: &[u8; 4]) -> Result<()> {
    if cur.take(4)? != magic {
        return Err(Error::Format(format!("bad magic, expected {}", String::from_utf8_lossy(magic))));
    }
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    Ok(())
}

fn finish(mut out: Vec<u8>, payload_start: usize, mut meta: Metadata) -> Result<Vec<u8>> {
    meta.sha256 = sha256_hex(&out[payload_start..]);
    let json = serde_json::to_vec(&meta).map_err(|e| Error::Format(e.to_string()))?;
    put_u64(&mut out, json.len() as u64);
    out.extend_from_slice(&json);
    Ok(out)
}

fn trailer(cur: &mut Cursor<'_>, payload_start: usize) -> Result<Metadata> {
    let payload_end = cur.pos;
    let n = cur.len()?;
    let meta: Metadata = serde_json::from_slice(cur.take(n)?).map_err(|e| Error::Format(format!("metadata: {e}")))?;
    if cur.pos != cur.buf.len() {
        return Err(Error::Format("trailing bytes after metadata".into()));
    }
    let actual = sha256_hex(&cur.buf[payload_start..payload_end]);
    if actual != meta.sha256 {
        return Err(Error::Format(format!("content hash mismatch: stored {}, computed {actual}", meta.sha256)));
    }
    Ok(meta)
}

/// Serializes a snapshot matrix; the hash covers extents and payload.
pub fn encode_snapshots(snaps: &SnapshotMatrix, meta: Metadata) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(64 + snaps.as_slice().len() * 8);
    out.extend_from_slice(SNAPSHOT_MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    let start = out.len();
    put_u32(&mut out, snaps.dims().len() as u32);
    for &d in snaps.dims() {
        put_u64(&mut out, d as u64);
    }
    put_u64(&mut out, snaps.n_cols() as u64);
    put_f64s(&mut out, snaps.as_slice());
    finish(out, start, meta)
}

pub fn decode_snapshots(bytes: &[u8]) -> Result<(SnapshotMatrix, Metadata)> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    header(&mut cur, SNAPSHOT_MAGIC)?;
    let start = cur.pos;
    let nd = cur.u32()? as usize;
    if nd == 0 || nd > 8 {
        return Err(Error::Format(format!("{nd} dimensions")));
    }
    let dims = (0..nd).map(|_| cur.len()).collect::<Result<Vec<_>>>()?;
    let cols = cur.len()?;
    let rows: usize = dims.iter().product();
    let total = rows.checked_mul(cols).filter(|&t| t as u64 <= MAX_LEN).ok_or_else(|| Error::Format("payload too large".into()))?;
    let data = cur.f64s(total)?;
    let meta = trailer(&mut cur, start)?;
    Ok((SnapshotMatrix::from_parts(&dims, data)?, meta))
}

/// Serializes a list of tensors (row-major) such as network parameters.
pub fn encode_checkpoint(tensors: &[Tensor], meta: Metadata) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    let start = out.len();
    put_u64(&mut out, tensors.len() as u64);
    for t in tensors {
        put_u32(&mut out, t.shape().len() as u32);
        for &d in t.shape() {
            put_u64(&mut out, d as u64);
        }
        put_f64s(&mut out, t.data());
    }
    finish(out, start, meta)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Vec<Tensor>, Metadata)> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    header(&mut cur, CHECKPOINT_MAGIC)?;
    let start = cur.pos;
    let n = cur.len()?;
    let mut tensors = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let nd = cur.u32()? as usize;
        if nd > 8 {
            return Err(Error::Format(format!("{nd} dimensions")));
        }
        let shape = (0..nd).map(|_| cur.len()).collect::<Result<Vec<_>>>()?;
        let len = shape.iter().product();
        tensors.push(Tensor::new(&shape, cur.f64s(len)?)?);
    }
    let meta = trailer(&mut cur, start)?;
    Ok((tensors, meta))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(bytes)?;
    w.flush()?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut buf)?;
    Ok(buf)
}

pub fn save_snapshots(path: &Path, snaps: &SnapshotMatrix, meta: Metadata) -> Result<()> {
    write_file(path, &encode_snapshots(snaps, meta)?)
}

pub fn load_snapshots(path: &Path) -> Result<(SnapshotMatrix, Metadata)> {
    decode_snapshots(&read_file(path)?)
}

pub fn save_checkpoint(path: &Path, tensors: &[Tensor], meta: Metadata) -> Result<()> {
    write_file(path, &encode_checkpoint(tensors, meta)?)
}

pub fn load_checkpoint(path: &Path) -> Result<(Vec<Tensor>, Metadata)> {
    decode_checkpoint(&read_file(path)?)
}
