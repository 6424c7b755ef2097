//! Flat binary checkpoints.
//!
//! Layout (little-endian): magic `SLFG`, `u32` version, then records of
//! `u32` name length, UTF-8 name, `u32` rank, `u32` extents, `f64` payload,
//! repeated until end of file.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SLFG";
pub const VERSION: u32 = 1;

pub fn write_records<'a, T: Scalar + 'a>(
    mut w: impl Write,
    records: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>,
) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (name, t) in records {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.f64().to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32(buf: &[u8], pos: &mut usize) -> Result<u32> {
    let end = *pos + 4;
    let b = buf
        .get(*pos..end)
        .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {pos}")))?;
    *pos = end;
    Ok(u32::from_le_bytes(b.try_into().unwrap()))
}

pub fn read_records<T: Scalar>(mut r: impl Read) -> Result<Vec<(String, Tensor<T>)>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    if buf.len() < 8 || &buf[..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut pos = 4;
    let version = read_u32(&buf, &mut pos)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut out = Vec::new();
    while pos < buf.len() {
        let n = read_u32(&buf, &mut pos)? as usize;
        let name = buf
            .get(pos..pos + n)
            .ok_or_else(|| Error::Checkpoint("truncated name".into()))?;
        let name = String::from_utf8(name.to_vec())
            .map_err(|_| Error::Checkpoint("name is not utf-8".into()))?;
        pos += n;
        let rank = read_u32(&buf, &mut pos)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&buf, &mut pos)? as usize);
        }
        let count: usize = shape.iter().product();
        let bytes = buf
            .get(pos..pos + count * 8)
            .ok_or_else(|| Error::Checkpoint(format!("truncated payload for {name}")))?;
        pos += count * 8;
        let data = bytes
            .chunks_exact(8)
            .map(|c| T::c(f64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn save_store<T: Scalar>(path: &Path, store: &ParamStore<T>) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_records(f, store.iter().map(|(_, n, t)| (n, t)))
}

/// Loads matching records into `store`; returns how many were applied.
/// Every store parameter must be present unless `partial` is set.
pub fn load_into_store<T: Scalar>(
    records: &[(String, Tensor<T>)],
    store: &mut ParamStore<T>,
    partial: bool,
) -> Result<usize> {
    let mut applied = 0;
    for (name, t) in records {
        if let Some(id) = store.id(name) {
            store.set(id, t.clone())?;
            applied += 1;
        }
    }
    if !partial && applied < store.len() {
        let missing: Vec<_> = store
            .iter()
            .filter(|(_, n, _)| !records.iter().any(|(r, _)| r == n))
            .map(|(_, n, _)| n.to_string())
            .take(5)
            .collect();
        return Err(Error::Checkpoint(format!("missing parameters, e.g. {missing:?}")));
    }
    Ok(applied)
}

pub fn load_file<T: Scalar>(path: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    read_records(std::io::BufReader::new(std::fs::File::open(path)?))
}
