//! Self-describing binary container for named tensors.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "RGTENSOR"
//! version  u32      currently 1
//! count    u32      number of records
//! record*  name_len u32 | name (UTF-8) | rank u32 | dims u64 × rank | values f64 × Π dims
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RGTENSOR";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Writes `(name, tensor)` records in container format.
pub fn write_checkpoint<'a, W: Write>(mut w: W, records: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
    let records: Vec<_> = records.into_iter().collect();
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(records.len() as u32).to_le_bytes())?;
    for (name, t) in records {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for d in t.shape() {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let shape = (0..rank).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 8];
        r.read_exact(&mut raw)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    Ok(out)
}

pub fn write_checkpoint_file(path: impl AsRef<Path>, store: &ParamStore) -> Result<()> {
    let f = BufWriter::new(File::create(path)?);
    write_checkpoint(f, store.iter().map(|(_, n, t)| (n, t)))
}

pub fn read_checkpoint_file(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
