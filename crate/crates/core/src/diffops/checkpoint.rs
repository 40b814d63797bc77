//! Named-tensor binary archives.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic  "G4DC"
//! u32    version (1)
//! u32    entry count
//! per entry:
//!   u32  name length, then UTF-8 name bytes
//!   u32  rank, then rank x u64 dims
//!   f64  x prod(dims) values
//! ```

use std::io::{Read, Write};

use super::graph::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::io::{read_f64, read_u32, read_u64};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"G4DC";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(w: &mut W, store: &ParamStore) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (name, t) in store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in t.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<ParamStore> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::format("not a checkpoint archive (bad magic)"));
    }
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let count = read_u32(r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        if len > 1 << 16 {
            return Err(Error::format("tensor name too long"));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::format("tensor name is not UTF-8"))?;
        let rank = read_u32(r)? as usize;
        if rank > 8 {
            return Err(Error::format(format!("tensor `{name}` has rank {rank}")));
        }
        let shape = (0..rank).map(|_| read_u64(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| read_f64(r)).collect::<Result<Vec<_>>>()?;
        store.insert(name, Tensor::new(shape, data)?);
    }
    Ok(store)
}

pub fn save_checkpoint(path: &std::path::Path, store: &ParamStore) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(&mut f, store)?;
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<ParamStore> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_checkpoint(&mut f)
}
