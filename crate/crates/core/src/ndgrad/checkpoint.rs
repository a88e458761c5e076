//! Flat binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//! `"CHMP"`, version `u32`, parameter count `u64`, then per parameter:
//! name length `u32`, UTF-8 name bytes, rank `u32`, `rank` dims as `u64`,
//! and the data as `f64`.

use std::io::{Read, Write};

use super::{GradError, ParamStore};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CHMP";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut w: W, store: &ParamStore) -> Result<(), GradError> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u64).to_le_bytes())?;
    for p in store.iter() {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(p.shape.len() as u32).to_le_bytes())?;
        for &d in &p.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(p.data.len() * 8);
        for x in &p.data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, GradError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, GradError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ParamStore, GradError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(GradError::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(GradError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u64(&mut r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| GradError::Checkpoint(e.to_string()))?;
        let rank = read_u32(&mut r)? as usize;
        let shape = (0..rank).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 8];
        r.read_exact(&mut raw)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        store.insert(&name, &shape, data)?;
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let mut store = ParamStore::new();
        store.insert("w", &[2], vec![1.5, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &store).unwrap();
        assert_eq!(&buf[..4], b"CHMP");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(buf[8..16].try_into().unwrap()), 1);
        // name len 4 + name 1 + rank 4 + dim 8 + data 16
        assert_eq!(buf.len(), 16 + 4 + 1 + 4 + 8 + 16);
        assert_eq!(read_checkpoint(&buf[..]).unwrap(), store);
    }

    #[test]
    fn rejects_bad_magic() {
        assert!(read_checkpoint(&b"NOPE\x01\x00\x00\x00"[..]).is_err());
    }
}
