//! Binary named-array files and their JSON sidecars.
//!
//! Layout (little endian): magic `HEHRARR\0`, `u32` format version, `u32`
//! array count, then per array a `u32` name length, the UTF-8 name, `u64`
//! rows, `u64` cols and `rows * cols` `f64` values in row-major order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::autograd::{Mat, ParamStore};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"HEHRARR\0";
pub const ARRAY_FORMAT_VERSION: u32 = 1;

pub fn write_arrays(store: &ParamStore, mut out: impl Write) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&ARRAY_FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&(store.len() as u32).to_le_bytes())?;
    for (name, m) in store.iter() {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(m.nrows() as u64).to_le_bytes())?;
        out.write_all(&(m.ncols() as u64).to_le_bytes())?;
        for v in m.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_exact<const N: usize>(input: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    input
        .read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("truncated array file: {e}")))?;
    Ok(buf)
}

pub fn read_arrays(mut input: impl Read) -> Result<ParamStore> {
    if &read_exact::<8>(&mut input)? != MAGIC {
        return Err(Error::Checkpoint("not an array file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(read_exact(&mut input)?);
    if version != ARRAY_FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "array format version {version}, expected {ARRAY_FORMAT_VERSION}"
        )));
    }
    let count = u32::from_le_bytes(read_exact(&mut input)?);
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = u32::from_le_bytes(read_exact(&mut input)?) as usize;
        let mut name = vec![0u8; len];
        input
            .read_exact(&mut name)
            .map_err(|e| Error::Checkpoint(format!("truncated array name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?;
        let rows = u64::from_le_bytes(read_exact(&mut input)?) as usize;
        let cols = u64::from_le_bytes(read_exact(&mut input)?) as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(f64::from_le_bytes(read_exact(&mut input)?));
        }
        let m = Mat::from_shape_vec((rows, cols), data).expect("length matches shape");
        store.insert(name, m);
    }
    Ok(store)
}

pub fn save_arrays(store: &ParamStore, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_arrays(store, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_arrays(path: &Path) -> Result<ParamStore> {
    let bytes = fs::read(path)?;
    read_arrays(bytes.as_slice())
}

pub fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

/// SHA-256 over names, shapes and values of every array.
pub fn digest_arrays(store: &ParamStore) -> String {
    let mut buf = Vec::new();
    write_arrays(store, &mut buf).expect("writing to memory");
    hex::encode(Sha256::digest(&buf))
}

/// Hex SHA-256 of `parts` joined with a separator; used for lineage chains.
pub fn chain_hash(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0u8]);
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn round_trip() {
        let mut s = ParamStore::new();
        s.insert("a", array![[1.0, -2.5], [3.0, f64::MIN_POSITIVE]]);
        s.insert("empty", Mat::zeros((0, 3)));
        let mut buf = Vec::new();
        write_arrays(&s, &mut buf).unwrap();
        assert_eq!(read_arrays(buf.as_slice()).unwrap(), s);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(read_arrays(&b"NOTMAGIC...."[..]), Err(Error::Checkpoint(_))));
        let mut s = ParamStore::new();
        s.insert("a", array![[1.0, 2.0]]);
        let mut buf = Vec::new();
        write_arrays(&s, &mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_arrays(buf.as_slice()), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn digest_changes_with_values() {
        let mut s = ParamStore::new();
        s.insert("a", array![[1.0]]);
        let d1 = digest_arrays(&s);
        s.get_mut("a").unwrap()[[0, 0]] = 2.0;
        assert_ne!(d1, digest_arrays(&s));
    }
}
