//! `weights.bin`: a flat sequence of records
//! `name_len:u32 | name:utf8 | rank:u32 | dims:u32* | values:f32*`, all
//! little-endian.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const WEIGHTS_FILE: &str = "weights.bin";
pub const CONFIG_FILE: &str = "config.json";

pub fn encode_weights(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.buf.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode_weights(bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bad = |why: &str| Error::format(path, why.to_string());
    let mut r = Reader { buf: bytes, pos: 0 };
    let mut out = Vec::new();
    while r.pos < bytes.len() {
        let name_len = r.u32().ok_or_else(|| bad("truncated name length"))? as usize;
        let name = std::str::from_utf8(r.take(name_len).ok_or_else(|| bad("truncated name"))?)
            .map_err(|_| bad("name is not UTF-8"))?
            .to_string();
        let rank = r.u32().ok_or_else(|| bad("truncated rank"))? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32().ok_or_else(|| bad("truncated dims"))? as usize);
        }
        let n: usize = dims.iter().product();
        let raw = r.take(n * 4).ok_or_else(|| bad("truncated values"))?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::from_vec(&dims, values).map_err(|e| bad(&e.to_string()))?;
        out.push((name, t));
    }
    Ok(out)
}

pub fn write_weights(path: &Path, store: &ParamStore) -> Result<()> {
    fs::write(path, encode_weights(store)).map_err(|e| Error::io(path, e))
}

pub fn read_weights(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(&bytes, path)
}

/// Overwrites every parameter of `store` from a weights file; names and
/// shapes must match exactly.
pub fn load_into(store: &mut ParamStore, path: &Path) -> Result<()> {
    let records = read_weights(path)?;
    if records.len() != store.len() {
        return Err(Error::format(
            path,
            format!("expected {} tensors, found {}", store.len(), records.len()),
        ));
    }
    for (name, t) in records {
        let id = store
            .id(&name)
            .ok_or_else(|| Error::format(path, format!("unknown parameter {name:?}")))?;
        store
            .set_value(id, t)
            .map_err(|e| Error::format(path, e.to_string()))?;
    }
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_bit_exact() {
        let mut s = ParamStore::new();
        s.insert("ab", Tensor::from_vec(&[1, 2], vec![1.0, -2.0]).unwrap()).unwrap();
        let bytes = encode_weights(&s);
        let mut expected = vec![2, 0, 0, 0, b'a', b'b', 2, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0];
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn truncated_file_rejected() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(&[3]).unwrap()).unwrap();
        let bytes = encode_weights(&s);
        assert!(decode_weights(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(vals in proptest::collection::vec(-1e3f32..1e3, 1..40), rows in 1usize..4) {
            let n = vals.len() / rows * rows;
            prop_assume!(n > 0);
            let mut s = ParamStore::new();
            s.insert("embedding", Tensor::from_vec(&[rows, n / rows], vals[..n].to_vec()).unwrap()).unwrap();
            s.insert("b", Tensor::from_vec(&[1], vec![vals[0]]).unwrap()).unwrap();
            let back = decode_weights(&encode_weights(&s), Path::new("mem")).unwrap();
            prop_assert_eq!(back.len(), 2);
            prop_assert_eq!(&back[0].1, s.value(s.id("embedding").unwrap()));
            prop_assert_eq!(back[1].0.as_str(), "b");
        }
    }
}
