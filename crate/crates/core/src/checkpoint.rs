//! Named-tensor checkpoint files.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! magic "PSTN" | version | tensor count
//! per tensor:  name length | name (UTF-8) | rows | cols
//! data:        every tensor's rows*cols little-endian f32 values, row-major,
//!              in header order
//! ```
//!
//! Each checkpoint is accompanied by a JSON sidecar (`<stem>.json`) holding the
//! hyper-parameters needed to rebuild the model around the tensors.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const MAGIC: &[u8; 4] = b"PSTN";
pub const VERSION: u32 = 1;
const MAX_NAME_LEN: usize = 1024;

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.nrows() as u32).to_le_bytes());
        out.extend_from_slice(&(t.ncols() as u32).to_le_bytes());
    }
    for (_, t) in store.iter() {
        for &v in t.iter() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::format("checkpoint", format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

/// Parses a checkpoint produced by [`encode`]. Never panics on malformed input.
pub fn decode(bytes: &[u8]) -> Result<ParamStore> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format("checkpoint", format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    // every header entry needs at least 12 bytes
    if count > r.remaining() / 12 {
        return Err(Error::format("checkpoint", format!("tensor count {count} exceeds file size")));
    }
    let mut headers = Vec::with_capacity(count);
    let mut total: usize = 0;
    for _ in 0..count {
        let len = r.u32()? as usize;
        if len == 0 || len > MAX_NAME_LEN {
            return Err(Error::format("checkpoint", format!("name length {len} out of range")));
        }
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format("checkpoint", "tensor name is not UTF-8"))?
            .to_string();
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::format("checkpoint", format!("{name}: shape overflow")))?;
        total = total
            .checked_add(n)
            .ok_or_else(|| Error::format("checkpoint", "element count overflow"))?;
        headers.push((name, rows, cols));
    }
    if total.checked_mul(4) != Some(r.remaining()) {
        return Err(Error::format(
            "checkpoint",
            format!("data section holds {} bytes, header declares {total} floats", r.remaining()),
        ));
    }
    let mut store = ParamStore::new();
    for (name, rows, cols) in headers {
        if store.contains(&name) {
            return Err(Error::format("checkpoint", format!("duplicate tensor {name}")));
        }
        let raw = r.take(rows * cols * 4)?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::format("checkpoint", format!("{name}: non-finite value")));
        }
        let t = Tensor::from_shape_vec((rows, cols), data)
            .map_err(|e| Error::format("checkpoint", e.to_string()))?;
        store.insert(name, t);
    }
    Ok(store)
}

/// Rounds every value through `f32`, matching what a save/load cycle yields.
pub fn quantize(store: &ParamStore) -> ParamStore {
    let mut out = store.clone();
    for name in store.names().cloned().collect::<Vec<_>>() {
        out.get_mut(&name).expect("same names").mapv_inplace(|v| v as f32 as f64);
    }
    out
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn save(path: &Path, store: &ParamStore, meta: &serde_json::Value) -> Result<()> {
    fs::write(path, encode(store))?;
    fs::write(sidecar_path(path), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ParamStore, serde_json::Value)> {
    let bytes = fs::read(path).map_err(|e| Error::Missing(format!("{}: {e}", path.display())))?;
    let store = decode(&bytes)?;
    let side = sidecar_path(path);
    let meta_text =
        fs::read_to_string(&side).map_err(|e| Error::Missing(format!("{}: {e}", side.display())))?;
    let meta = serde_json::from_str(&meta_text)?;
    Ok((store, meta))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("enc.w", Tensor::from_shape_fn((3, 2), |(i, j)| i as f64 - 0.5 * j as f64));
        s.insert("lambda", Tensor::from_elem((1, 1), 0.25));
        s
    }

    #[test]
    fn round_trip_preserves_names_and_shapes() {
        let s = sample_store();
        let back = decode(&encode(&s)).unwrap();
        assert_eq!(back, quantize(&s));
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut bytes = encode(&sample_store());
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(decode(&bytes).is_err());
        assert!(decode(&[]).is_err());
    }

    #[test]
    fn rejects_huge_declared_counts() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(decode(&bytes).is_err());
    }

    proptest! {
        #[test]
        fn decode_never_panics(data in proptest::collection::vec(any::<u8>(), 0..256)) {
            let _ = decode(&data);
        }

        #[test]
        fn round_trip_random_stores(rows in 1usize..5, cols in 1usize..5, seed in any::<u64>()) {
            let mut s = ParamStore::new();
            let t = Tensor::from_shape_fn((rows, cols), |(i, j)| ((seed as f64) * 1e-19 + i as f64 * 0.3 - j as f64) as f32 as f64);
            s.insert("t", t);
            prop_assert_eq!(decode(&encode(&s)).unwrap(), s);
        }
    }
}
