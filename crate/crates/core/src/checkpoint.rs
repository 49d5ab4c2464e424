//! Checkpoint container.
//!
//! Layout: the five magic bytes `KRST1`, a little-endian `u64` manifest
//! length, the manifest as JSON text, then every parameter's values as
//! little-endian `f64` in manifest order. Manifest offsets are byte offsets
//! into the payload section.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"KRST1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dtype: String,
    pub params: Vec<ManifestEntry>,
    /// Free-form metadata, e.g. the run configuration.
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn encode(store: &ParamStore, meta: &serde_json::Value) -> Result<Vec<u8>> {
    let mut offset = 0u64;
    let params = store
        .iter()
        .map(|(name, t)| {
            let e = ManifestEntry { name: name.to_string(), shape: t.shape.clone(), offset };
            offset += 8 * t.numel() as u64;
            e
        })
        .collect();
    let manifest = Manifest { dtype: "f64".into(), params, meta: meta.clone() };
    let text = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + text.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(&text);
    for (_, t) in store.iter() {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn format_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format { offset: offset as u64, msg: msg.into() }
}

pub fn decode(bytes: &[u8]) -> Result<(ParamStore, serde_json::Value)> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(format_err(0, "missing KRST1 magic"));
    }
    let len_at = MAGIC.len();
    let len_bytes: [u8; 8] =
        bytes.get(len_at..len_at + 8).ok_or_else(|| format_err(len_at, "truncated manifest length"))?.try_into().expect("slice of 8");
    let mlen = u64::from_le_bytes(len_bytes) as usize;
    let text_at = len_at + 8;
    let text = bytes
        .get(text_at..text_at.saturating_add(mlen))
        .ok_or_else(|| format_err(text_at, format!("manifest of {mlen} bytes runs past end of file")))?;
    let manifest: Manifest = serde_json::from_slice(text).map_err(|e| format_err(text_at, format!("manifest is not valid JSON: {e}")))?;
    if manifest.dtype != "f64" {
        return Err(format_err(text_at, format!("unsupported dtype `{}`", manifest.dtype)));
    }
    let payload_at = text_at + mlen;
    let payload = &bytes[payload_at..];
    let mut store = ParamStore::new();
    let mut expected = 0u64;
    for e in &manifest.params {
        let at = payload_at + e.offset as usize;
        if e.offset != expected {
            return Err(format_err(at, format!("`{}` starts at payload offset {}, expected {expected}", e.name, e.offset)));
        }
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + 8 * n;
        let raw = payload.get(start..end).ok_or_else(|| format_err(at, format!("payload for `{}` truncated", e.name)))?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8"))).collect();
        let t = Tensor::new(e.shape.clone(), data).map_err(|err| format_err(at, err.to_string()))?;
        store.insert(e.name.clone(), t).map_err(|err| format_err(at, err.to_string()))?;
        expected = end as u64;
    }
    if expected as usize != payload.len() {
        return Err(format_err(payload_at + expected as usize, "trailing bytes after last parameter"));
    }
    Ok((store, manifest.meta))
}

pub fn save(path: impl AsRef<Path>, store: &ParamStore, meta: &serde_json::Value) -> Result<()> {
    std::fs::write(path, encode(store, meta)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<(ParamStore, serde_json::Value)> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("b.w", Tensor::matrix(2, 3, vec![1.0, -2.5, 3.25, f64::MIN_POSITIVE, -0.0, 1e300]).unwrap()).unwrap();
        s.insert("a.bias", Tensor::matrix(1, 2, vec![0.1, 0.2]).unwrap()).unwrap();
        s
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&sample_store(), &serde_json::json!({"k": 1})).unwrap();
        assert_eq!(&bytes[..5], b"KRST1");
        let mlen = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
        let manifest: Manifest = serde_json::from_slice(&bytes[13..13 + mlen]).unwrap();
        assert_eq!(manifest.params[0].name, "a.bias");
        assert_eq!(manifest.params[1].offset, 16);
        assert_eq!(bytes.len(), 13 + mlen + 8 * 8);
    }

    #[test]
    fn corrupt_inputs_report_offsets() {
        let bytes = encode(&sample_store(), &serde_json::Value::Null).unwrap();
        assert!(matches!(decode(b"KRST2...."), Err(Error::Format { offset: 0, .. })));
        let truncated = &bytes[..bytes.len() - 4];
        match decode(truncated) {
            Err(Error::Format { offset, .. }) => assert!(offset > 13),
            other => panic!("{other:?}"),
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode(&extra), Err(Error::Format { .. })));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(vals in proptest::collection::vec(any::<f64>(), 1..40), rows in 1usize..4) {
            let n = vals.len() / rows * rows;
            prop_assume!(n > 0);
            let mut s = ParamStore::new();
            s.insert("p", Tensor::matrix(rows, n / rows, vals[..n].to_vec()).unwrap()).unwrap();
            let (back, _) = decode(&encode(&s, &serde_json::Value::Null).unwrap()).unwrap();
            let a = &s.get("p").unwrap().data;
            let b = &back.get("p").unwrap().data;
            prop_assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
            prop_assert_eq!(&s.get("p").unwrap().shape, &back.get("p").unwrap().shape);
        }
    }
}
