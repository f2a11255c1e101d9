//! Single-file tensor container: one JSON manifest line, a newline, then the
//! little-endian payloads back to back. Offsets in the manifest are relative
//! to the first payload byte.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntryMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub offset: usize,
    pub nbytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub tensors: Vec<EntryMeta>,
}

/// Serializes named tensors. `F32` storage rounds each value once.
pub fn to_bytes(entries: &[(String, &Tensor)], dtype: DType) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut metas = Vec::with_capacity(entries.len());
    for (name, t) in entries {
        let offset = payload.len();
        match dtype {
            DType::F64 => t
                .data()
                .iter()
                .for_each(|x| payload.extend_from_slice(&x.to_le_bytes())),
            DType::F32 => t
                .data()
                .iter()
                .for_each(|&x| payload.extend_from_slice(&(x as f32).to_le_bytes())),
        }
        metas.push(EntryMeta {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype,
            offset,
            nbytes: payload.len() - offset,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        tensors: metas,
    };
    let mut out = serde_json::to_vec(&manifest)?;
    out.push(b'\n');
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("missing manifest terminator".into()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[..split])?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {}",
            manifest.format_version
        )));
    }
    let payload = &bytes[split + 1..];
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for meta in manifest.tensors {
        let count: usize = meta.shape.iter().product();
        if meta.nbytes != count * meta.dtype.width() || meta.offset + meta.nbytes > payload.len() {
            return Err(Error::Format(format!("bad extent for tensor {}", meta.name)));
        }
        let raw = &payload[meta.offset..meta.offset + meta.nbytes];
        let data: Vec<f64> = match meta.dtype {
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
        };
        out.push((meta.name, Tensor::new(&meta.shape, data)?));
    }
    Ok(out)
}

pub fn save(path: &Path, entries: &[(String, &Tensor)], dtype: DType) -> Result<()> {
    let bytes = to_bytes(entries, dtype)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn f64_round_trip_is_bit_exact(values in proptest::collection::vec(any::<f64>(), 1..40)) {
            let n = values.len();
            let t = Tensor::new(&[n], values).unwrap();
            let bytes = to_bytes(&[("w".into(), &t)], DType::F64).unwrap();
            let back = from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.len(), 1);
            let got: Vec<u64> = back[0].1.data().iter().map(|x| x.to_bits()).collect();
            let want: Vec<u64> = t.data().iter().map(|x| x.to_bits()).collect();
            prop_assert_eq!(got, want);
        }
    }

    #[test]
    fn f32_mode_rounds_once() {
        let t = Tensor::new(&[2, 2], vec![0.1, -2.5, 1e-3, 7.0]).unwrap();
        let bytes = to_bytes(&[("a".into(), &t)], DType::F32).unwrap();
        let back = from_bytes(&bytes).unwrap();
        for (x, y) in t.data().iter().zip(back[0].1.data()) {
            assert_eq!(*y, (*x as f32) as f64);
        }
        // re-saving the decoded f32 values reproduces the same bytes
        let again = to_bytes(&[("a".into(), &back[0].1)], DType::F32).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn manifest_lists_offsets() {
        let a = Tensor::zeros(&[3]);
        let b = Tensor::ones(&[2, 2]);
        let bytes = to_bytes(&[("a".into(), &a), ("b".into(), &b)], DType::F64).unwrap();
        let split = bytes.iter().position(|&c| c == b'\n').unwrap();
        let m: Manifest = serde_json::from_slice(&bytes[..split]).unwrap();
        assert_eq!(m.tensors[1].offset, 24);
        assert_eq!(m.tensors[1].nbytes, 32);
        assert_eq!(bytes.len(), split + 1 + 56);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let a = Tensor::ones(&[4]);
        let mut bytes = to_bytes(&[("a".into(), &a)], DType::F64).unwrap();
        bytes.truncate(bytes.len() - 1);
        assert!(from_bytes(&bytes).is_err());
    }
}
