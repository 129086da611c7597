//! `GRLB1` tensor container.
//!
//! Layout (little-endian): the 5 magic bytes `GRLB1`, a `u32` tensor count,
//! then per tensor a `u32` name length, the UTF-8 name, a `u32` rank, `rank`
//! `u32` extents and `product(extents)` raw `f32` values.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::adam::{AdamConfig, AdamState};
use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"GRLB1";

pub fn encode_tensors<'a>(entries: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>) -> Vec<u8> {
    let entries: Vec<_> = entries.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
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
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| TensorError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(TensorError::Checkpoint("bad magic bytes".into()));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| TensorError::Checkpoint(format!("tensor name: {e}")))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| TensorError::Checkpoint("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(TensorError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

/// Writes to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(match path.extension() {
        Some(ext) => format!("{}.tmp", ext.to_string_lossy()),
        None => "tmp".to_string(),
    });
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_params(path: &Path, params: &ParamStore<f32>) -> Result<()> {
    write_atomic(path, &encode_tensors(params.iter()))
}

pub fn load_params(path: &Path) -> Result<ParamStore<f32>> {
    let bytes = fs::read(path)?;
    let mut store = ParamStore::new();
    for (name, t) in decode_tensors(&bytes)? {
        store.insert(name, t);
    }
    Ok(store)
}

/// Moment tensors are stored as `m.<param>` / `v.<param>`; the step counter
/// and hyperparameters live in the JSON sidecar.
pub fn save_adam(path: &Path, params: &ParamStore<f32>, state: &AdamState<f32>) -> Result<()> {
    let names: Vec<String> = params
        .names()
        .iter()
        .flat_map(|n| [format!("m.{n}"), format!("v.{n}")])
        .collect();
    let tensors: Vec<&Tensor<f32>> = state.m.iter().zip(&state.v).flat_map(|(m, v)| [m, v]).collect();
    write_atomic(path, &encode_tensors(names.iter().map(String::as_str).zip(tensors)))
}

pub fn load_adam(path: &Path, params: &ParamStore<f32>, config: AdamConfig, step: u64) -> Result<AdamState<f32>> {
    let bytes = fs::read(path)?;
    let entries = decode_tensors(&bytes)?;
    let lookup: std::collections::HashMap<_, _> = entries.into_iter().collect();
    let mut state = AdamState::new(config, params);
    state.step = step;
    for (i, (name, p)) in params.iter().enumerate() {
        for (prefix, slot) in [("m", &mut state.m[i]), ("v", &mut state.v[i])] {
            let key = format!("{prefix}.{name}");
            let t = lookup
                .get(&key)
                .ok_or_else(|| TensorError::Checkpoint(format!("optimizer state lacks `{key}`")))?;
            if t.shape() != p.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "load_adam",
                    lhs: p.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            *slot = t.clone();
        }
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::from_slice(vec![2], &[1.0f32, -2.0]).unwrap();
        let bytes = encode_tensors([("ab", &t)]);
        let mut want = b"GRLB1".to_vec();
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(b"ab");
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(decode_tensors(b"GRLB2\0\0\0\0").is_err());
        let t = Tensor::from_slice(vec![3], &[1.0f32, 2.0, 3.0]).unwrap();
        let bytes = encode_tensors([("x", &t)]);
        assert!(decode_tensors(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn adam_state_survives_a_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = ParamStore::new();
        p.insert("a", Tensor::from_slice(vec![2], &[0.5f32, 1.5]).unwrap());
        let mut s = AdamState::new(AdamConfig::default(), &p);
        s.step(&mut p, &[Tensor::from_slice(vec![2], &[0.1f32, -0.2]).unwrap()]).unwrap();
        let path = dir.path().join("opt.grlb");
        save_adam(&path, &p, &s).unwrap();
        let back = load_adam(&path, &p, s.config, s.step).unwrap();
        assert_eq!(back, s);
    }
}
