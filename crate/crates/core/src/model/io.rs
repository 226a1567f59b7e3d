//! Binary parameter container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "FDYW" | version: u32 | manifest length: u64 | manifest (UTF-8) | payload
//! ```
//!
//! The manifest holds one line per entry, `name=<n> dtype=<f32|f64> shape=<d0,d1,...>`,
//! with an empty shape for scalars, and the payload concatenates the raw little-endian arrays in manifest
//! order. A tensor file is the same container with exactly one entry.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Real, Tensor};

use super::Model;

pub const MAGIC: [u8; 4] = *b"FDYW";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Raw little-endian payload bytes of this entry.
    pub bytes: Vec<u8>,
}

impl Entry {
    pub fn from_tensor<T: Real>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        let mut bytes = Vec::with_capacity(t.len() * T::DTYPE.size_bytes());
        for &v in t.data() {
            v.write_le(&mut bytes);
        }
        Self { name: name.into(), dtype: T::DTYPE, shape: t.shape().to_vec(), bytes }
    }

    /// Decodes the payload, converting from the stored dtype if it differs from `T`.
    pub fn to_tensor<T: Real>(&self) -> Result<Tensor<T>> {
        let data: Vec<T> = match self.dtype {
            DType::F32 => self.bytes.chunks_exact(4).map(|c| T::lit(f32::read_le(c) as f64)).collect(),
            DType::F64 => self.bytes.chunks_exact(8).map(|c| T::from_f64(f64::read_le(c)).unwrap()).collect(),
        };
        Tensor::new(self.shape.clone(), data)
    }

    fn byte_len(&self) -> u64 {
        self.shape.iter().product::<usize>() as u64 * self.dtype.size_bytes() as u64
    }
}

pub fn encode_entries(entries: &[Entry]) -> Result<Vec<u8>> {
    let mut names = std::collections::BTreeSet::new();
    let mut manifest = String::new();
    for e in entries {
        if e.name.is_empty() || e.name.chars().any(char::is_whitespace) || e.name.contains('=') {
            return Err(Error::Manifest(format!("entry name `{}` must be non-empty without spaces or `=`", e.name)));
        }
        if !names.insert(e.name.as_str()) {
            return Err(Error::Manifest(format!("duplicate entry `{}`", e.name)));
        }
        if e.bytes.len() as u64 != e.byte_len() {
            return Err(Error::Manifest(format!("entry `{}` payload does not match its shape", e.name)));
        }
        let dims: Vec<String> = e.shape.iter().map(usize::to_string).collect();
        manifest.push_str(&format!("name={} dtype={} shape={}\n", e.name, e.dtype.name(), dims.join(",")));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + manifest.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    for e in entries {
        out.extend_from_slice(&e.bytes);
    }
    Ok(out)
}

fn parse_manifest_line(line: &str) -> Result<(String, DType, Vec<usize>)> {
    let bad = || Error::Manifest(format!("malformed entry `{line}`"));
    let mut fields = BTreeMap::new();
    for part in line.split(' ') {
        let (k, v) = part.split_once('=').ok_or_else(bad)?;
        if fields.insert(k, v).is_some() {
            return Err(bad());
        }
    }
    if fields.len() != 3 {
        return Err(bad());
    }
    let name = fields.get("name").filter(|n| !n.is_empty()).ok_or_else(bad)?.to_string();
    let dtype = fields.get("dtype").and_then(|d| DType::parse(d)).ok_or_else(bad)?;
    let dims = fields.get("shape").ok_or_else(bad)?;
    // an empty list is a rank-0 tensor holding one value
    let shape = if dims.is_empty() {
        Vec::new()
    } else {
        dims.split(',')
            .map(|d| d.parse::<usize>().ok().filter(|&d| d > 0))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(bad)?
    };
    Ok((name, dtype, shape))
}

pub fn decode_entries(bytes: &[u8]) -> Result<Vec<Entry>> {
    if bytes.len() < 4 {
        return Err(Error::Truncated { expected: HEADER_LEN as u64, found: bytes.len() as u64 });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated { expected: HEADER_LEN as u64, found: bytes.len() as u64 });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let available = (bytes.len() - HEADER_LEN) as u64;
    if manifest_len > available {
        return Err(Error::Truncated { expected: HEADER_LEN as u64 + manifest_len, found: bytes.len() as u64 });
    }
    let manifest_end = HEADER_LEN + manifest_len as usize;
    let manifest = std::str::from_utf8(&bytes[HEADER_LEN..manifest_end])
        .map_err(|e| Error::Manifest(format!("manifest is not UTF-8: {e}")))?;

    let mut specs = Vec::new();
    let mut names = std::collections::BTreeSet::new();
    for line in manifest.lines() {
        let (name, dtype, shape) = parse_manifest_line(line)?;
        if !names.insert(name.clone()) {
            return Err(Error::Manifest(format!("duplicate entry `{name}`")));
        }
        specs.push((name, dtype, shape));
    }
    let expected: u64 = specs.iter().map(|(_, d, s)| s.iter().product::<usize>() as u64 * d.size_bytes() as u64).sum();
    let payload = &bytes[manifest_end..];
    if (payload.len() as u64) < expected {
        return Err(Error::Truncated { expected, found: payload.len() as u64 });
    }
    if payload.len() as u64 > expected {
        return Err(Error::Manifest(format!("payload has {} bytes, the manifest describes {expected}", payload.len())));
    }
    let mut offset = 0;
    Ok(specs
        .into_iter()
        .map(|(name, dtype, shape)| {
            let len = shape.iter().product::<usize>() * dtype.size_bytes();
            let bytes = payload[offset..offset + len].to_vec();
            offset += len;
            Entry { name, dtype, shape, bytes }
        })
        .collect())
}

pub fn save_weights<T: Real>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    let entries: Vec<Entry> = model.named_tensors().into_iter().map(|(n, t)| Entry::from_tensor(n, t)).collect();
    Ok(std::fs::write(path, encode_entries(&entries)?)?)
}

/// Loads parameters into an already-built model. Names, shapes and dtypes
/// must match exactly; nothing is modified unless every entry matches.
pub fn load_weights<T: Real>(model: &mut Model<T>, path: impl AsRef<Path>) -> Result<()> {
    let entries = decode_entries(&std::fs::read(path)?)?;
    let mut by_name: BTreeMap<&str, &Entry> = entries.iter().map(|e| (e.name.as_str(), e)).collect();
    let mut targets = model.named_tensors_mut();
    let mut decoded = Vec::with_capacity(targets.len());
    for (name, t) in &targets {
        let e = by_name
            .remove(name.as_str())
            .ok_or_else(|| Error::ManifestMismatch(format!("file has no entry `{name}`")))?;
        if e.dtype != T::DTYPE {
            return Err(Error::EntryDtype {
                name: name.clone(),
                expected: T::DTYPE.name().into(),
                found: e.dtype.name().into(),
            });
        }
        if e.shape != t.shape() {
            return Err(Error::EntryShape { name: name.clone(), expected: t.shape().to_vec(), found: e.shape.clone() });
        }
        decoded.push(e.to_tensor::<T>()?);
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::ManifestMismatch(format!("file has unexpected entry `{extra}`")));
    }
    for ((_, t), d) in targets.iter_mut().zip(decoded) {
        **t = d;
    }
    Ok(())
}

pub fn write_tensor<T: Real>(path: impl AsRef<Path>, name: &str, t: &Tensor<T>) -> Result<()> {
    Ok(std::fs::write(path, encode_entries(&[Entry::from_tensor(name, t)])?)?)
}

/// Reads a single-entry file, converting to `T`. Returns the entry name too.
pub fn read_tensor<T: Real>(path: impl AsRef<Path>) -> Result<(String, Tensor<T>)> {
    let mut entries = decode_entries(&std::fs::read(path)?)?;
    if entries.len() != 1 {
        return Err(Error::Manifest(format!("tensor file must hold exactly one entry, found {}", entries.len())));
    }
    let e = entries.pop().unwrap();
    let t = e.to_tensor()?;
    Ok((e.name, t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, mini_toy_config};

    fn fill_random<T: Real>(model: &mut Model<T>) {
        let mut rng = crate::init::rng(99);
        for (_, t) in model.named_tensors_mut() {
            *t = crate::init::uniform(t.shape().to_vec(), 2.0, &mut rng).unwrap();
        }
    }

    fn round_trip<T: Real>() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.fdyw");
        let mut model = build_model::<T>(&mini_toy_config(2), 3).unwrap();
        fill_random(&mut model);
        save_weights(&model, &path).unwrap();
        let mut other = build_model::<T>(&mini_toy_config(2), 4).unwrap();
        load_weights(&mut other, &path).unwrap();
        for ((na, a), (nb, b)) in model.named_tensors().into_iter().zip(other.named_tensors()) {
            assert_eq!(na, nb);
            assert!(a
                .data()
                .iter()
                .zip(b.data())
                .all(|(x, y)| x.to_f64().unwrap().to_bits() == y.to_f64().unwrap().to_bits()));
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        round_trip::<f32>();
        round_trip::<f64>();
    }

    #[test]
    fn corruption_gives_distinct_errors() {
        let model = build_model::<f32>(&mini_toy_config(2), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.fdyw");
        save_weights(&model, &path).unwrap();
        let good = std::fs::read(&path).unwrap();
        let mut target = model.clone();

        let mut bytes = good.clone();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_weights(&mut target, &path), Err(Error::BadMagic(m)) if &m == b"XDYW"));

        let mut bytes = good.clone();
        bytes[4] = 9;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_weights(&mut target, &path), Err(Error::UnsupportedVersion(9))));

        std::fs::write(&path, &good[..good.len() - 1]).unwrap();
        assert!(matches!(load_weights(&mut target, &path), Err(Error::Truncated { .. })));

        let mut edited = good.clone();
        let at = edited.windows(13).position(|w| w == b"shape=8,1,3,3").unwrap();
        edited[at..at + 13].copy_from_slice(b"shape=8,1,9,1");
        std::fs::write(&path, &edited).unwrap();
        match load_weights(&mut target, &path) {
            Err(Error::EntryShape { name, .. }) => assert_eq!(name, "layers.0.conv2d.weight"),
            other => panic!("{other:?}"),
        }

        let small = build_model::<f32>(&mini_toy_config(3), 3).unwrap();
        save_weights(&small, &path).unwrap();
        assert!(matches!(load_weights(&mut target, &path), Err(Error::EntryShape { .. })));

        let wide = build_model::<f64>(&mini_toy_config(2), 3).unwrap();
        save_weights(&wide, &path).unwrap();
        assert!(matches!(load_weights(&mut target, &path), Err(Error::EntryDtype { .. })));

        let unchanged = model.named_tensors().into_iter().zip(target.named_tensors()).all(|(a, b)| a.1 == b.1);
        assert!(unchanged, "failed loads must leave the model untouched");
    }

    #[test]
    fn manifest_problems() {
        let t = Tensor::<f32>::zeros([2]).unwrap();
        let dup = [Entry::from_tensor("a", &t), Entry::from_tensor("a", &t)];
        assert!(matches!(encode_entries(&dup), Err(Error::Manifest(_))));
        let mut bytes = encode_entries(&[Entry::from_tensor("a", &t)]).unwrap();
        bytes.push(0);
        assert!(matches!(decode_entries(&bytes), Err(Error::Manifest(_))));
        assert!(matches!(decode_entries(b"FD"), Err(Error::Truncated { .. })));
    }

    #[test]
    fn tensor_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.fdyt");
        let t = Tensor::<f64>::from_fn([3, 4], |i| i[0] as f64 * 0.1 - i[1] as f64).unwrap();
        write_tensor(&path, "logmel", &t).unwrap();
        let (name, back) = read_tensor::<f64>(&path).unwrap();
        assert_eq!(name, "logmel");
        assert_eq!(back, t);
        let (_, narrow) = read_tensor::<f32>(&path).unwrap();
        assert_eq!(narrow, t.cast::<f32>());
    }
}
