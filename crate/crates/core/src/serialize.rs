//! Named-tensor container.
//!
//! Two files: the data file holds the tensors back to back as little-endian
//! `f64`, and the sidecar `<data>.json` lists each tensor's name, shape and
//! byte offset. Loading checks that the listing tiles the data file exactly.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const FORMAT: &str = "circat-tensors";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub tensors: Vec<TensorEntry>,
}

pub fn sidecar_path(data: &Path) -> PathBuf {
    let mut s = data.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn write_container(path: &Path, tensors: &[(String, Tensor)]) -> Result<Manifest> {
    let mut seen = HashSet::new();
    let mut bytes = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        if !seen.insert(name.as_str()) {
            return Err(Error::invalid(format!("duplicate tensor name '{name}'")));
        }
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().dims().to_vec(),
            offset: bytes.len() as u64,
        });
        for &x in t.data() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.to_string(),
        version: VERSION,
        dtype: "f64le".to_string(),
        tensors: entries,
    };
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&side, json + "\n").map_err(|e| Error::io(&side, e))?;
    Ok(manifest)
}

pub fn read_container(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != FORMAT || manifest.version != VERSION || manifest.dtype != "f64le" {
        return Err(Error::invalid(format!(
            "{}: unsupported container {} v{} ({})",
            side.display(),
            manifest.format,
            manifest.version,
            manifest.dtype
        )));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::with_capacity(manifest.tensors.len());
    let mut cursor = 0u64;
    for e in manifest.tensors {
        if e.offset != cursor {
            return Err(Error::invalid(format!(
                "tensor '{}' at offset {} but expected {cursor}",
                e.name, e.offset
            )));
        }
        let shape = Shape::new(e.shape)?;
        let len = shape.numel();
        let end = cursor as usize + 8 * len;
        if end > bytes.len() {
            return Err(Error::invalid(format!("tensor '{}' runs past end of data", e.name)));
        }
        let data = bytes[cursor as usize..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        out.push((e.name, Tensor::new(shape, data)?));
        cursor = end as u64;
    }
    if cursor as usize != bytes.len() {
        return Err(Error::invalid(format!(
            "{}: {} trailing bytes",
            path.display(),
            bytes.len() - cursor as usize
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        let mut rng = SeededRng::new(1);
        let ts = vec![
            ("a".to_string(), Tensor::randn(Shape::matrix(3, 4).unwrap(), 1.0, &mut rng)),
            ("b.c".to_string(), Tensor::randn(Shape::new(vec![2, 2, 2]).unwrap(), 1e-300, &mut rng)),
            ("s".to_string(), Tensor::scalar(f64::MIN_POSITIVE).unwrap()),
        ];
        let m = write_container(&path, &ts).unwrap();
        assert_eq!(m.tensors[1].offset, 96);
        assert_eq!(fs::metadata(&path).unwrap().len(), 8 * (12 + 8 + 1));
        let back = read_container(&path).unwrap();
        assert_eq!(back, ts);
    }

    #[test]
    fn rejects_bad_input() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        let t = Tensor::scalar(1.0).unwrap();
        assert!(write_container(&path, &[("x".into(), t.clone()), ("x".into(), t.clone())]).is_err());
        write_container(&path, &[("x".into(), t)]).unwrap();
        fs::write(&path, [0u8; 16]).unwrap();
        assert!(read_container(&path).is_err());
        fs::write(&path, [0u8; 4]).unwrap();
        assert!(read_container(&path).is_err());
        assert!(matches!(
            read_container(&dir.path().join("missing.bin")),
            Err(Error::Io { .. })
        ));
    }
}
