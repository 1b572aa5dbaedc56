//! Named f64 tensors as one little-endian binary file plus a JSON manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffcore::{ParameterSet, Tensor};
use crate::error::{Error, Result};

pub const FORMAT: &str = "f64le-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in elements.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub data_file: String,
    pub entries: Vec<ManifestEntry>,
}

fn paths(dir: &Path, name: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{name}.json")), dir.join(format!("{name}.bin")))
}

/// Writes every entry of `sets` under its full `scope.name`.
pub fn save_checkpoint(sets: &[&ParameterSet], dir: &Path, name: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (manifest_path, bin_path) = paths(dir, name);
    let mut bytes = Vec::new();
    let mut entries = Vec::new();
    let mut offset = 0;
    for set in sets {
        for (entry, p) in set.iter() {
            let full = set.full_name(entry);
            if entries.iter().any(|e: &ManifestEntry| e.name == full) {
                return Err(Error::InvalidArgument(format!("checkpoint entry `{full}` appears twice")));
            }
            for v in p.value.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            let len = p.value.numel();
            entries.push(ManifestEntry { name: full, shape: p.value.shape().to_vec(), offset, len });
            offset += len;
        }
    }
    std::fs::write(&bin_path, &bytes).map_err(|e| Error::io(&bin_path, e))?;
    let manifest = Manifest {
        format: FORMAT.to_string(),
        data_file: bin_path.file_name().expect("file name").to_string_lossy().into_owned(),
        entries,
    };
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    std::fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}

/// Reads a checkpoint back as `full name -> tensor`.
pub fn load_checkpoint(dir: &Path, name: &str) -> Result<BTreeMap<String, Tensor>> {
    let (manifest_path, _) = paths(dir, name);
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != FORMAT {
        return Err(Error::InvalidArgument(format!("unknown checkpoint format `{}`", manifest.format)));
    }
    let bin_path = dir.join(&manifest.data_file);
    let bytes = std::fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::InvalidArgument(format!("{} is not a whole number of f64s", bin_path.display())));
    }
    let values: Vec<f64> =
        bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let mut out = BTreeMap::new();
    for e in manifest.entries {
        let end = e.offset.checked_add(e.len).filter(|&end| end <= values.len()).ok_or_else(|| {
            Error::InvalidArgument(format!("entry `{}` runs past the end of {}", e.name, bin_path.display()))
        })?;
        out.insert(e.name, Tensor::new(e.shape, values[e.offset..end].to_vec())?);
    }
    Ok(out)
}

/// Overwrites every entry of `sets` from a checkpoint; each must be present
/// with a matching shape.
pub fn restore_checkpoint(sets: &mut [&mut ParameterSet], dir: &Path, name: &str) -> Result<()> {
    let mut stored = load_checkpoint(dir, name)?;
    for set in sets.iter_mut() {
        let names: Vec<String> = set.iter().map(|(n, _)| n.to_string()).collect();
        for n in names {
            let full = set.full_name(&n);
            let t = stored
                .remove(&full)
                .ok_or_else(|| Error::InvalidArgument(format!("checkpoint lacks `{full}`")))?;
            let slot = set.get_mut(&n).expect("listed entry");
            if slot.shape() != t.shape() {
                return Err(Error::Shape { op: "restore_checkpoint", shapes: vec![slot.shape().to_vec(), t.shape().to_vec()] });
            }
            *slot = t;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(scope: &str, vals: &[f64]) -> ParameterSet {
        let mut s = ParameterSet::new(scope);
        s.insert("w", Tensor::new(vec![vals.len()], vals.to_vec()).unwrap()).unwrap();
        s.insert("b", Tensor::scalar(-0.0)).unwrap();
        s
    }

    #[test]
    fn reload_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let a = set("a", &[0.1, 1.0 / 3.0, f64::MIN_POSITIVE, -7e300]);
        let b = set("b", &[std::f64::consts::PI]);
        save_checkpoint(&[&a, &b], dir.path(), "ck").unwrap();
        let mut a2 = set("a", &[0.0; 4]);
        let mut b2 = set("b", &[0.0]);
        restore_checkpoint(&mut [&mut a2, &mut b2], dir.path(), "ck").unwrap();
        assert_eq!(a.checksum(), a2.checksum());
        assert_eq!(b.checksum(), b2.checksum());
        assert!(a2.get("b").unwrap().data()[0].is_sign_negative());
    }

    #[test]
    fn shape_mismatch_and_missing_entries_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&[&set("a", &[1.0, 2.0])], dir.path(), "ck").unwrap();
        let mut wrong = set("a", &[0.0; 3]);
        assert!(restore_checkpoint(&mut [&mut wrong], dir.path(), "ck").is_err());
        let mut other = set("z", &[0.0; 2]);
        assert!(restore_checkpoint(&mut [&mut other], dir.path(), "ck").is_err());
    }

    #[test]
    fn truncated_binary_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&[&set("a", &[1.0, 2.0])], dir.path(), "ck").unwrap();
        let bin = dir.path().join("ck.bin");
        let bytes = std::fs::read(&bin).unwrap();
        std::fs::write(&bin, &bytes[..bytes.len() - 8]).unwrap();
        assert!(load_checkpoint(dir.path(), "ck").is_err());
    }
}
