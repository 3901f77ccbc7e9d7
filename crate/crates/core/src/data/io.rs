// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dataset directory format.
//!
//! ```text
//! <dir>/manifest.json   {version, channels, window, num_instances, classes, ood_classes, files}
//! <dir>/x.bin           MAGIC + f32 LE, row-major [N, channels, 1, window]
//! <dir>/y.bin           MAGIC + i32 LE, [N]
//! <dir>/d.bin           MAGIC + i32 LE, [N]   (optional planted domains)
//! ```
//!
//! Pseudo-domain assignments are not persisted here.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, Instance, Result};

pub const MAGIC: &[u8; 6] = b"DIVTS\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestFiles {
    pub x: String,
    pub y: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub channels: usize,
    pub window: usize,
    pub num_instances: usize,
    pub classes: Vec<String>,
    pub ood_classes: Vec<u32>,
    pub files: ManifestFiles,
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let planted = ds.planted_domains().filter(|_| !ds.is_empty());
    let manifest = Manifest {
        version: FORMAT_VERSION,
        channels: ds.channels,
        window: ds.window,
        num_instances: ds.len(),
        classes: ds.class_names.clone(),
        ood_classes: ds.ood_classes.iter().copied().collect(),
        files: ManifestFiles {
            x: "x.bin".into(),
            y: "y.bin".into(),
            d: planted.as_ref().map(|_| "d.bin".into()),
        },
    };

    let per = ds.channels * ds.window;
    let mut x = Vec::with_capacity(MAGIC.len() + 4 * per * ds.len());
    x.extend_from_slice(MAGIC);
    for inst in &ds.instances {
        for v in inst.x.iter() {
            x.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(dir.join(&manifest.files.x), x)?;
    fs::write(dir.join(&manifest.files.y), encode_i32(ds.instances.iter().map(|i| i.y as i32)))?;
    if let (Some(name), Some(d)) = (&manifest.files.d, planted) {
        fs::write(dir.join(name), encode_i32(d.into_iter().map(|v| v as i32)))?;
    }
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

fn encode_i32(values: impl Iterator<Item = i32>) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let raw = fs::read(dir.join("manifest.json"))?;
    let manifest: Manifest = serde_json::from_slice(&raw).map_err(|e| DataError::Format {
        offset: byte_offset(&raw, e.line(), e.column()),
        reason: format!("manifest.json: {e}"),
    })?;
    if manifest.version != FORMAT_VERSION {
        return Err(DataError::Format { offset: 0, reason: format!("unsupported version {}", manifest.version) });
    }
    let n = manifest.num_instances;
    let per = manifest.channels * manifest.window;

    let x = read_payload(&dir.join(&manifest.files.x), "x.bin", n * per)?;
    let y = read_payload(&dir.join(&manifest.files.y), "y.bin", n)?;
    let d = match &manifest.files.d {
        Some(name) => Some(read_payload(&dir.join(name), "d.bin", n)?),
        None => None,
    };

    let total = manifest.classes.len() as i32;
    let mut instances = Vec::with_capacity(n);
    for i in 0..n {
        let label = i32::from_le_bytes(y[i]);
        if label < 1 || label > total {
            return Err(DataError::Format {
                offset: (MAGIC.len() + 4 * i) as u64,
                reason: format!("label {label} outside 1..={total}"),
            });
        }
        let planted = match &d {
            Some(d) => {
                let v = i32::from_le_bytes(d[i]);
                if v < 0 {
                    return Err(DataError::Format {
                        offset: (MAGIC.len() + 4 * i) as u64,
                        reason: format!("negative planted domain {v}"),
                    });
                }
                Some(v as usize)
            }
            None => None,
        };
        let values: Vec<f32> = x[i * per..(i + 1) * per].iter().map(|b| f32::from_le_bytes(*b)).collect();
        let x = Array3::from_shape_vec((manifest.channels, 1, manifest.window), values).expect("sized by manifest");
        instances.push(Instance { x, y: label as u32, d_pseudo: None, d_planted: planted });
    }

    let ood: BTreeSet<u32> = manifest.ood_classes.iter().copied().collect();
    let num_id = manifest.classes.len().saturating_sub(ood.len());
    let expected: BTreeSet<u32> = (num_id as u32 + 1..=manifest.classes.len() as u32).collect();
    if ood != expected {
        return Err(DataError::Format {
            offset: 0,
            reason: format!("ood_classes {:?} must be the trailing class indices {:?}", ood, expected),
        });
    }
    Dataset::new(instances, manifest.channels, manifest.window, manifest.classes, num_id)
}

/// Reads a magic-prefixed payload of `count` 4-byte words.
fn read_payload(path: &Path, what: &str, count: usize) -> Result<Vec<[u8; 4]>> {
    let bytes = fs::read(path)?;
    if let Some(pos) = MAGIC.iter().zip(bytes.iter()).position(|(a, b)| a != b) {
        return Err(DataError::Format { offset: pos as u64, reason: format!("{what}: bad magic") });
    }
    if bytes.len() < MAGIC.len() {
        return Err(DataError::Format { offset: bytes.len() as u64, reason: format!("{what}: truncated magic") });
    }
    let body = &bytes[MAGIC.len()..];
    if body.len() % 4 != 0 {
        return Err(DataError::Format {
            offset: (MAGIC.len() + body.len() - body.len() % 4) as u64,
            reason: format!("{what}: trailing partial word"),
        });
    }
    if body.len() / 4 != count {
        return Err(DataError::DimensionMismatch { what: what.into(), expected: count, found: body.len() / 4 });
    }
    Ok(body.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect())
}

fn byte_offset(raw: &[u8], line: usize, column: usize) -> u64 {
    if line == 0 {
        return 0;
    }
    let start: usize = raw
        .split(|&b| b == b'\n')
        .take(line - 1)
        .map(|l| l.len() + 1)
        .sum();
    (start + column.saturating_sub(1)) as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(n: usize, planted: bool) -> Dataset {
        let instances = (0..n)
            .map(|i| Instance {
                x: Array3::from_shape_fn((2, 1, 5), |(c, _, t)| (i * 10 + c * 5 + t) as f32 * 0.37 - 1.5),
                y: (i % 3) as u32 + 1,
                d_pseudo: None,
                d_planted: planted.then_some(i % 2),
            })
            .collect();
        Dataset::new(instances, 2, 5, vec!["a".into(), "b".into(), "c".into(), "z".into()], 3).unwrap()
    }

    #[test]
    fn round_trip_three_instances() {
        let dir = tempfile::tempdir().unwrap();
        for planted in [false, true] {
            let ds = sample(3, planted);
            save_dataset(&ds, dir.path()).unwrap();
            assert_eq!(load_dataset(dir.path()).unwrap(), ds);
            if !planted {
                fs::remove_file(dir.path().join("d.bin")).ok();
            }
        }
    }

    #[test]
    fn round_trip_preserves_special_floats_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = sample(1, false);
        ds.instances[0].x[[0, 0, 0]] = -0.0;
        ds.instances[0].x[[0, 0, 1]] = f32::MIN_POSITIVE / 4.0;
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        let a: Vec<u32> = ds.instances[0].x.iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = back.instances[0].x.iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn manifest_payload_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&sample(9, false), dir.path()).unwrap();
        let path = dir.path().join("manifest.json");
        let mut m: Manifest = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
        m.num_instances = 10;
        fs::write(&path, serde_json::to_string(&m).unwrap()).unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(DataError::DimensionMismatch { expected: 100, found: 90, .. })
        ));
    }

    #[test]
    fn corrupted_magic() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&sample(2, false), dir.path()).unwrap();
        let path = dir.path().join("y.bin");
        let mut bytes = fs::read(&path).unwrap();
        bytes[2] = b'X';
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(DataError::Format { offset: 2, .. })));
    }

    #[test]
    fn malformed_manifest_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("manifest.json"), "{\n  \"version\": 1,\n  oops\n}").unwrap();
        match load_dataset(dir.path()) {
            Err(DataError::Format { offset, .. }) => assert_eq!(offset, 20),
            other => panic!("unexpected {other:?}"),
        }
    }
}
