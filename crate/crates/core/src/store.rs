//! Dataset directories: one EPOC1 file per epoch plus `manifest.csv`.
//!
//! The manifest starts with a `#clip_bound=` metadata line, then
//! `file,subject_id,label,checksum` rows. The checksum is FNV-1a 64 over the
//! file bytes, so `verify` catches corruption that still decodes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::signals::{decode_epoc1, encode_epoc1, Dataset, Epoch, Stage};

pub const MANIFEST_NAME: &str = "manifest.csv";
const MANIFEST_HEADER: &str = "file,subject_id,label,checksum";

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub file: String,
    pub subject_id: String,
    pub label: Option<Stage>,
    pub checksum: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub clip_bound: f32,
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn to_csv(&self) -> String {
        let mut out = format!("#clip_bound={}\n{MANIFEST_HEADER}\n", self.clip_bound);
        for r in &self.rows {
            let label = r.label.map_or(String::new(), |l| l.to_string());
            out.push_str(&format!("{},{},{},{:016x}\n", r.file, r.subject_id, label, r.checksum));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let loc = |line: usize| format!("{MANIFEST_NAME} line {line}");
        let mut clip_bound = None;
        let mut header_seen = false;
        let mut rows = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                if let Some(v) = meta.trim().strip_prefix("clip_bound=") {
                    let v: f32 = v
                        .trim()
                        .parse()
                        .map_err(|_| Error::format_at(loc(i + 1), format!("bad clip bound {v:?}")))?;
                    clip_bound = Some(v);
                }
                continue;
            }
            if !header_seen {
                if line != MANIFEST_HEADER {
                    return Err(Error::format_at(loc(i + 1), format!("expected header {MANIFEST_HEADER:?}")));
                }
                header_seen = true;
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(Error::format_at(loc(i + 1), format!("expected 4 fields, found {}", f.len())));
            }
            let label = match f[2].trim() {
                "" => None,
                s => Some(s.parse::<Stage>().map_err(|e| Error::format_at(loc(i + 1), e.to_string()))?),
            };
            let checksum = u64::from_str_radix(f[3].trim(), 16)
                .map_err(|_| Error::format_at(loc(i + 1), format!("bad checksum {:?}", f[3])))?;
            rows.push(ManifestRow {
                file: f[0].trim().to_string(),
                subject_id: f[1].trim().to_string(),
                label,
                checksum,
            });
        }
        let clip_bound =
            clip_bound.ok_or_else(|| Error::format_at(MANIFEST_NAME, "missing #clip_bound= line"))?;
        if !header_seen {
            return Err(Error::format_at(MANIFEST_NAME, "missing header"));
        }
        Ok(Manifest { clip_bound, rows })
    }
}

fn epoch_file_name(subject: &str, index: usize) -> String {
    format!("{subject}_{index:05}.epc")
}

/// Writes every epoch and the manifest into `dir`, creating it if needed.
pub fn write_dataset_dir(dataset: &Dataset, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rows = Vec::with_capacity(dataset.len());
    for (i, epoch) in dataset.epochs().iter().enumerate() {
        let bytes = encode_epoc1(epoch)?;
        let file = epoch_file_name(&epoch.subject_id, i);
        let path = dir.join(&file);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        rows.push(ManifestRow {
            file,
            subject_id: epoch.subject_id.clone(),
            label: epoch.label,
            checksum: fnv1a64(&bytes),
        });
    }
    let manifest = Manifest {
        clip_bound: dataset.clip_bound,
        rows,
    };
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, manifest.to_csv()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Manifest::parse(&text)
}

fn load_row(dir: &Path, row: &ManifestRow) -> Result<Epoch> {
    let path = dir.join(&row.file);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let bad = |msg: String| Error::format_at(path.display().to_string(), msg);
    let sum = fnv1a64(&bytes);
    if sum != row.checksum {
        return Err(bad(format!("checksum {sum:016x} does not match manifest {:016x}", row.checksum)));
    }
    let epoch = decode_epoc1(&bytes).map_err(|e| bad(e.to_string()))?;
    if epoch.subject_id != row.subject_id || epoch.label != row.label {
        return Err(bad("subject or label disagrees with the manifest".into()));
    }
    Ok(epoch)
}

/// Checks every listed file. The error names the first bad one.
pub fn verify_dataset_dir(dir: &Path) -> Result<usize> {
    let manifest = read_manifest(dir)?;
    for row in &manifest.rows {
        load_row(dir, row)?;
    }
    Ok(manifest.rows.len())
}

pub fn read_dataset_dir(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let epochs = manifest
        .rows
        .iter()
        .map(|r| load_row(dir, r))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(epochs, manifest.clip_bound)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signals::{generate_synthetic_dataset, SynthConfig};

    fn small() -> Dataset {
        generate_synthetic_dataset(&SynthConfig {
            n_subjects: 3,
            epochs_per_subject: 2,
            samples: 600,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn fnv_reference_values() {
        // Published FNV-1a 64 test vectors.
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small();
        let m = write_dataset_dir(&ds, dir.path()).unwrap();
        assert_eq!(m.rows.len(), 6);
        assert_eq!(Manifest::parse(&m.to_csv()).unwrap(), m);
        let back = read_dataset_dir(dir.path()).unwrap();
        assert_eq!(back.epochs(), ds.epochs());
        assert_eq!(verify_dataset_dir(dir.path()).unwrap(), 6);

        let victim = dir.path().join(&m.rows[3].file);
        let mut bytes = fs::read(&victim).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x01;
        fs::write(&victim, bytes).unwrap();
        let err = verify_dataset_dir(dir.path()).unwrap_err().to_string();
        assert!(err.contains(&m.rows[3].file), "{err}");
    }
}
