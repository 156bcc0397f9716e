//! Dataset manifests.
//!
//! A manifest is a line-delimited JSON file: one header record carrying the
//! creation seed and format version, then one record per entry (image path,
//! optional annotation path, split tag, color tag, provenance). Paths are
//! stored as written, usually relative to the manifest's directory. Writers
//! emit deterministic bytes: fixed field order, no whitespace variation.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scene::ColorClass;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

pub const MANIFEST_FORMAT_VERSION: u32 = 1;

/// Which partition an entry belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Where an image came from: captured scene, diffusion sample, or prior set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Real,
    Generated,
    Prior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image: String,
    /// Annotation file path; absent for images that have none yet.
    pub annotation: Option<String>,
    pub split: Split,
    /// Subject color; absent for class-level prior images.
    pub color: Option<ColorClass>,
    pub provenance: Provenance,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    seed: u64,
}

/// Ordered entry list plus the seed that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            entries: Vec::new(),
        }
    }

    /// Image paths must be unique, as must annotation paths where present.
    pub fn validate(&self) -> Result<()> {
        let mut images = BTreeSet::new();
        let mut annotations = BTreeSet::new();
        for entry in &self.entries {
            if entry.image.is_empty() {
                return Err(Error::invalid("manifest entry with empty image path"));
            }
            if !images.insert(entry.image.as_str()) {
                return Err(Error::invalid(format!(
                    "duplicate image path '{}' in manifest",
                    entry.image
                )));
            }
            if let Some(ann) = &entry.annotation {
                if !annotations.insert(ann.as_str()) {
                    return Err(Error::invalid(format!(
                        "duplicate annotation path '{ann}' in manifest"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn count_split(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let file = crate::error::at_path(std::fs::File::create(path), path)?;
        let mut w = BufWriter::new(file);
        let header = Header {
            format_version: MANIFEST_FORMAT_VERSION,
            seed: self.seed,
        };
        writeln!(w, "{}", serde_json::to_string(&header)?)?;
        for entry in &self.entries {
            writeln!(w, "{}", serde_json::to_string(entry)?)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let display = path.display().to_string();
        let file = crate::error::at_path(std::fs::File::open(path), path)?;
        let reader = BufReader::new(file);
        let mut lines = reader.lines();

        let header_line = match lines.next() {
            Some(line) => line?,
            None => {
                return Err(Error::Malformed {
                    path: display,
                    line: 1,
                    message: "empty manifest (missing header record)".into(),
                })
            }
        };
        let header: Header =
            serde_json::from_str(&header_line).map_err(|e| Error::Malformed {
                path: display.clone(),
                line: 1,
                message: format!("bad header record: {e}"),
            })?;
        if header.format_version != MANIFEST_FORMAT_VERSION {
            return Err(Error::Malformed {
                path: display,
                line: 1,
                message: format!(
                    "unsupported manifest format version {} (this build reads {})",
                    header.format_version, MANIFEST_FORMAT_VERSION
                ),
            });
        }

        let mut entries = Vec::new();
        for (idx, line) in lines.enumerate() {
            let line = line?;
            let lineno = idx + 2;
            if line.trim().is_empty() {
                return Err(Error::Malformed {
                    path: display,
                    line: lineno,
                    message: "blank line inside manifest".into(),
                });
            }
            let entry: ManifestEntry =
                serde_json::from_str(&line).map_err(|e| Error::Malformed {
                    path: display.clone(),
                    line: lineno,
                    message: e.to_string(),
                })?;
            entries.push(entry);
        }

        let manifest = Self {
            seed: header.seed,
            entries,
        };
        manifest.validate()?;
        Ok(manifest)
    }
}

/// Reassign train/val tags by seeded shuffle. Entries already tagged `test`
/// are held out untouched; of the rest, `train_count` go to train,
/// `val_count` to val, and any remainder is tagged `test`. Entry order is
/// preserved — only the tags change.
pub fn split_manifest(
    manifest: &DatasetManifest,
    train_count: usize,
    val_count: usize,
    rng: &mut Rng,
) -> Result<DatasetManifest> {
    let pool: Vec<usize> = manifest
        .entries
        .iter()
        .enumerate()
        .filter(|(_, e)| e.split != Split::Test)
        .map(|(i, _)| i)
        .collect();
    if train_count + val_count > pool.len() {
        return Err(Error::invalid(format!(
            "split {train_count}+{val_count} exceeds the {} assignable entries",
            pool.len()
        )));
    }
    let mut shuffled = pool;
    shuffled.shuffle(rng);

    let mut out = manifest.clone();
    for (rank, &idx) in shuffled.iter().enumerate() {
        out.entries[idx].split = if rank < train_count {
            Split::Train
        } else if rank < train_count + val_count {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(out)
}

/// Split a generation budget between the green and red subjects in the
/// default 54:482 proportion.
pub fn balance_generation_counts(total: usize) -> (usize, usize) {
    balance_with_ratio(total, 54, 482).expect("default ratio is valid")
}

/// Proportional split of `total` into (green, red) by the given weights;
/// green's share is rounded half-up (ties favor green).
pub fn balance_with_ratio(total: usize, green_weight: u64, red_weight: u64) -> Result<(usize, usize)> {
    let denom = green_weight + red_weight;
    if denom == 0 {
        return Err(Error::invalid("ratio weights must not both be zero"));
    }
    // floor(total * gw / (gw + rw) + 1/2), in integers.
    let green = ((2 * total as u64 * green_weight + denom) / (2 * denom)) as usize;
    Ok((green, total - green))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::from_seed;

    fn entry(name: &str, split: Split) -> ManifestEntry {
        ManifestEntry {
            image: format!("{name}.png"),
            annotation: Some(format!("{name}.json")),
            split,
            color: Some(ColorClass::Red),
            provenance: Provenance::Real,
        }
    }

    fn sample_manifest(n: usize) -> DatasetManifest {
        let mut m = DatasetManifest::new(77);
        for i in 0..n {
            m.entries.push(entry(&format!("img_{i:04}"), Split::Train));
        }
        m
    }

    #[test]
    fn roundtrip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.manifest");
        let mut m = sample_manifest(5);
        m.entries[2].annotation = None;
        m.entries[3].color = None;
        m.entries[3].provenance = Provenance::Prior;
        m.entries[4].split = Split::Test;
        m.save(&path).unwrap();
        let back = DatasetManifest::load(&path).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn saves_are_deterministic_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.manifest");
        let b = dir.path().join("b.manifest");
        let m = sample_manifest(7);
        m.save(&a).unwrap();
        m.save(&b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn header_line_carries_seed_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.manifest");
        sample_manifest(1).save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let first = text.lines().next().unwrap();
        assert_eq!(first, r#"{"format_version":1,"seed":77}"#);
    }

    #[test]
    fn load_reports_line_and_path_on_malformed_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.manifest");
        std::fs::write(
            &path,
            "{\"format_version\":1,\"seed\":1}\n{\"image\":\"a.png\",\"annotation\":null,\"split\":\"train\",\"color\":null,\"provenance\":\"real\"}\nnot json\n",
        )
        .unwrap();
        let err = DatasetManifest::load(&path).unwrap_err();
        match err {
            Error::Malformed { line, ref path, .. } => {
                assert_eq!(line, 3);
                assert!(path.contains("data.manifest"));
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn load_rejects_unknown_fields_and_versions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.manifest");
        std::fs::write(&path, "{\"format_version\":9,\"seed\":1}\n").unwrap();
        let err = DatasetManifest::load(&path).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");

        std::fs::write(
            &path,
            "{\"format_version\":1,\"seed\":1}\n{\"image\":\"a.png\",\"annotation\":null,\"split\":\"train\",\"color\":null,\"provenance\":\"real\",\"extra\":1}\n",
        )
        .unwrap();
        assert!(DatasetManifest::load(&path).is_err());
    }

    #[test]
    fn duplicate_image_paths_are_rejected() {
        let mut m = sample_manifest(2);
        m.entries[1].image = m.entries[0].image.clone();
        m.entries[1].annotation = None;
        assert!(m.validate().is_err());
    }

    #[test]
    fn split_produces_exact_disjoint_counts() {
        let m = sample_manifest(670);
        let out = split_manifest(&m, 536, 134, &mut from_seed(5)).unwrap();
        assert_eq!(out.count_split(Split::Train), 536);
        assert_eq!(out.count_split(Split::Val), 134);
        assert_eq!(out.count_split(Split::Test), 0);
        assert_eq!(out.entries.len(), 670);
    }

    #[test]
    fn split_preserves_held_out_entries() {
        let mut m = sample_manifest(10);
        m.entries[3].split = Split::Test;
        m.entries[8].split = Split::Test;
        let out = split_manifest(&m, 5, 3, &mut from_seed(1)).unwrap();
        assert_eq!(out.entries[3].split, Split::Test);
        assert_eq!(out.entries[8].split, Split::Test);
        assert_eq!(out.count_split(Split::Train), 5);
        assert_eq!(out.count_split(Split::Val), 3);
    }

    #[test]
    fn split_with_zero_val_assigns_everything_to_train() {
        let m = sample_manifest(12);
        let out = split_manifest(&m, 12, 0, &mut from_seed(2)).unwrap();
        assert_eq!(out.count_split(Split::Train), 12);
    }

    #[test]
    fn split_is_seed_deterministic() {
        let m = sample_manifest(40);
        let a = split_manifest(&m, 20, 10, &mut from_seed(9)).unwrap();
        let b = split_manifest(&m, 20, 10, &mut from_seed(9)).unwrap();
        let c = split_manifest(&m, 20, 10, &mut from_seed(10)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn split_rejects_oversubscription() {
        let m = sample_manifest(10);
        assert!(split_manifest(&m, 8, 3, &mut from_seed(0)).is_err());
    }

    #[test]
    fn balance_matches_reference_counts() {
        assert_eq!(balance_generation_counts(536), (54, 482));
        assert_eq!(balance_generation_counts(268), (27, 241));
        assert_eq!(balance_generation_counts(1), (0, 1));
        assert_eq!(balance_generation_counts(0), (0, 0));
    }

    #[test]
    fn balance_sums_and_is_monotone() {
        let mut last = (0, 0);
        for total in 0..=600 {
            let (g, r) = balance_generation_counts(total);
            assert_eq!(g + r, total);
            assert!(g >= last.0 && r >= last.1, "total {total}");
            last = (g, r);
        }
    }

    #[test]
    fn balance_ties_favor_green() {
        // Weights 1:1, odd total: green share is x.5 exactly.
        assert_eq!(balance_with_ratio(3, 1, 1).unwrap(), (2, 1));
        assert!(balance_with_ratio(3, 0, 0).is_err());
    }
}
