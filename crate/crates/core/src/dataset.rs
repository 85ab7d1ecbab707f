//! Labelled dataset construction, stratified splitting and on-disk layout.
//!
//! Layout: `<root>/<party_id>/<variant_index>.png` plus a `manifest.jsonl`
//! listing `{path, label, variant_index}` per image. Split manifests
//! (`train.jsonl`, `test.jsonl`) use the same record shape and live in the
//! dataset root so their relative paths resolve identically.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use image::GrayImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::augment::{generate_variations, AugmentationSpec};
use crate::error::{Error, Result};
use crate::raster;
use crate::registry::{PartyId, Registry};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const TRAIN_MANIFEST: &str = "train.jsonl";
pub const TEST_MANIFEST: &str = "test.jsonl";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DatasetError {
    #[error("registry is empty")]
    EmptyRegistry,
    #[error("train fraction {0} must lie strictly between 0 and 1")]
    InvalidFraction(f64),
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("invalid augmentation spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledItem {
    pub image: GrayImage,
    pub label: PartyId,
    /// 0 is the original symbol, 1..=18 the augmentation variants.
    pub variant_index: u8,
}

impl LabeledItem {
    /// Path of this item relative to a dataset root.
    pub fn relative_path(&self) -> String {
        format!("{}/{}.png", self.label, self.variant_index)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledDataset {
    pub items: Vec<LabeledItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub path: String,
    pub label: PartyId,
    pub variant_index: u8,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Item count per label.
    pub fn label_counts(&self) -> BTreeMap<PartyId, usize> {
        let mut counts = BTreeMap::new();
        for item in &self.items {
            *counts.entry(item.label).or_insert(0) += 1;
        }
        counts
    }

    /// SHA-256 over labels, variant indices and pixels, hex encoded.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for item in &self.items {
            hasher.update(item.label.0.to_le_bytes());
            hasher.update([item.variant_index]);
            hasher.update(item.image.width().to_le_bytes());
            hasher.update(item.image.height().to_le_bytes());
            hasher.update(item.image.as_raw());
        }
        hex::encode(hasher.finalize())
    }

    pub fn manifest(&self) -> Vec<ManifestRecord> {
        self.items
            .iter()
            .map(|i| ManifestRecord {
                path: i.relative_path(),
                label: i.label,
                variant_index: i.variant_index,
            })
            .collect()
    }

    /// Write every image plus `manifest.jsonl` under `root`.
    pub fn write(&self, root: &Path) -> Result<()> {
        for label in self.label_counts().keys() {
            let dir = root.join(label.to_string());
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        self.items.par_iter().try_for_each(|item| {
            raster::save_png(&item.image, &root.join(item.relative_path()))
        })?;
        write_manifest(&root.join(MANIFEST_FILE), &self.manifest())
    }

    /// Load a dataset from a manifest; image paths resolve against the
    /// manifest's directory.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let records = read_manifest(manifest_path)?;
        let root = manifest_path.parent().unwrap_or(Path::new("."));
        let items = records
            .into_par_iter()
            .map(|r| {
                Ok(LabeledItem {
                    image: raster::load_gray(&root.join(&r.path))?,
                    label: r.label,
                    variant_index: r.variant_index,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LabeledDataset { items })
    }
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        let line = serde_json::to_string(r).expect("manifest record serializes");
        writeln!(buf, "{line}").expect("write to Vec");
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::parse(path, n + 1, e))?);
    }
    Ok(out)
}

/// Expand every registered symbol into its 19 images, in party id order.
pub fn build_labeled_dataset(
    registry: &Registry,
    spec: &AugmentationSpec,
) -> std::result::Result<LabeledDataset, DatasetError> {
    if registry.is_empty() {
        return Err(DatasetError::EmptyRegistry);
    }
    spec.validate()?;
    let per_party = registry
        .records()
        .par_iter()
        .map(|record| {
            let variants = generate_variations(&record.image, spec)?;
            Ok(variants
                .into_iter()
                .enumerate()
                .map(|(i, image)| LabeledItem {
                    image,
                    label: record.party_id,
                    variant_index: i as u8,
                })
                .collect::<Vec<_>>())
        })
        .collect::<std::result::Result<Vec<_>, DatasetError>>()?;
    Ok(LabeledDataset {
        items: per_party.into_iter().flatten().collect(),
    })
}

/// Number of items per label that a stratified split sends to test.
pub fn test_count(label_size: usize, train_fraction: f64) -> usize {
    (((1.0 - train_fraction) * label_size as f64).round() as usize).min(label_size)
}

/// Stratified split: for each label, `round((1 − f) · n)` items chosen by a
/// seeded shuffle go to test, the rest to train. Both halves keep the
/// dataset's original order.
pub fn split_dataset(
    dataset: &LabeledDataset,
    train_fraction: f64,
    shuffle_seed: u64,
) -> std::result::Result<(LabeledDataset, LabeledDataset), DatasetError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DatasetError::InvalidFraction(train_fraction));
    }
    let mut by_label: BTreeMap<PartyId, Vec<usize>> = BTreeMap::new();
    for (i, item) in dataset.items.iter().enumerate() {
        by_label.entry(item.label).or_default().push(i);
    }
    let mut test_members = HashSet::new();
    for (label, mut indices) in by_label {
        let mut rng = ChaCha8Rng::seed_from_u64(
            shuffle_seed ^ (label.0 as u64 + 1).wrapping_mul(0xD6E8_FEB8_6659_FD93),
        );
        indices.shuffle(&mut rng);
        let k = test_count(indices.len(), train_fraction);
        test_members.extend(indices.into_iter().take(k));
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, item) in dataset.items.iter().enumerate() {
        if test_members.contains(&i) {
            test.push(item.clone());
        } else {
            train.push(item.clone());
        }
    }
    Ok((LabeledDataset { items: train }, LabeledDataset { items: test }))
}

#[cfg(test)]
mod tests {
    use image::Luma;

    use super::*;

    fn registry(n: usize) -> Registry {
        let mut reg = Registry::new();
        for i in 0..n {
            let img = GrayImage::from_fn(180, 180, |x, y| {
                Luma([if (x as usize + i * 13) % 60 < 20 && y > 40 { 0 } else { 255 }])
            });
            reg.register_symbol(&format!("party-{i}"), &img).unwrap();
        }
        reg
    }

    #[test]
    fn one_party_gives_nineteen_items() {
        let ds = build_labeled_dataset(&registry(1), &AugmentationSpec::canonical(0)).unwrap();
        assert_eq!(ds.len(), 19);
        let variants: Vec<u8> = ds.items.iter().map(|i| i.variant_index).collect();
        assert_eq!(variants, (0..19).collect::<Vec<u8>>());
    }

    #[test]
    fn every_label_has_nineteen_items() {
        let ds = build_labeled_dataset(&registry(4), &AugmentationSpec::canonical(0)).unwrap();
        assert_eq!(ds.len(), 76);
        assert!(ds.label_counts().values().all(|&c| c == 19));
        // party id order
        assert!(ds.items.windows(2).all(|w| w[0].label <= w[1].label));
    }

    #[test]
    fn empty_registry_is_an_error() {
        assert_eq!(
            build_labeled_dataset(&Registry::new(), &AugmentationSpec::canonical(0)),
            Err(DatasetError::EmptyRegistry)
        );
    }

    #[test]
    fn half_split_rounds_half_up() {
        let ds = build_labeled_dataset(&registry(1), &AugmentationSpec::canonical(0)).unwrap();
        let (train, test) = split_dataset(&ds, 0.5, 3).unwrap();
        assert_eq!((train.len(), test.len()), (9, 10));
    }

    #[test]
    fn split_is_seeded() {
        let ds = build_labeled_dataset(&registry(3), &AugmentationSpec::canonical(0)).unwrap();
        let a = split_dataset(&ds, 0.8, 42).unwrap();
        let b = split_dataset(&ds, 0.8, 42).unwrap();
        assert_eq!(a, b);
        let c = split_dataset(&ds, 0.8, 43).unwrap();
        assert_ne!(a.1, c.1);
    }

    #[test]
    fn invalid_fractions() {
        let ds = LabeledDataset::default();
        for f in [0.0, 1.0, -0.2, 1.5, f64::NAN] {
            assert!(matches!(
                split_dataset(&ds, f, 0),
                Err(DatasetError::InvalidFraction(_))
            ));
        }
    }

    #[test]
    fn write_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = build_labeled_dataset(&registry(2), &AugmentationSpec::canonical(5)).unwrap();
        ds.write(dir.path()).unwrap();
        assert!(dir.path().join("001/18.png").exists());
        let loaded = LabeledDataset::load(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(loaded.digest(), ds.digest());
    }
}
