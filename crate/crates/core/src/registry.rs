//! Party-symbol registry.
//!
//! A registry is an ordered set of parties, each with a symbol normalized to
//! 180×180 greyscale. Party ids are assigned from insertion order and never
//! reused, so a registry rebuilt from the same inputs yields the same ids.
//!
//! On disk a registry is a directory holding one PNG per party and a
//! `registry.jsonl` manifest with one `{party_id, party_name, image_path}`
//! record per line.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::GrayImage;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::classifier::{preprocess, FeatureVector};
use crate::error::{Error, Result};
use crate::raster;

pub const MANIFEST_FILE: &str = "registry.jsonl";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegistryError {
    #[error("party {0:?} is already registered")]
    DuplicateParty(String),
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("party name must not be empty")]
    EmptyName,
    #[error("registry is empty")]
    EmptyRegistry,
    #[error("similarity threshold {0} outside [0, 1]")]
    InvalidThreshold(f64),
    #[error("unknown party id {0}")]
    UnknownParty(PartyId),
}

/// Opaque party identifier: the zero-padded registration index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PartyId(pub u32);

impl fmt::Display for PartyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:03}", self.0)
    }
}

impl FromStr for PartyId {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
            return Err(format!("invalid party id {s:?}"));
        }
        s.parse().map(PartyId).map_err(|e| format!("invalid party id {s:?}: {e}"))
    }
}

impl Serialize for PartyId {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PartyId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SymbolRecord {
    pub party_id: PartyId,
    pub party_name: String,
    /// Always 180×180.
    pub image: GrayImage,
}

/// Pair of parties whose symbols look alike.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarPair {
    pub first: PartyId,
    pub second: PartyId,
    /// Cosine similarity of the preprocessed features, mapped to [0, 1].
    pub similarity: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRecord {
    party_id: PartyId,
    party_name: String,
    image_path: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Registry {
    records: Vec<SymbolRecord>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[SymbolRecord] {
        &self.records
    }

    pub fn get(&self, id: PartyId) -> Option<&SymbolRecord> {
        self.records.get(id.0 as usize).filter(|r| r.party_id == id)
    }

    pub fn party_name(&self, id: PartyId) -> Option<&str> {
        self.get(id).map(|r| r.party_name.as_str())
    }

    /// Register a party. The symbol is letterboxed onto a white 180×180
    /// canvas; names must be unique.
    pub fn register_symbol(
        &mut self,
        party_name: &str,
        image: &GrayImage,
    ) -> std::result::Result<&SymbolRecord, RegistryError> {
        let party_name = party_name.trim();
        if party_name.is_empty() {
            return Err(RegistryError::EmptyName);
        }
        if image.width() == 0 || image.height() == 0 {
            return Err(RegistryError::InvalidImage("empty raster".into()));
        }
        if self.records.iter().any(|r| r.party_name == party_name) {
            return Err(RegistryError::DuplicateParty(party_name.to_string()));
        }
        let party_id = PartyId(self.records.len() as u32);
        self.records.push(SymbolRecord {
            party_id,
            party_name: party_name.to_string(),
            image: raster::letterbox(image),
        });
        Ok(self.records.last().expect("just pushed"))
    }

    /// Every unordered pair of parties whose rescaled feature similarity is at
    /// least `threshold`, most similar first.
    pub fn find_similar_symbols(
        &self,
        threshold: f64,
    ) -> std::result::Result<Vec<SimilarPair>, RegistryError> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(RegistryError::InvalidThreshold(threshold));
        }
        let features: Vec<FeatureVector> = self
            .records
            .par_iter()
            .map(|r| preprocess(&r.image).expect("registered images are non-empty"))
            .collect();
        let n = features.len();
        let mut pairs: Vec<SimilarPair> = (0..n)
            .into_par_iter()
            .flat_map_iter(|i| {
                let features = &features;
                let records = &self.records;
                (i + 1..n).filter_map(move |j| {
                    let similarity = rescaled_similarity(&features[i], &features[j]);
                    (similarity >= threshold - SIMILARITY_TOLERANCE).then(|| SimilarPair {
                        first: records[i].party_id,
                        second: records[j].party_id,
                        similarity,
                    })
                })
            })
            .collect();
        pairs.sort_by(|a, b| {
            b.similarity
                .total_cmp(&a.similarity)
                .then(a.first.cmp(&b.first))
                .then(a.second.cmp(&b.second))
        });
        Ok(pairs)
    }

    /// Write the registry as `<dir>/<party_id>.png` plus the manifest.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest_path = dir.join(MANIFEST_FILE);
        let mut manifest = Vec::new();
        for r in &self.records {
            let image_path = format!("{}.png", r.party_id);
            raster::save_png(&r.image, &dir.join(&image_path))?;
            let line = serde_json::to_string(&ManifestRecord {
                party_id: r.party_id,
                party_name: r.party_name.clone(),
                image_path,
            })
            .expect("manifest record serializes");
            writeln!(manifest, "{line}").expect("write to Vec");
        }
        fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))
    }

    /// Load a registry directory. With a manifest the parties are registered
    /// in manifest order; without one every PNG/JPG/JPEG in the directory is
    /// registered in file-name order, named after its file stem.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        if manifest_path.exists() {
            Self::load_manifest(dir, &manifest_path)
        } else {
            Self::from_image_dir(dir)
        }
    }

    fn load_manifest(dir: &Path, manifest_path: &Path) -> Result<Self> {
        let file = fs::File::open(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let mut registry = Registry::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(manifest_path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord =
                serde_json::from_str(&line).map_err(|e| Error::parse(manifest_path, n + 1, e))?;
            let image = raster::load_gray(&dir.join(&rec.image_path))?;
            let stored = registry.register_symbol(&rec.party_name, &image)?;
            if stored.party_id != rec.party_id {
                return Err(Error::parse(
                    manifest_path,
                    n + 1,
                    format!(
                        "party_id {} does not match registration order (expected {})",
                        rec.party_id, stored.party_id
                    ),
                ));
            }
        }
        Ok(registry)
    }

    /// Register every symbol image found directly inside `dir`.
    pub fn from_image_dir(dir: &Path) -> Result<Self> {
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| is_symbol_file(p))
            .collect();
        paths.sort();
        let mut registry = Registry::new();
        for path in paths {
            let name = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let image = raster::load_gray(&path)?;
            registry.register_symbol(&name, &image)?;
        }
        Ok(registry)
    }
}

fn is_symbol_file(path: &Path) -> bool {
    path.is_file()
        && path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
            .unwrap_or(false)
}

/// Slack when comparing similarities with a threshold, so that identical
/// symbols (whose computed cosine may fall an ulp short of 1) still meet a
/// threshold of 1.
pub const SIMILARITY_TOLERANCE: f64 = 1e-9;

/// Cosine similarity of two features mapped from [-1, 1] onto [0, 1].
pub fn rescaled_similarity(a: &FeatureVector, b: &FeatureVector) -> f64 {
    ((a.dot(b) + 1.0) / 2.0).clamp(0.0, 1.0)
}
