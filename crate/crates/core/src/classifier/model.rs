use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use image::GrayImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::features::{preprocess, FeatureVector, FEATURE_DIM};
use super::{Candidate, ClassifierError, Prediction, Predictor};
use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::registry::{PartyId, Registry};

pub const DEFAULT_TEMPERATURE: f64 = 0.05;
pub const DEFAULT_TOP_K: usize = 5;

const MODEL_FORMAT: &str = "vvpat-centroid-model";
const MODEL_VERSION: u32 = 1;

/// Fitted nearest-centroid model: one unit-norm centroid per party.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    classes: Vec<PartyId>,
    centroids: Vec<FeatureVector>,
    party_names: BTreeMap<PartyId, String>,
    temperature: f64,
    created_from: String,
}

/// Centroid per label: the L2-normalized mean of the label's features.
pub fn fit(train: &LabeledDataset) -> std::result::Result<Model, ClassifierError> {
    if train.is_empty() {
        return Err(ClassifierError::EmptyTrainingSet);
    }
    let features = train
        .items
        .par_iter()
        .map(|item| preprocess(&item.image))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let mut sums: BTreeMap<PartyId, Vec<f64>> = BTreeMap::new();
    for (item, feature) in train.items.iter().zip(&features) {
        let sum = sums
            .entry(item.label)
            .or_insert_with(|| vec![0.0; FEATURE_DIM]);
        sum.iter_mut()
            .zip(feature.values())
            .for_each(|(s, v)| *s += v);
    }
    let mut classes = Vec::with_capacity(sums.len());
    let mut centroids = Vec::with_capacity(sums.len());
    for (label, sum) in sums {
        let centroid = FeatureVector::normalized(sum)?;
        if centroid.is_zero() {
            return Err(ClassifierError::DegenerateClass(label));
        }
        classes.push(label);
        centroids.push(centroid);
    }
    Ok(Model {
        classes,
        centroids,
        party_names: BTreeMap::new(),
        temperature: DEFAULT_TEMPERATURE,
        created_from: train.digest(),
    })
}

impl Model {
    /// Build a model from explicit centroids; each is renormalized.
    pub fn from_centroids(
        centroids: impl IntoIterator<Item = (PartyId, FeatureVector)>,
    ) -> std::result::Result<Self, ClassifierError> {
        let table: BTreeMap<PartyId, FeatureVector> = centroids.into_iter().collect();
        let mut classes = Vec::with_capacity(table.len());
        let mut normalized = Vec::with_capacity(table.len());
        for (label, centroid) in table {
            let centroid = FeatureVector::normalized(centroid.values().to_vec())?;
            if centroid.is_zero() {
                return Err(ClassifierError::DegenerateClass(label));
            }
            classes.push(label);
            normalized.push(centroid);
        }
        Ok(Model {
            classes,
            centroids: normalized,
            party_names: BTreeMap::new(),
            temperature: DEFAULT_TEMPERATURE,
            created_from: String::new(),
        })
    }

    pub fn with_temperature(mut self, temperature: f64) -> std::result::Result<Self, ClassifierError> {
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(ClassifierError::InvalidTemperature(temperature));
        }
        self.temperature = temperature;
        Ok(self)
    }

    /// Attach display names for the classes present in `registry`.
    pub fn with_party_names(mut self, registry: &Registry) -> Self {
        self.party_names = self
            .classes
            .iter()
            .filter_map(|id| registry.party_name(*id).map(|n| (*id, n.to_string())))
            .collect();
        self
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn created_from(&self) -> &str {
        &self.created_from
    }

    pub fn feature_dim(&self) -> usize {
        FEATURE_DIM
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn centroid(&self, label: PartyId) -> Option<&FeatureVector> {
        self.classes
            .binary_search(&label)
            .ok()
            .map(|i| &self.centroids[i])
    }

    pub fn party_name(&self, label: PartyId) -> Option<&str> {
        self.party_names.get(&label).map(String::as_str)
    }

    /// Classify a precomputed feature.
    pub fn predict_feature(
        &self,
        feature: &FeatureVector,
        top_k: usize,
    ) -> std::result::Result<Prediction, ClassifierError> {
        if self.is_empty() {
            return Err(ClassifierError::EmptyModel);
        }
        let similarities: Vec<f64> = self.centroids.iter().map(|c| feature.dot(c)).collect();
        let mut order: Vec<usize> = (0..similarities.len()).collect();
        // classes are ascending, so a stable sort keeps the lower id first on ties
        order.sort_by(|&a, &b| similarities[b].total_cmp(&similarities[a]));

        let best = similarities[order[0]];
        let weights: Vec<f64> = similarities
            .iter()
            .map(|s| ((s - best) / self.temperature).exp())
            .collect();
        let total: f64 = weights.iter().sum();
        let probability = |i: usize| (weights[i] / total).clamp(0.0, 1.0);

        let margin = order
            .get(1)
            .map(|&second| (best - similarities[second]).max(0.0))
            .unwrap_or(0.0);
        let top_k = order
            .iter()
            .take(top_k.max(1))
            .map(|&i| Candidate {
                party_id: self.classes[i],
                similarity: similarities[i],
                probability: probability(i),
            })
            .collect();
        Ok(Prediction {
            party_id: self.classes[order[0]],
            confidence: probability(order[0]),
            margin,
            top_k,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = ModelFile {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_VERSION,
            feature_dim: FEATURE_DIM,
            temperature: self.temperature,
            created_from: self.created_from.clone(),
            classes: self
                .classes
                .iter()
                .zip(&self.centroids)
                .map(|(id, c)| ClassEntry {
                    party_id: *id,
                    party_name: self.party_names.get(id).cloned(),
                    centroid: c.values().to_vec(),
                })
                .collect(),
        };
        let mut text = serde_json::to_string_pretty(&file).expect("model serializes");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ModelFile =
            serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e))?;
        Ok(Self::from_file(file)?)
    }

    fn from_file(file: ModelFile) -> std::result::Result<Self, ClassifierError> {
        if file.format != MODEL_FORMAT || file.version != MODEL_VERSION {
            return Err(ClassifierError::UnsupportedModel(format!(
                "{} v{}",
                file.format, file.version
            )));
        }
        if file.feature_dim != FEATURE_DIM {
            return Err(ClassifierError::DimensionMismatch {
                expected: FEATURE_DIM,
                found: file.feature_dim,
            });
        }
        let mut classes = Vec::new();
        let mut centroids = Vec::new();
        let mut party_names = BTreeMap::new();
        let mut entries = file.classes;
        entries.sort_by_key(|e| e.party_id);
        for entry in entries {
            if entry.centroid.len() != FEATURE_DIM {
                return Err(ClassifierError::DimensionMismatch {
                    expected: FEATURE_DIM,
                    found: entry.centroid.len(),
                });
            }
            let norm = entry.centroid.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(ClassifierError::UnsupportedModel(format!(
                    "centroid {} has norm {norm}",
                    entry.party_id
                )));
            }
            if classes.last() == Some(&entry.party_id) {
                return Err(ClassifierError::UnsupportedModel(format!(
                    "duplicate class {}",
                    entry.party_id
                )));
            }
            if let Some(name) = entry.party_name {
                party_names.insert(entry.party_id, name);
            }
            classes.push(entry.party_id);
            centroids.push(FeatureVector::from_unit_values(entry.centroid));
        }
        Model {
            classes,
            centroids,
            party_names,
            temperature: DEFAULT_TEMPERATURE,
            created_from: file.created_from,
        }
        .with_temperature(file.temperature)
    }
}

impl Predictor for Model {
    fn classes(&self) -> &[PartyId] {
        &self.classes
    }

    fn predict(&self, image: &GrayImage) -> std::result::Result<Prediction, ClassifierError> {
        if self.is_empty() {
            return Err(ClassifierError::EmptyModel);
        }
        self.predict_feature(&preprocess(image)?, DEFAULT_TOP_K)
    }
}

/// On-disk layout of a model (pretty-printed JSON).
#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    feature_dim: usize,
    temperature: f64,
    created_from: String,
    classes: Vec<ClassEntry>,
}

#[derive(Serialize, Deserialize)]
struct ClassEntry {
    party_id: PartyId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    party_name: Option<String>,
    centroid: Vec<f64>,
}
