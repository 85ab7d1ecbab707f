//! Slip classification.
//!
//! The reference classifier is nearest-centroid over [`FeatureVector`]s with
//! cosine similarity, calibrated into a confidence by a temperature softmax.
//! Anything implementing [`Predictor`] can stand in for it, which is how an
//! externally trained CNN (described by [`ExternalModelSpec`]) plugs into the
//! tally and adjudication stages.

mod features;
mod metrics;
mod model;

use image::GrayImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::registry::PartyId;

pub use features::{preprocess, FeatureVector, FEATURE_DIM, GRID};
pub use metrics::{evaluate, low_recall_classes, ConfusionMatrix, Metrics, MetricsReport};
pub use model::{fit, Model, DEFAULT_TEMPERATURE, DEFAULT_TOP_K};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClassifierError {
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("model has no classes")]
    EmptyModel,
    #[error("test label {0} is not a model class")]
    UnknownLabel(PartyId),
    #[error("every training image of class {0} is uniform; its centroid is undefined")]
    DegenerateClass(PartyId),
    #[error("feature dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),
    #[error("test set is empty")]
    EmptyTestSet,
    #[error("unsupported model file: {0}")]
    UnsupportedModel(String),
    #[error("recall threshold {0} outside [0, 1]")]
    InvalidThreshold(f64),
}

/// One ranked candidate for a slip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub party_id: PartyId,
    pub similarity: f64,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub party_id: PartyId,
    /// Top softmax probability, in [0, 1].
    pub confidence: f64,
    /// Top-1 minus top-2 similarity; 0 for a single-class model.
    pub margin: f64,
    /// Best candidates, most similar first.
    pub top_k: Vec<Candidate>,
}

/// Anything that can label a slip image.
pub trait Predictor: Send + Sync {
    /// Class labels in ascending order.
    fn classes(&self) -> &[PartyId];

    fn predict(&self, image: &GrayImage) -> Result<Prediction, ClassifierError>;
}

/// Description of an externally trained transfer-learning model. It is
/// carried as metadata so a deployment can record which network produced
/// its predictions; nothing here is executed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalModelSpec {
    pub backbone_name: String,
    pub batch_size: u32,
    pub epochs: u32,
    pub train_fraction: f64,
    pub activation: String,
    pub weights_path: String,
}

impl ExternalModelSpec {
    pub fn mobilenet_v2(weights_path: impl Into<String>) -> Self {
        Self::with_backbone("MobileNetV2", weights_path)
    }

    pub fn resnet50(weights_path: impl Into<String>) -> Self {
        Self::with_backbone("ResNet50", weights_path)
    }

    fn with_backbone(name: &str, weights_path: impl Into<String>) -> Self {
        ExternalModelSpec {
            backbone_name: name.to_string(),
            batch_size: 32,
            epochs: 15,
            train_fraction: 0.8,
            activation: "relu".to_string(),
            weights_path: weights_path.into(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn external_spec_carries_training_constants() {
        let spec = ExternalModelSpec::resnet50("weights/resnet50.hdf5");
        assert_eq!((spec.batch_size, spec.epochs), (32, 15));
        assert_eq!(spec.train_fraction, 0.8);
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<ExternalModelSpec>(&json).unwrap(), spec);
    }
}
