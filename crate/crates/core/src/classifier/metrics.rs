use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ClassifierError, Predictor};
use crate::dataset::LabeledDataset;
use crate::registry::PartyId;

/// Square count matrix, rows = true class, columns = predicted class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<PartyId>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    fn new(labels: Vec<PartyId>) -> Self {
        let n = labels.len();
        ConfusionMatrix {
            labels,
            counts: vec![vec![0; n]; n],
        }
    }

    fn index(&self, label: PartyId) -> Option<usize> {
        self.labels.binary_search(&label).ok()
    }

    pub fn get(&self, truth: PartyId, predicted: PartyId) -> u64 {
        match (self.index(truth), self.index(predicted)) {
            (Some(t), Some(p)) => self.counts[t][p],
            _ => 0,
        }
    }

    pub fn trace(&self) -> u64 {
        (0..self.labels.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sum(&self, truth: PartyId) -> u64 {
        self.index(truth)
            .map(|t| self.counts[t].iter().sum())
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    /// Recall for every class with at least one test item.
    pub per_class_recall: BTreeMap<PartyId, f64>,
    pub confusion: ConfusionMatrix,
}

/// Predict every test item and tabulate accuracy, recall and confusion.
pub fn evaluate<P: Predictor + ?Sized>(
    model: &P,
    test: &LabeledDataset,
) -> Result<Metrics, ClassifierError> {
    if model.classes().is_empty() {
        return Err(ClassifierError::EmptyModel);
    }
    if test.is_empty() {
        return Err(ClassifierError::EmptyTestSet);
    }
    let mut confusion = ConfusionMatrix::new(model.classes().to_vec());
    if let Some(item) = test.items.iter().find(|i| confusion.index(i.label).is_none()) {
        return Err(ClassifierError::UnknownLabel(item.label));
    }
    let predicted = test
        .items
        .par_iter()
        .map(|item| model.predict(&item.image).map(|p| p.party_id))
        .collect::<Result<Vec<_>, _>>()?;
    for (item, label) in test.items.iter().zip(predicted) {
        let t = confusion.index(item.label).expect("checked above");
        let p = confusion
            .index(label)
            .ok_or(ClassifierError::UnknownLabel(label))?;
        confusion.counts[t][p] += 1;
    }
    let per_class_recall = confusion
        .labels
        .iter()
        .enumerate()
        .filter_map(|(i, label)| {
            let row: u64 = confusion.counts[i].iter().sum();
            (row > 0).then(|| (*label, confusion.counts[i][i] as f64 / row as f64))
        })
        .collect();
    Ok(Metrics {
        accuracy: confusion.trace() as f64 / confusion.total() as f64,
        per_class_recall,
        confusion,
    })
}

/// Classes whose recall is strictly below `threshold`, lowest recall first.
pub fn low_recall_classes(
    metrics: &Metrics,
    threshold: f64,
) -> Result<Vec<PartyId>, ClassifierError> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(ClassifierError::InvalidThreshold(threshold));
    }
    let mut low: Vec<(PartyId, f64)> = metrics
        .per_class_recall
        .iter()
        .filter(|(_, &r)| r < threshold)
        .map(|(id, &r)| (*id, r))
        .collect();
    low.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    Ok(low.into_iter().map(|(id, _)| id).collect())
}

/// Metrics plus the derived low-recall list, as written by `vvpat evaluate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub test_items: usize,
    pub accuracy: f64,
    pub recall_threshold: f64,
    pub low_recall_classes: Vec<PartyId>,
    pub per_class_recall: BTreeMap<PartyId, f64>,
    pub confusion: ConfusionMatrix,
}

impl MetricsReport {
    pub fn new(metrics: Metrics, recall_threshold: f64) -> Result<Self, ClassifierError> {
        let low = low_recall_classes(&metrics, recall_threshold)?;
        Ok(MetricsReport {
            test_items: metrics.confusion.total() as usize,
            accuracy: metrics.accuracy,
            recall_threshold,
            low_recall_classes: low,
            per_class_recall: metrics.per_class_recall,
            confusion: metrics.confusion,
        })
    }
}
