//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use chrono::{DateTime, Duration, TimeZone, Utc};
use vvpat::augment::AugmentationSpec;
use vvpat::classifier::{fit, Model};
use vvpat::dataset::{build_labeled_dataset, split_dataset, LabeledDataset};
use vvpat::fixtures::{simulated_poll, synthetic_registry, write_slip_batch, SYMBOL_COUNT};
use vvpat::registry::Registry;
use vvpat::PartyId;

pub struct Trained {
    pub registry: Registry,
    pub dataset: LabeledDataset,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub model: Arc<Model>,
}

/// The 49-party pipeline with the canonical seed 42, built once per test
/// binary.
pub fn trained() -> &'static Trained {
    static TRAINED: OnceLock<Trained> = OnceLock::new();
    TRAINED.get_or_init(|| {
        let registry = synthetic_registry(SYMBOL_COUNT);
        let dataset = build_labeled_dataset(&registry, &AugmentationSpec::canonical(42)).unwrap();
        let (train, test) = split_dataset(&dataset, 0.8, 42).unwrap();
        let model = Arc::new(fit(&train).unwrap().with_party_names(&registry));
        Trained { registry, dataset, train, test, model }
    })
}

pub fn poll_open() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2024, 4, 19, 7, 0, 0).unwrap()
}

/// A written slip batch and the true party of each slip (`None` for
/// double-struck slips), in slip order.
pub struct Batch {
    pub manifest: PathBuf,
    pub truth: Vec<Option<PartyId>>,
}

impl Batch {
    pub fn slip_id(evm_id: &str, index: usize) -> String {
        format!("{evm_id}-S{:04}", index + 1)
    }

    pub fn truth_of(&self, slip_id: &str) -> Option<PartyId> {
        let n: usize = slip_id.rsplit("-S").next().unwrap().parse().unwrap();
        self.truth[n - 1]
    }
}

/// Write a poll over the first parties of the 49-party registry.
pub fn write_batch(dir: &Path, evm_id: &str, votes: &[usize], ambiguous: usize, seed: u64) -> Batch {
    let (images, truth) = simulated_poll(&trained().registry, votes, ambiguous, seed);
    let manifest = write_slip_batch(dir, evm_id, &images, poll_open(), Duration::seconds(30)).unwrap();
    Batch { manifest, truth }
}
