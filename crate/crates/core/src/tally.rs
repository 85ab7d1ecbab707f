//! Per-EVM slip counting, human adjudication, reconciliation against EVM
//! totals, and timestamp checks.
//!
//! The conservation law `Σauto + Σadjudicated + rejected + |queue| = total`
//! holds after every operation; [`TallySheet::check_conservation`] verifies
//! it and every mutating method leaves the sheet untouched on error.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::classifier::{ClassifierError, Prediction, Predictor};
use crate::error::{Error, Result};
use crate::raster;
use crate::registry::PartyId;

/// Maximum voters, and therefore slips, per EVM.
pub const MAX_SLIPS_PER_EVM: usize = 1500;

pub const DEFAULT_CONFIDENCE_THRESHOLD: f64 = 0.80;

/// Legal votes per window before a window is anomalous.
pub const DEFAULT_RATE_LIMIT: usize = 8;

pub const DEFAULT_RATE_WINDOW_SECS: i64 = 60;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TallyError {
    #[error("batch of {0} slips exceeds the {MAX_SLIPS_PER_EVM}-slip EVM capacity")]
    BatchTooLarge(usize),
    #[error("batch mixes EVMs {0:?} and {1:?}")]
    MixedEvm(String, String),
    #[error("model has no classes")]
    EmptyModel,
    #[error("confidence threshold {0} outside [0, 1]")]
    InvalidThreshold(f64),
    #[error("slip {0:?} is not in the review queue")]
    UnknownSlip(String),
    #[error("slip {0:?} has already been adjudicated")]
    AlreadyAdjudicated(String),
    #[error("{0} slips still await adjudication")]
    UnresolvedQueue(usize),
    #[error("timestamps are not sorted at position {0}")]
    UnsortedInput(usize),
    #[error("slip {0:?} has no timestamp")]
    MissingTimestamp(String),
    #[error("invalid slip batch: {0}")]
    InvalidBatch(String),
    #[error("conservation violated: {0}")]
    ConservationViolated(String),
}

/// A human decision on a queued slip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Decision {
    Party(PartyId),
    Rejected,
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Decision::Party(id) => id.fmt(f),
            Decision::Rejected => f.write_str("REJECTED"),
        }
    }
}

impl std::str::FromStr for Decision {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("REJECTED") {
            Ok(Decision::Rejected)
        } else {
            s.parse().map(Decision::Party)
        }
    }
}

impl Serialize for Decision {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Decision {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(deserializer)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

/// One captured slip, as listed in a batch manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlipRecord {
    pub slip_id: String,
    pub evm_id: String,
    pub image_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<DateTime<Utc>>,
    pub sequence_no: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueuedSlip {
    pub slip_id: String,
    pub prediction: Prediction,
}

/// Running counts for one EVM's slips.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TallySheet {
    pub evm_id: String,
    pub total_slips: u64,
    pub confidence_threshold: f64,
    pub auto_counts: BTreeMap<PartyId, u64>,
    pub adjudicated_counts: BTreeMap<PartyId, u64>,
    pub rejected: u64,
    /// Slips awaiting a human, least confident first.
    pub review_queue: Vec<QueuedSlip>,
    /// Every decision taken so far, by slip id.
    pub decisions: BTreeMap<String, Decision>,
}

impl TallySheet {
    pub fn empty(evm_id: impl Into<String>, confidence_threshold: f64) -> Self {
        TallySheet {
            evm_id: evm_id.into(),
            total_slips: 0,
            confidence_threshold,
            auto_counts: BTreeMap::new(),
            adjudicated_counts: BTreeMap::new(),
            rejected: 0,
            review_queue: Vec::new(),
            decisions: BTreeMap::new(),
        }
    }

    /// Counted slips per party: automatic plus adjudicated.
    pub fn vvpat_counts(&self) -> BTreeMap<PartyId, u64> {
        let mut counts = self.auto_counts.clone();
        for (party, n) in &self.adjudicated_counts {
            *counts.entry(*party).or_insert(0) += n;
        }
        counts
    }

    pub fn check_conservation(&self) -> std::result::Result<(), TallyError> {
        let auto: u64 = self.auto_counts.values().sum();
        let adjudicated: u64 = self.adjudicated_counts.values().sum();
        let accounted = auto + adjudicated + self.rejected + self.review_queue.len() as u64;
        if accounted != self.total_slips {
            return Err(TallyError::ConservationViolated(format!(
                "{auto} auto + {adjudicated} adjudicated + {} rejected + {} queued != {} slips",
                self.rejected,
                self.review_queue.len(),
                self.total_slips
            )));
        }
        Ok(())
    }

    /// Resolve one queued slip.
    pub fn apply_adjudication(
        &mut self,
        slip_id: &str,
        decision: Decision,
    ) -> std::result::Result<(), TallyError> {
        if self.decisions.contains_key(slip_id) {
            return Err(TallyError::AlreadyAdjudicated(slip_id.to_string()));
        }
        let pos = self
            .review_queue
            .iter()
            .position(|q| q.slip_id == slip_id)
            .ok_or_else(|| TallyError::UnknownSlip(slip_id.to_string()))?;
        self.review_queue.remove(pos);
        match decision {
            Decision::Party(party) => *self.adjudicated_counts.entry(party).or_insert(0) += 1,
            Decision::Rejected => self.rejected += 1,
        }
        self.decisions.insert(slip_id.to_string(), decision);
        Ok(())
    }

    /// Compare against the EVM's own counts. Every queued slip must have
    /// been resolved first.
    pub fn reconcile(
        &self,
        evm_counts: &BTreeMap<PartyId, u64>,
    ) -> std::result::Result<ReconciliationResult, TallyError> {
        if !self.review_queue.is_empty() {
            return Err(TallyError::UnresolvedQueue(self.review_queue.len()));
        }
        Ok(reconcile_counts(
            &self.evm_id,
            evm_counts,
            &self.vvpat_counts(),
            self.rejected,
        ))
    }
}

/// Label every slip and split the batch between automatic counts and the
/// review queue. Images are read from each slip's `image_path`, resolved
/// against `image_root`.
pub fn count_slips<P: Predictor + ?Sized>(
    model: &P,
    slips: &[SlipRecord],
    threshold: f64,
    image_root: &Path,
) -> Result<TallySheet> {
    let evm_id = validate_batch(model, slips, threshold)?;
    let predictions = slips
        .par_iter()
        .map(|slip| {
            let image = raster::load_gray(&image_root.join(&slip.image_path))?;
            model
                .predict(&image)
                .map_err(classifier_to_tally)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(tally_predictions(
        evm_id,
        slips.iter().map(|s| s.slip_id.clone()).zip(predictions),
        threshold,
    ))
}

/// Like [`count_slips`] but with images already in memory.
pub fn count_slip_images<P: Predictor + ?Sized>(
    model: &P,
    slips: &[(SlipRecord, image::GrayImage)],
    threshold: f64,
) -> Result<TallySheet> {
    let records: Vec<SlipRecord> = slips.iter().map(|(s, _)| s.clone()).collect();
    let evm_id = validate_batch(model, &records, threshold)?;
    let predictions = slips
        .par_iter()
        .map(|(_, image)| model.predict(image).map_err(classifier_to_tally))
        .collect::<Result<Vec<_>>>()?;
    Ok(tally_predictions(
        evm_id,
        records.into_iter().map(|s| s.slip_id).zip(predictions),
        threshold,
    ))
}

fn classifier_to_tally(e: ClassifierError) -> crate::Error {
    match e {
        ClassifierError::EmptyModel => TallyError::EmptyModel.into(),
        other => other.into(),
    }
}

fn validate_batch<P: Predictor + ?Sized>(
    model: &P,
    slips: &[SlipRecord],
    threshold: f64,
) -> std::result::Result<String, TallyError> {
    if slips.len() > MAX_SLIPS_PER_EVM {
        return Err(TallyError::BatchTooLarge(slips.len()));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(TallyError::InvalidThreshold(threshold));
    }
    if model.classes().is_empty() {
        return Err(TallyError::EmptyModel);
    }
    let evm_id = slips.first().map(|s| s.evm_id.clone()).unwrap_or_default();
    if let Some(other) = slips.iter().find(|s| s.evm_id != evm_id) {
        return Err(TallyError::MixedEvm(evm_id, other.evm_id.clone()));
    }
    validate_slips(slips)?;
    Ok(evm_id)
}

/// Manifest-level checks: unique slip ids, sequence numbers ≥ 1, and
/// timestamps non-decreasing in sequence order.
pub fn validate_slips(slips: &[SlipRecord]) -> std::result::Result<(), TallyError> {
    let mut seen = BTreeSet::new();
    for s in slips {
        if !seen.insert((&s.evm_id, &s.slip_id)) {
            return Err(TallyError::InvalidBatch(format!(
                "duplicate slip id {:?} on EVM {:?}",
                s.slip_id, s.evm_id
            )));
        }
        if s.sequence_no == 0 {
            return Err(TallyError::InvalidBatch(format!(
                "slip {:?} has sequence_no 0",
                s.slip_id
            )));
        }
    }
    let mut ordered: Vec<&SlipRecord> = slips.iter().collect();
    ordered.sort_by_key(|s| s.sequence_no);
    let stamped: Vec<&SlipRecord> = ordered.into_iter().filter(|s| s.timestamp.is_some()).collect();
    if let Some(w) = stamped.windows(2).find(|w| w[1].timestamp < w[0].timestamp) {
        return Err(TallyError::InvalidBatch(format!(
            "slip {:?} is stamped earlier than slip {:?} despite a later sequence number",
            w[1].slip_id, w[0].slip_id
        )));
    }
    Ok(())
}

/// Build a tally from predictions. Confidence at or above `threshold`
/// counts automatically; anything below joins the review queue.
pub fn tally_predictions(
    evm_id: String,
    predictions: impl IntoIterator<Item = (String, Prediction)>,
    threshold: f64,
) -> TallySheet {
    let mut sheet = TallySheet::empty(evm_id, threshold);
    for (slip_id, prediction) in predictions {
        sheet.total_slips += 1;
        if prediction.confidence >= threshold {
            *sheet.auto_counts.entry(prediction.party_id).or_insert(0) += 1;
        } else {
            sheet.review_queue.push(QueuedSlip {
                slip_id,
                prediction,
            });
        }
    }
    // stable: equal confidences keep batch order
    sheet
        .review_queue
        .sort_by(|a, b| a.prediction.confidence.total_cmp(&b.prediction.confidence));
    sheet
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ReconciliationStatus {
    Match,
    Mismatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconciliationResult {
    pub evm_id: String,
    pub status: ReconciliationStatus,
    pub evm_counts: BTreeMap<PartyId, u64>,
    pub vvpat_counts: BTreeMap<PartyId, u64>,
    /// `vvpat − evm` for every party present on either side.
    pub deltas: BTreeMap<PartyId, i64>,
    /// The counts that stand. On a mismatch the paper trail prevails.
    pub final_counts: BTreeMap<PartyId, u64>,
    /// Slips rejected during adjudication; excluded from `vvpat_counts`.
    pub rejected: u64,
}

/// Reconcile EVM and VVPAT counts. Parties missing on one side count as 0.
pub fn reconcile_counts(
    evm_id: &str,
    evm_counts: &BTreeMap<PartyId, u64>,
    vvpat_counts: &BTreeMap<PartyId, u64>,
    rejected: u64,
) -> ReconciliationResult {
    let parties: BTreeSet<PartyId> = evm_counts.keys().chain(vvpat_counts.keys()).copied().collect();
    let deltas: BTreeMap<PartyId, i64> = parties
        .into_iter()
        .map(|p| {
            let vvpat = vvpat_counts.get(&p).copied().unwrap_or(0) as i64;
            let evm = evm_counts.get(&p).copied().unwrap_or(0) as i64;
            (p, vvpat - evm)
        })
        .collect();
    let status = if deltas.values().all(|&d| d == 0) {
        ReconciliationStatus::Match
    } else {
        ReconciliationStatus::Mismatch
    };
    ReconciliationResult {
        evm_id: evm_id.to_string(),
        status,
        evm_counts: evm_counts.clone(),
        vvpat_counts: vvpat_counts.clone(),
        deltas,
        final_counts: vvpat_counts.clone(),
        rejected,
    }
}

/// A stretch of time in which more slips were cast than the rate limit
/// allows. `window_end` is exclusive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnomalyWindow {
    pub window_start: DateTime<Utc>,
    pub window_end: DateTime<Utc>,
    pub slip_count: usize,
}

/// Find every window `[tᵢ, tᵢ + window)` anchored at a slip time that holds
/// more than `limit` slips. Overlapping violating windows are merged into a
/// single maximal window whose count covers the merged span.
pub fn detect_rate_anomalies(
    timestamps: &[DateTime<Utc>],
    limit: usize,
    window: Duration,
) -> std::result::Result<Vec<AnomalyWindow>, TallyError> {
    if let Some(i) = timestamps.windows(2).position(|w| w[1] < w[0]) {
        return Err(TallyError::UnsortedInput(i + 1));
    }
    let n = timestamps.len();
    // merged [start, end) spans; end is the last violating anchor + window
    let mut merged: Vec<(DateTime<Utc>, DateTime<Utc>)> = Vec::new();
    let mut hi = 0; // first index with t >= anchor + window
    let mut i = 0;
    while i < n {
        let anchor = timestamps[i];
        while hi < n && timestamps[hi] < anchor + window {
            hi += 1;
        }
        if hi - i > limit {
            match merged.last_mut() {
                Some(last) if anchor < last.1 => last.1 = anchor + window,
                _ => merged.push((anchor, anchor + window)),
            }
        }
        // slips sharing a timestamp share a window
        while i < n && timestamps[i] == anchor {
            i += 1;
        }
    }
    Ok(merged
        .into_iter()
        .map(|(window_start, window_end)| AnomalyWindow {
            window_start,
            window_end,
            slip_count: timestamps
                .iter()
                .filter(|t| **t >= window_start && **t < window_end)
                .count(),
        })
        .collect())
}

/// Split slips into mock-poll slips (stamped before `poll_open`) and valid
/// ones. Order within each half follows the input.
pub fn separate_mock_polls(
    slips: &[SlipRecord],
    poll_open: DateTime<Utc>,
) -> std::result::Result<(Vec<SlipRecord>, Vec<SlipRecord>), TallyError> {
    let mut mock = Vec::new();
    let mut valid = Vec::new();
    for slip in slips {
        let ts = slip
            .timestamp
            .ok_or_else(|| TallyError::MissingTimestamp(slip.slip_id.clone()))?;
        if ts < poll_open {
            mock.push(slip.clone());
        } else {
            valid.push(slip.clone());
        }
    }
    Ok((mock, valid))
}

/// Timestamps of a batch in sequence order, skipping unstamped slips.
pub fn batch_timestamps(slips: &[SlipRecord]) -> Vec<DateTime<Utc>> {
    let mut ordered: Vec<&SlipRecord> = slips.iter().collect();
    ordered.sort_by_key(|s| s.sequence_no);
    ordered.into_iter().filter_map(|s| s.timestamp).collect()
}

/// Read a newline-delimited slip manifest.
pub fn read_slip_manifest(path: &Path) -> Result<Vec<SlipRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut slips = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        slips.push(serde_json::from_str(&line).map_err(|e| Error::parse(path, n + 1, e))?);
    }
    Ok(slips)
}

pub fn write_slip_manifest(path: &Path, slips: &[SlipRecord]) -> Result<()> {
    let mut text = String::new();
    for s in slips {
        text.push_str(&serde_json::to_string(s).expect("slip serializes"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Directory against which a manifest's relative image paths resolve.
pub fn manifest_root(manifest: &Path) -> PathBuf {
    manifest
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}
