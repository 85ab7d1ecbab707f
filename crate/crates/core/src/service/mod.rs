//! Adjudication service.
//!
//! Holds the tallies of every loaded EVM batch and hands low-confidence
//! slips out to human reviewers as leased tasks. Every state change is
//! written to an append-only [`Journal`] before it takes effect, and
//! [`Service::open`] rebuilds the exact state by replaying that journal, so
//! the process can be killed at any point without losing an acknowledged
//! decision.
//!
//! [`http`] exposes the service over a JSON API.

pub mod http;
mod state;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::classifier::Predictor;
use crate::error::{Error, Result};
use crate::journal::{self, Journal};
use crate::registry::PartyId;
use crate::tally::{
    self, AnomalyWindow, Decision, ReconciliationResult, TallyError, DEFAULT_CONFIDENCE_THRESHOLD,
};

pub use state::{EvmSession, Event, ReviewTask, ServiceState, TaskState};

/// How long a claimed task stays with its reviewer before it is offered again.
pub const DEFAULT_LEASE_SECS: i64 = 120;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("a batch with manifest digest {0} is already loaded")]
    DuplicateBatch(String),
    #[error("EVM {0:?} already has a loaded batch")]
    EvmBusy(String),
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("task {0:?} is not available to claim")]
    NotClaimable(String),
    #[error("task {task_id:?} is not claimed by {worker:?}")]
    NotClaimant { task_id: String, worker: String },
    #[error("task {0:?} is already decided")]
    AlreadyDecided(String),
    #[error("unknown EVM {0:?}")]
    UnknownEvm(String),
    #[error("unknown slip {0:?}")]
    UnknownSlip(String),
    #[error("party {0} is not a model class")]
    UnknownParty(PartyId),
    #[error("no classifier model is loaded")]
    ModelNotLoaded,
    #[error("no EVM counts uploaded for {0:?}")]
    NoEvmCounts(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("corrupt journal: {0}")]
    CorruptJournal(String),
    #[error(transparent)]
    Tally(#[from] TallyError),
}

/// Source of the current time; swapped for a manual clock in tests.
pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// A clock that only moves when told to.
#[derive(Debug)]
pub struct ManualClock(Mutex<DateTime<Utc>>);

impl ManualClock {
    pub fn new(start: DateTime<Utc>) -> Self {
        ManualClock(Mutex::new(start))
    }

    pub fn advance(&self, by: Duration) {
        *self.0.lock().expect("clock lock") += by;
    }
}

impl Clock for ManualClock {
    fn now(&self) -> DateTime<Utc> {
        *self.0.lock().expect("clock lock")
    }
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub journal_path: PathBuf,
    /// Default confidence threshold for batches that do not name one.
    pub confidence_threshold: f64,
    pub lease: Duration,
    /// fsync every journal append. Only tests turn this off.
    pub sync_journal: bool,
}

impl ServiceConfig {
    pub fn new(journal_path: impl Into<PathBuf>) -> Self {
        ServiceConfig {
            journal_path: journal_path.into(),
            confidence_threshold: DEFAULT_CONFIDENCE_THRESHOLD,
            lease: Duration::seconds(DEFAULT_LEASE_SECS),
            sync_journal: true,
        }
    }
}

/// Result of loading one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub evm_id: String,
    pub manifest_digest: String,
    pub total_slips: u64,
    pub auto_counted: u64,
    pub queued: usize,
    pub task_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionReceipt {
    pub task_id: String,
    pub slip_id: String,
    pub evm_id: String,
    pub decision: Decision,
    /// Slips of this EVM still awaiting review.
    pub remaining: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvmTally {
    pub total_slips: u64,
    pub confidence_threshold: f64,
    pub auto_counts: BTreeMap<PartyId, u64>,
    pub adjudicated_counts: BTreeMap<PartyId, u64>,
    pub vvpat_counts: BTreeMap<PartyId, u64>,
    pub rejected: u64,
    pub pending_review: usize,
}

/// Per-EVM view returned by the read endpoints: `{"evms": {...}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvmMap<T> {
    pub evms: BTreeMap<String, T>,
}

#[derive(Debug)]
struct Inner {
    state: ServiceState,
    journal: Journal<Event>,
}

pub struct Service {
    inner: Mutex<Inner>,
    model: Option<Arc<dyn Predictor>>,
    clock: Arc<dyn Clock>,
    config: ServiceConfig,
}

impl std::fmt::Debug for Service {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Service")
            .field("config", &self.config)
            .field("model_loaded", &self.model.is_some())
            .finish_non_exhaustive()
    }
}

/// Rebuild service state from a journal without opening it for writing.
pub fn replay(path: &Path) -> Result<ServiceState> {
    replay_entries(journal::read_entries(path)?)
}

fn replay_entries(entries: Vec<journal::JournalEntry<Event>>) -> Result<ServiceState> {
    let mut state = ServiceState::default();
    for entry in entries {
        let seq = entry.seq;
        state.apply(seq, entry.event).map_err(|e| {
            ServiceError::CorruptJournal(format!("entry {seq} does not apply: {e}"))
        })?;
    }
    Ok(state)
}

impl Service {
    /// Open the journal (creating it if needed) and replay it. `model` is
    /// needed only to load new batches; decisions and reconciliation work
    /// without it.
    pub fn open(
        config: ServiceConfig,
        model: Option<Arc<dyn Predictor>>,
        clock: Arc<dyn Clock>,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&config.confidence_threshold) {
            return Err(TallyError::InvalidThreshold(config.confidence_threshold).into());
        }
        let (journal, entries) = Journal::open(&config.journal_path)?;
        let journal = if config.sync_journal {
            journal
        } else {
            journal.without_sync()
        };
        let replayed = entries.len();
        let state = replay_entries(entries)?;
        tracing::info!(
            journal = %config.journal_path.display(),
            entries = replayed,
            evms = state.evms.len(),
            "service state restored"
        );
        Ok(Service {
            inner: Mutex::new(Inner { state, journal }),
            model,
            clock,
            config,
        })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        // A panic mid-update cannot leave state half-applied (events are
        // validated first), so a poisoned lock is still usable.
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Validate, journal, then apply. Nothing changes if the journal write
    /// fails.
    fn commit(inner: &mut Inner, now: DateTime<Utc>, event: Event) -> Result<()> {
        inner.state.validate(&event, now)?;
        let entry = inner.journal.append(now, event)?;
        inner.state.apply(entry.seq, entry.event)?;
        Ok(())
    }

    /// Classify the batch described by a slip manifest and queue its
    /// low-confidence slips for review.
    pub fn load_batch(&self, manifest_path: &Path, threshold: Option<f64>) -> Result<BatchSummary> {
        let model = self.model.as_ref().ok_or(ServiceError::ModelNotLoaded)?;
        let threshold = threshold.unwrap_or(self.config.confidence_threshold);
        let bytes = fs::read(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let digest = hex::encode(Sha256::digest(&bytes));
        if self.lock().state.manifest_digests.contains(&digest) {
            return Err(ServiceError::DuplicateBatch(digest).into());
        }
        let slips = tally::read_slip_manifest(manifest_path)?;
        if slips.is_empty() {
            return Err(ServiceError::InvalidRequest("batch manifest lists no slips".into()).into());
        }
        let image_root = tally::manifest_root(manifest_path);
        // classification is the slow part; keep it outside the lock
        let sheet = tally::count_slips(model.as_ref(), &slips, threshold, &image_root)?;
        let evm_id = sheet.evm_id.clone();
        let total_slips = sheet.total_slips;
        let auto_counted = sheet.auto_counts.values().sum();
        let queued = sheet.review_queue.len();

        let mut inner = self.lock();
        let first_task = inner.state.next_task + 1;
        Self::commit(
            &mut inner,
            self.clock.now(),
            Event::BatchLoaded {
                manifest_path: manifest_path.display().to_string(),
                manifest_digest: digest.clone(),
                image_root: image_root.display().to_string(),
                slips,
                tally: sheet,
            },
        )?;
        let task_ids = (first_task..first_task + queued as u64)
            .map(|n| format!("T{n:06}"))
            .collect();
        tracing::info!(evm = %evm_id, total_slips, queued, "batch loaded");
        Ok(BatchSummary {
            evm_id,
            manifest_digest: digest,
            total_slips,
            auto_counted,
            queued,
            task_ids,
        })
    }

    /// Lease the least confident pending task to `worker`. A worker that
    /// already holds a live lease gets that task back. `None` when nothing
    /// is waiting.
    pub fn claim_next_task(&self, worker: &str) -> Result<Option<ReviewTask>> {
        if worker.trim().is_empty() {
            return Err(ServiceError::InvalidRequest("worker id is empty".into()).into());
        }
        let now = self.clock.now();
        let mut inner = self.lock();
        if let Some(task) = inner.state.held_by(worker, now) {
            return Ok(Some(task.clone()));
        }
        let Some(task_id) = inner.state.next_claimable(now).map(|t| t.task_id.clone()) else {
            return Ok(None);
        };
        Self::commit(
            &mut inner,
            now,
            Event::TaskClaimed {
                task_id: task_id.clone(),
                worker: worker.to_string(),
                lease_expires: now + self.config.lease,
            },
        )?;
        Ok(Some(inner.state.task(&task_id)?.clone()))
    }

    /// Record a reviewer's decision on a task they hold.
    pub fn submit_decision(
        &self,
        task_id: &str,
        worker: &str,
        decision: Decision,
    ) -> Result<DecisionReceipt> {
        if let (Decision::Party(party), Some(model)) = (decision, &self.model) {
            if model.classes().binary_search(&party).is_err() {
                return Err(ServiceError::UnknownParty(party).into());
            }
        }
        let now = self.clock.now();
        let mut inner = self.lock();
        {
            // an expired lease no longer entitles the worker to decide
            let task = inner.state.task(task_id)?;
            if task.state == TaskState::Claimed && task.state_at(now) == TaskState::Pending {
                return Err(ServiceError::NotClaimant {
                    task_id: task_id.to_string(),
                    worker: worker.to_string(),
                }
                .into());
            }
        }
        Self::commit(
            &mut inner,
            now,
            Event::Decision {
                task_id: task_id.to_string(),
                worker: worker.to_string(),
                decision,
            },
        )?;
        let task = inner.state.task(task_id)?;
        let remaining = inner.state.session(&task.evm_id)?.tally.review_queue.len();
        Ok(DecisionReceipt {
            task_id: task.task_id.clone(),
            slip_id: task.slip_id.clone(),
            evm_id: task.evm_id.clone(),
            decision,
            remaining,
        })
    }

    /// Store the EVM's electronic counts for later reconciliation.
    pub fn upload_evm_counts(&self, evm_id: &str, counts: BTreeMap<PartyId, u64>) -> Result<()> {
        let mut inner = self.lock();
        Self::commit(
            &mut inner,
            self.clock.now(),
            Event::EvmCountsUploaded {
                evm_id: evm_id.to_string(),
                counts,
            },
        )
    }

    /// Reconcile one EVM, or every loaded EVM when `evm_id` is `None`. Each
    /// EVM needs uploaded counts and an empty review queue. Nothing is
    /// recorded unless every requested EVM can be reconciled.
    pub fn reconcile(&self, evm_id: Option<&str>) -> Result<Vec<ReconciliationResult>> {
        let now = self.clock.now();
        let mut inner = self.lock();
        let targets: Vec<String> = match evm_id {
            Some(id) => vec![inner.state.session(id)?.tally.evm_id.clone()],
            None => inner.state.evms.keys().cloned().collect(),
        };
        let mut results = Vec::with_capacity(targets.len());
        for id in &targets {
            let session = inner.state.session(id)?;
            let counts = session
                .evm_counts
                .as_ref()
                .ok_or_else(|| ServiceError::NoEvmCounts(id.clone()))?;
            results.push(session.tally.reconcile(counts).map_err(ServiceError::Tally)?);
        }
        for result in &results {
            Self::commit(
                &mut inner,
                now,
                Event::Reconciled {
                    evm_id: result.evm_id.clone(),
                    result: result.clone(),
                },
            )?;
        }
        Ok(results)
    }

    pub fn tally(&self) -> EvmMap<EvmTally> {
        let inner = self.lock();
        let evms = inner
            .state
            .evms
            .iter()
            .map(|(id, s)| {
                let t = &s.tally;
                let view = EvmTally {
                    total_slips: t.total_slips,
                    confidence_threshold: t.confidence_threshold,
                    auto_counts: t.auto_counts.clone(),
                    adjudicated_counts: t.adjudicated_counts.clone(),
                    vvpat_counts: t.vvpat_counts(),
                    rejected: t.rejected,
                    pending_review: t.review_queue.len(),
                };
                (id.clone(), view)
            })
            .collect();
        EvmMap { evms }
    }

    /// Latest reconciliation per EVM; `null` where none is current.
    pub fn reconciliation(&self) -> EvmMap<Option<ReconciliationResult>> {
        let inner = self.lock();
        let evms = inner
            .state
            .evms
            .iter()
            .map(|(id, s)| (id.clone(), s.reconciliation.clone()))
            .collect();
        EvmMap { evms }
    }

    /// Rate anomalies per EVM, from the slip timestamps in sequence order.
    pub fn anomalies(&self, limit: usize, window: Duration) -> Result<EvmMap<Vec<AnomalyWindow>>> {
        let inner = self.lock();
        let mut evms = BTreeMap::new();
        for (id, s) in &inner.state.evms {
            let stamps = tally::batch_timestamps(&s.slips);
            evms.insert(id.clone(), tally::detect_rate_anomalies(&stamps, limit, window)?);
        }
        Ok(EvmMap { evms })
    }

    /// Every review task as seen now.
    pub fn tasks(&self) -> Vec<ReviewTask> {
        let now = self.clock.now();
        self.lock().state.tasks.values().map(|t| t.view_at(now)).collect()
    }

    /// Filesystem path of a slip image. Slip ids are unique per EVM; when
    /// `evm_id` is omitted the first EVM (by id) holding the slip wins.
    pub fn slip_image_path(&self, slip_id: &str, evm_id: Option<&str>) -> Result<PathBuf> {
        let inner = self.lock();
        inner
            .state
            .evms
            .values()
            .filter(|s| evm_id.is_none_or(|e| s.tally.evm_id == e))
            .find_map(|s| {
                s.slips
                    .iter()
                    .find(|slip| slip.slip_id == slip_id)
                    .map(|slip| Path::new(&s.image_root).join(&slip.image_path))
            })
            .ok_or_else(|| ServiceError::UnknownSlip(slip_id.to_string()).into())
    }

    /// A copy of the full state, for comparison after replay.
    pub fn snapshot(&self) -> ServiceState {
        self.lock().state.clone()
    }
}
