use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::ServiceError;
use crate::classifier::Prediction;
use crate::registry::PartyId;
use crate::tally::{Decision, ReconciliationResult, SlipRecord, TallySheet};

/// Every state change the service makes. The journal stores these; replaying
/// them through [`ServiceState::apply`] rebuilds the service exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Event {
    BatchLoaded {
        manifest_path: String,
        manifest_digest: String,
        image_root: String,
        slips: Vec<SlipRecord>,
        tally: TallySheet,
    },
    TaskClaimed {
        task_id: String,
        worker: String,
        lease_expires: DateTime<Utc>,
    },
    Decision {
        task_id: String,
        worker: String,
        decision: Decision,
    },
    EvmCountsUploaded {
        evm_id: String,
        counts: BTreeMap<PartyId, u64>,
    },
    Reconciled {
        evm_id: String,
        result: ReconciliationResult,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TaskState {
    Pending,
    Claimed,
    Decided,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewTask {
    pub task_id: String,
    pub slip_id: String,
    pub evm_id: String,
    /// Server path of the slip image, for `GET /api/slips/{slip_id}/image`.
    pub image_ref: String,
    pub prediction: Prediction,
    pub state: TaskState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub claimant: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lease_expires: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision: Option<Decision>,
}

impl ReviewTask {
    /// State as seen at `now`: an expired claim reads as pending.
    pub fn state_at(&self, now: DateTime<Utc>) -> TaskState {
        match (self.state, self.lease_expires) {
            (TaskState::Claimed, Some(expiry)) if expiry <= now => TaskState::Pending,
            (state, _) => state,
        }
    }

    pub fn view_at(&self, now: DateTime<Utc>) -> ReviewTask {
        let mut view = self.clone();
        if view.state_at(now) == TaskState::Pending {
            view.state = TaskState::Pending;
            view.claimant = None;
            view.lease_expires = None;
        }
        view
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvmSession {
    pub manifest_path: String,
    pub manifest_digest: String,
    pub image_root: String,
    pub slips: Vec<SlipRecord>,
    pub tally: TallySheet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evm_counts: Option<BTreeMap<PartyId, u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reconciliation: Option<ReconciliationResult>,
}

/// Complete in-memory service state.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ServiceState {
    pub evms: BTreeMap<String, EvmSession>,
    pub tasks: BTreeMap<String, ReviewTask>,
    pub manifest_digests: BTreeSet<String>,
    pub next_task: u64,
    /// Sequence number of the last applied journal entry.
    pub last_seq: u64,
}

impl ServiceState {
    /// Check that `event` may be applied to the current state.
    pub fn validate(&self, event: &Event, now: DateTime<Utc>) -> Result<(), ServiceError> {
        match event {
            Event::BatchLoaded {
                manifest_digest,
                tally,
                ..
            } => {
                if self.manifest_digests.contains(manifest_digest) {
                    return Err(ServiceError::DuplicateBatch(manifest_digest.clone()));
                }
                if self.evms.contains_key(&tally.evm_id) {
                    return Err(ServiceError::EvmBusy(tally.evm_id.clone()));
                }
            }
            Event::TaskClaimed { task_id, .. } => {
                let task = self.task(task_id)?;
                if task.state_at(now) != TaskState::Pending {
                    return Err(ServiceError::NotClaimable(task_id.clone()));
                }
            }
            Event::Decision {
                task_id, worker, ..
            } => {
                let task = self.task(task_id)?;
                match task.state {
                    TaskState::Decided => return Err(ServiceError::AlreadyDecided(task_id.clone())),
                    TaskState::Claimed if task.claimant.as_deref() == Some(worker) => {}
                    _ => {
                        return Err(ServiceError::NotClaimant {
                            task_id: task_id.clone(),
                            worker: worker.clone(),
                        })
                    }
                }
            }
            Event::EvmCountsUploaded { evm_id, .. } | Event::Reconciled { evm_id, .. } => {
                self.session(evm_id)?;
            }
        }
        Ok(())
    }

    /// Apply a validated event. Deterministic: the same sequence of events
    /// always yields the same state.
    pub fn apply(&mut self, seq: u64, event: Event) -> Result<(), ServiceError> {
        match event {
            Event::BatchLoaded {
                manifest_path,
                manifest_digest,
                image_root,
                slips,
                tally,
            } => {
                for queued in &tally.review_queue {
                    self.next_task += 1;
                    let task_id = format!("T{:06}", self.next_task);
                    let image_ref = slips
                        .iter()
                        .find(|s| s.slip_id == queued.slip_id)
                        .map(|s| s.image_path.clone())
                        .unwrap_or_default();
                    self.tasks.insert(
                        task_id.clone(),
                        ReviewTask {
                            task_id,
                            slip_id: queued.slip_id.clone(),
                            evm_id: tally.evm_id.clone(),
                            image_ref,
                            prediction: queued.prediction.clone(),
                            state: TaskState::Pending,
                            claimant: None,
                            lease_expires: None,
                            decision: None,
                        },
                    );
                }
                self.manifest_digests.insert(manifest_digest.clone());
                self.evms.insert(
                    tally.evm_id.clone(),
                    EvmSession {
                        manifest_path,
                        manifest_digest,
                        image_root,
                        slips,
                        tally,
                        evm_counts: None,
                        reconciliation: None,
                    },
                );
            }
            Event::TaskClaimed {
                task_id,
                worker,
                lease_expires,
            } => {
                let task = self.task_mut(&task_id)?;
                task.state = TaskState::Claimed;
                task.claimant = Some(worker);
                task.lease_expires = Some(lease_expires);
            }
            Event::Decision {
                task_id, decision, ..
            } => {
                let task = self.task_mut(&task_id)?;
                task.state = TaskState::Decided;
                task.decision = Some(decision);
                task.lease_expires = None;
                let (evm_id, slip_id) = (task.evm_id.clone(), task.slip_id.clone());
                let session = self
                    .evms
                    .get_mut(&evm_id)
                    .ok_or_else(|| ServiceError::UnknownEvm(evm_id.clone()))?;
                session
                    .tally
                    .apply_adjudication(&slip_id, decision)
                    .map_err(ServiceError::Tally)?;
                // counts changed, any earlier reconciliation is stale
                session.reconciliation = None;
            }
            Event::EvmCountsUploaded { evm_id, counts } => {
                let session = self.session_mut(&evm_id)?;
                session.evm_counts = Some(counts);
                session.reconciliation = None;
            }
            Event::Reconciled { evm_id, result } => {
                self.session_mut(&evm_id)?.reconciliation = Some(result);
            }
        }
        self.last_seq = seq;
        Ok(())
    }

    pub fn task(&self, task_id: &str) -> Result<&ReviewTask, ServiceError> {
        self.tasks
            .get(task_id)
            .ok_or_else(|| ServiceError::UnknownTask(task_id.to_string()))
    }

    fn task_mut(&mut self, task_id: &str) -> Result<&mut ReviewTask, ServiceError> {
        self.tasks
            .get_mut(task_id)
            .ok_or_else(|| ServiceError::UnknownTask(task_id.to_string()))
    }

    pub fn session(&self, evm_id: &str) -> Result<&EvmSession, ServiceError> {
        self.evms
            .get(evm_id)
            .ok_or_else(|| ServiceError::UnknownEvm(evm_id.to_string()))
    }

    fn session_mut(&mut self, evm_id: &str) -> Result<&mut EvmSession, ServiceError> {
        self.evms
            .get_mut(evm_id)
            .ok_or_else(|| ServiceError::UnknownEvm(evm_id.to_string()))
    }

    /// Task currently held by `worker` under a live lease.
    pub fn held_by(&self, worker: &str, now: DateTime<Utc>) -> Option<&ReviewTask> {
        self.tasks.values().find(|t| {
            t.state_at(now) == TaskState::Claimed && t.claimant.as_deref() == Some(worker)
        })
    }

    /// Least confident claimable task; ties go to the lower task id.
    pub fn next_claimable(&self, now: DateTime<Utc>) -> Option<&ReviewTask> {
        self.tasks
            .values()
            .filter(|t| t.state_at(now) == TaskState::Pending)
            .min_by(|a, b| {
                a.prediction
                    .confidence
                    .total_cmp(&b.prediction.confidence)
                    .then_with(|| a.task_id.cmp(&b.task_id))
            })
    }
}
