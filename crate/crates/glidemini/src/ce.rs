//! The token-authenticated compute entrypoint plus a one-cluster batch
//! emulator: accepts glidein submissions, queues them FIFO, assigns whole
//! nodes (lowest node id first), and hosts the pilot runtimes for their
//! whole life on the node.
//!
//! A node may advertise more resources than it actually has; pilots detect
//! the advertised spec, which is exactly how faked cores propagate.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::audit::{emit, AuditVerb};
use crate::credentials::{Authority, Scope, Token, VerifyError};
use crate::events::Recorder;
use crate::glidein::{GlideinParams, GlideinRuntime, RetireReason};
use crate::model::{GlideinEvent, GlideinState, ResourceSpec, TimeMs};
use crate::wire::{ClaimResult, Dest, Effects, JobOutcome, JobTicket, Payload, TimerKind};

pub const DEFAULT_CE_CYCLE_MS: TimeMs = 1_000;
pub const DEFAULT_STARTUP_DELAY_MS: TimeMs = 3_000;

/// One whole-node slot of the emulated cluster.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeDescriptor {
    pub node_id: String,
    pub actual: ResourceSpec,
    /// What the node claims to have; defaults to `actual`. Advertising more
    /// than `actual` is permitted and is the point of the fake-cores option.
    pub advertised: ResourceSpec,
    #[serde(skip)]
    pub occupant: Option<String>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CeSubmitError {
    #[error(transparent)]
    Auth(#[from] VerifyError),
    #[error("duplicate-glidein: {0}")]
    DuplicateGlidein(String),
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown-glidein: {0}")]
pub struct UnknownGlidein(pub String);

#[derive(Debug, Clone)]
struct QueuedGlidein {
    glidein_id: String,
    client_id: String,
    #[allow(dead_code)]
    enqueue_time: TimeMs,
}

pub struct CeService {
    /// Token audience this CE enforces on submissions.
    pub audience: String,
    pub nodes: Vec<NodeDescriptor>,
    queue: VecDeque<QueuedGlidein>,
    pub glideins: BTreeMap<String, GlideinRuntime>,
    seen_ids: BTreeSet<String>,
    /// client of each pilot between node assignment and startup
    pending_starts: BTreeMap<String, String>,
    /// authoritative lifecycle state of every pilot this CE ever saw
    actual_states: BTreeMap<String, GlideinState>,
    pub cycle_period_ms: TimeMs,
    pub startup_delay_ms: TimeMs,
    pub validation_failure_prob: f64,
    pub glidein_params: GlideinParams,
    pub recorder: Recorder,
    pub glidein_recorder: Recorder,
}

impl CeService {
    pub fn new(
        audience: &str,
        mut nodes: Vec<NodeDescriptor>,
        cycle_period_ms: TimeMs,
        startup_delay_ms: TimeMs,
        validation_failure_prob: f64,
        glidein_params: GlideinParams,
    ) -> Self {
        nodes.sort_by(|a, b| a.node_id.cmp(&b.node_id));
        Self {
            audience: audience.to_string(),
            nodes,
            queue: VecDeque::new(),
            glideins: BTreeMap::new(),
            seen_ids: BTreeSet::new(),
            pending_starts: BTreeMap::new(),
            actual_states: BTreeMap::new(),
            cycle_period_ms,
            startup_delay_ms,
            validation_failure_prob,
            glidein_params,
            recorder: Recorder::new("ce"),
            glidein_recorder: Recorder::new("glidein"),
        }
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn occupied_nodes(&self) -> usize {
        self.nodes.iter().filter(|n| n.occupant.is_some()).count()
    }

    /// Authenticate and enqueue a pilot submission.
    pub fn submit_glidein(
        &mut self,
        authority: &Authority,
        glidein_id: &str,
        client_id: &str,
        credential: &Token,
        now: TimeMs,
        effects: &mut Effects,
    ) -> Result<(), CeSubmitError> {
        if let Err(err) =
            authority.verify_token(credential, &self.audience, Scope::ComputeCreate, now)
        {
            emit(
                &mut self.recorder,
                now,
                AuditVerb::RejectedAuth,
                glidein_id,
                json!({"site": "ce-submit", "reason": err.reason(), "client_id": client_id}),
            );
            emit(
                &mut self.recorder,
                now,
                AuditVerb::Failed,
                glidein_id,
                json!({"reason": err.reason()}),
            );
            self.actual_states.insert(glidein_id.to_string(), GlideinState::Failed);
            effects.send(
                Dest::Factory,
                Payload::GlideinEvent {
                    glidein_id: glidein_id.to_string(),
                    event: GlideinEvent::Failed,
                    reason: Some(err.reason().to_string()),
                    detected: None,
                    jobs_served: None,
                },
            );
            return Err(err.into());
        }
        if self.seen_ids.contains(glidein_id) {
            return Err(CeSubmitError::DuplicateGlidein(glidein_id.to_string()));
        }
        self.seen_ids.insert(glidein_id.to_string());
        self.queue.push_back(QueuedGlidein {
            glidein_id: glidein_id.to_string(),
            client_id: client_id.to_string(),
            enqueue_time: now,
        });
        self.actual_states.insert(glidein_id.to_string(), GlideinState::Queued);
        emit(
            &mut self.recorder,
            now,
            AuditVerb::Queued,
            glidein_id,
            json!({"client_id": client_id}),
        );
        effects.send(
            Dest::Factory,
            Payload::GlideinEvent {
                glidein_id: glidein_id.to_string(),
                event: GlideinEvent::Queued,
                reason: None,
                detected: None,
                jobs_served: None,
            },
        );
        Ok(())
    }

    /// Dequeue FIFO onto free nodes, lowest node id first. Startup (and the
    /// validation decision) happens after the configured delay.
    pub fn cycle(&mut self, now: TimeMs, effects: &mut Effects) -> Vec<(String, String)> {
        let mut assignments = Vec::new();
        while let Some(next) = self.queue.front() {
            let Some(node) = self.nodes.iter_mut().find(|n| n.occupant.is_none()) else {
                break;
            };
            let queued = next.clone();
            self.queue.pop_front();
            node.occupant = Some(queued.glidein_id.clone());
            let node_id = node.node_id.clone();
            self.actual_states.insert(queued.glidein_id.clone(), GlideinState::Starting);
            emit(
                &mut self.recorder,
                now,
                AuditVerb::Assigned,
                &queued.glidein_id,
                json!({"node_id": node_id, "client_id": queued.client_id}),
            );
            effects.send(
                Dest::Factory,
                Payload::GlideinEvent {
                    glidein_id: queued.glidein_id.clone(),
                    event: GlideinEvent::Assigned,
                    reason: None,
                    detected: None,
                    jobs_served: None,
                },
            );
            effects.schedule(
                now + self.startup_delay_ms,
                TimerKind::GlideinStart { glidein_id: queued.glidein_id.clone() },
            );
            // remember who asked for the pilot; startup needs it
            self.pending_starts.insert(queued.glidein_id.clone(), queued.client_id.clone());
            assignments.push((queued.glidein_id, node_id));
        }
        effects.schedule(now + self.cycle_period_ms, TimerKind::CeCycle);
        assignments
    }

    /// The pilot begins on its node: validate (the host supplies the random
    /// draw), detect resources from the advertisement, join the pool.
    pub fn glidein_start(&mut self, glidein_id: &str, uniform_draw: f64, now: TimeMs, effects: &mut Effects) {
        let client_id = self.pending_starts.remove(glidein_id).unwrap_or_default();
        let Some(node) = self.nodes.iter_mut().find(|n| n.occupant.as_deref() == Some(glidein_id))
        else {
            return;
        };
        if uniform_draw < self.validation_failure_prob {
            node.occupant = None;
            self.actual_states.insert(glidein_id.to_string(), GlideinState::Failed);
            emit(
                &mut self.glidein_recorder,
                now,
                AuditVerb::Failed,
                glidein_id,
                json!({"reason": "validation-failure"}),
            );
            effects.send(
                Dest::Factory,
                Payload::GlideinEvent {
                    glidein_id: glidein_id.to_string(),
                    event: GlideinEvent::Failed,
                    reason: Some("validation-failure".to_string()),
                    detected: None,
                    jobs_served: None,
                },
            );
            return;
        }
        let advertised = node.advertised;
        let node_id = node.node_id.clone();
        let mut runtime = GlideinRuntime::register(
            glidein_id,
            &client_id,
            &node_id,
            advertised,
            self.glidein_params,
            now,
        );
        // optimistic: the process-mode host flips this back on send failure
        runtime.pool_registered = true;
        self.actual_states.insert(glidein_id.to_string(), GlideinState::Registered);
        emit(&mut self.glidein_recorder, now, AuditVerb::Validated, glidein_id, json!({"node_id": node_id}));
        emit(
            &mut self.glidein_recorder,
            now,
            AuditVerb::Registered,
            glidein_id,
            json!({"detected": advertised}),
        );
        effects.send(
            Dest::Frontend,
            Payload::EpRegister { glidein_id: glidein_id.to_string(), detected: advertised },
        );
        effects.send(
            Dest::Factory,
            Payload::GlideinEvent {
                glidein_id: glidein_id.to_string(),
                event: GlideinEvent::Registered,
                reason: None,
                detected: Some(advertised),
                jobs_served: None,
            },
        );
        effects.schedule(
            now + self.glidein_params.poll_period_ms,
            TimerKind::GlideinPoll { glidein_id: glidein_id.to_string() },
        );
        self.glideins.insert(glidein_id.to_string(), runtime);
    }

    /// A claim for a hosted pilot. The pilot's own remaining resources are
    /// authoritative; a stale pool view gets a refusal, not a crash.
    pub fn claim(
        &mut self,
        glidein_id: &str,
        job: JobTicket,
        now: TimeMs,
        effects: &mut Effects,
    ) -> ClaimResult {
        let job_id = job.job_id.clone();
        match self.glideins.get_mut(glidein_id) {
            None => ClaimResult::Refused { reason: "unknown-glidein".to_string() },
            Some(rt) => match rt.claim(job, now) {
                Ok(accept) => {
                    emit(
                        &mut self.glidein_recorder,
                        now,
                        AuditVerb::Claimed,
                        glidein_id,
                        json!({"job_id": job_id, "slot_id": accept.slot_id, "start_time": accept.start_time}),
                    );
                    if accept.began_running {
                        self.actual_states
                            .insert(glidein_id.to_string(), GlideinState::Running);
                        effects.send(
                            Dest::Factory,
                            Payload::GlideinEvent {
                                glidein_id: glidein_id.to_string(),
                                event: GlideinEvent::Claimed,
                                reason: None,
                                detected: None,
                                jobs_served: None,
                            },
                        );
                    }
                    effects.schedule(
                        accept.end_time,
                        TimerKind::SlotDone {
                            glidein_id: glidein_id.to_string(),
                            slot_id: accept.slot_id.clone(),
                        },
                    );
                    ClaimResult::Accepted {
                        slot_id: accept.slot_id,
                        start_time: accept.start_time,
                        remaining: accept.remaining,
                    }
                }
                Err(err) => ClaimResult::Refused { reason: err.to_string() },
            },
        }
    }

    /// A dynamic slot reached its end time.
    pub fn slot_done(&mut self, glidein_id: &str, slot_id: &str, now: TimeMs, effects: &mut Effects) {
        let Some(rt) = self.glideins.get_mut(glidein_id) else { return };
        let Ok(done) = rt.complete(slot_id, now) else { return };
        let outcome = if done.job.fail { JobOutcome::Failed } else { JobOutcome::Completed };
        effects.send(
            Dest::Frontend,
            Payload::JobDone {
                glidein_id: glidein_id.to_string(),
                slot_id: done.slot_id.clone(),
                job_id: done.job.job_id.clone(),
                start_time: done.start_time,
                end_time: done.end_time,
                outcome,
                remaining: done.remaining,
            },
        );
        if done.drained {
            self.actual_states.insert(glidein_id.to_string(), GlideinState::Registered);
            emit(
                &mut self.glidein_recorder,
                now,
                AuditVerb::Registered,
                glidein_id,
                json!({"drained": true}),
            );
            effects.send(
                Dest::Factory,
                Payload::GlideinEvent {
                    glidein_id: glidein_id.to_string(),
                    event: GlideinEvent::Drained,
                    reason: None,
                    detected: None,
                    jobs_served: Some(done.jobs_served),
                },
            );
        }
    }

    /// Factory asked the pilot to retire: same drain path as self-retirement.
    pub fn retire_glidein(&mut self, glidein_id: &str, now: TimeMs, effects: &mut Effects) {
        let Some(rt) = self.glideins.get_mut(glidein_id) else { return };
        if rt.begin_retire(RetireReason::FactoryRequest) {
            self.actual_states.insert(glidein_id.to_string(), GlideinState::Retiring);
            emit(
                &mut self.glidein_recorder,
                now,
                AuditVerb::Retiring,
                glidein_id,
                json!({"reason": RetireReason::FactoryRequest.as_str()}),
            );
            effects.send(
                Dest::Factory,
                Payload::GlideinEvent {
                    glidein_id: glidein_id.to_string(),
                    event: GlideinEvent::Retire,
                    reason: Some(RetireReason::FactoryRequest.as_str().to_string()),
                    detected: None,
                    jobs_served: None,
                },
            );
        }
    }

    /// Drive one pilot's poll tick.
    pub fn glidein_poll(&mut self, glidein_id: &str, now: TimeMs, effects: &mut Effects) {
        let Some(rt) = self.glideins.get_mut(glidein_id) else { return };
        if rt.state.is_terminal() {
            return;
        }
        let outcome = rt.poll(now);
        let jobs_served = rt.jobs_served;
        if let Some(reason) = outcome.began_retiring {
            self.actual_states.insert(glidein_id.to_string(), GlideinState::Retiring);
            emit(
                &mut self.glidein_recorder,
                now,
                AuditVerb::Retiring,
                glidein_id,
                json!({"reason": reason.as_str()}),
            );
            effects.send(
                Dest::Factory,
                Payload::GlideinEvent {
                    glidein_id: glidein_id.to_string(),
                    event: GlideinEvent::Retire,
                    reason: Some(reason.as_str().to_string()),
                    detected: None,
                    jobs_served: Some(jobs_served),
                },
            );
        }
        if outcome.finished {
            self.actual_states.insert(glidein_id.to_string(), GlideinState::Done);
            let reason =
                rt.retire_reason.map(|r| r.as_str()).unwrap_or("drained").to_string();
            emit(
                &mut self.glidein_recorder,
                now,
                AuditVerb::Done,
                glidein_id,
                json!({"reason": reason, "jobs_served": jobs_served}),
            );
            effects.send(
                Dest::Frontend,
                Payload::EpDeregister { glidein_id: glidein_id.to_string() },
            );
            effects.send(
                Dest::Factory,
                Payload::GlideinEvent {
                    glidein_id: glidein_id.to_string(),
                    event: GlideinEvent::Done,
                    reason: Some(reason),
                    detected: None,
                    jobs_served: Some(jobs_served),
                },
            );
            let _ = self.release_node(glidein_id);
            return;
        }
        if let Some((remaining, retiring)) = outcome.heartbeat {
            let rt = self.glideins.get(glidein_id).expect("still present");
            if rt.pool_registered {
                effects.send(
                    Dest::Frontend,
                    Payload::EpHeartbeat { glidein_id: glidein_id.to_string(), remaining, retiring },
                );
            } else {
                // registration never landed; try again instead of heartbeating
                effects.send(
                    Dest::Frontend,
                    Payload::EpRegister { glidein_id: glidein_id.to_string(), detected: rt.detected },
                );
            }
        }
        effects.schedule(
            now + self.glidein_params.poll_period_ms,
            TimerKind::GlideinPoll { glidein_id: glidein_id.to_string() },
        );
    }

    pub fn actual_states(&self) -> &BTreeMap<String, GlideinState> {
        &self.actual_states
    }

    /// An EP_REGISTER send could not reach the pool (process mode). The
    /// pilot retries at its next poll and gives up for good after three
    /// consecutive failures.
    pub fn registration_send_failed(&mut self, glidein_id: &str, now: TimeMs, effects: &mut Effects) {
        let Some(rt) = self.glideins.get_mut(glidein_id) else { return };
        rt.pool_registered = false;
        rt.register_failures += 1;
        if rt.register_failures < 3 {
            return;
        }
        rt.state = crate::model::GlideinState::Failed;
        self.actual_states.insert(glidein_id.to_string(), GlideinState::Failed);
        emit(
            &mut self.glidein_recorder,
            now,
            AuditVerb::Failed,
            glidein_id,
            json!({"reason": "pool-unreachable"}),
        );
        effects.send(
            Dest::Factory,
            Payload::GlideinEvent {
                glidein_id: glidein_id.to_string(),
                event: GlideinEvent::Failed,
                reason: Some("pool-unreachable".to_string()),
                detected: None,
                jobs_served: None,
            },
        );
        let _ = self.release_node(glidein_id);
    }

    /// Clear a pilot's node; the node is assignable again next cycle.
    pub fn release_node(&mut self, glidein_id: &str) -> Result<String, UnknownGlidein> {
        for node in &mut self.nodes {
            if node.occupant.as_deref() == Some(glidein_id) {
                node.occupant = None;
                return Ok(node.node_id.clone());
            }
        }
        Err(UnknownGlidein(glidein_id.to_string()))
    }
}
