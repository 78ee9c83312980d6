//! The elastic cluster: an access point accepting user jobs, a collector
//! tracking execution-point ads, and a negotiator matching idle jobs to
//! partitionable slots FIFO with first-fit and provisional deduction.
//!
//! Claims are optimistic — the pool's view of a pilot may be stale, so the
//! pilot re-validates against its own remaining resources; a refused claim
//! returns the job to the idle queue.

use std::collections::BTreeMap;

use serde_json::json;
use thiserror::Error;

use crate::audit::{emit, AuditVerb, JOB_ID_PREFIX};
use crate::credentials::{Authority, Scope, Token, VerifyError};
use crate::events::Recorder;
use crate::model::{
    fits, job_transition, ExecutionRecord, Job, JobEvent, JobState, ResourceSpec, TimeMs,
};
use crate::wire::{ClaimResult, EpView, JobOutcome, JobSpec, JobTicket, PoolSnapshot};

pub const DEFAULT_NEGOTIATION_PERIOD_MS: TimeMs = 2_000;
pub const DEFAULT_AD_LIFETIME_MS: TimeMs = 10_000;

/// One execution point's advertisement.
#[derive(Debug, Clone)]
pub struct EpAd {
    pub remaining: ResourceSpec,
    pub last_heartbeat: TimeMs,
    pub retiring: bool,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SubmitError {
    #[error(transparent)]
    Auth(#[from] VerifyError),
}

pub struct PoolState {
    /// Token audience the access point enforces on job submissions.
    pub audience: String,
    pub jobs: BTreeMap<String, Job>,
    pub ep_ads: BTreeMap<String, EpAd>,
    /// Glidein each Matched job's claim went to, until the claim resolves.
    pending_claims: BTreeMap<String, String>,
    pub negotiation_period_ms: TimeMs,
    pub ad_lifetime_ms: TimeMs,
    next_job_seq: u64,
    pub recorder: Recorder,
}

impl PoolState {
    pub fn new(audience: &str, negotiation_period_ms: TimeMs, ad_lifetime_ms: TimeMs) -> Self {
        Self {
            audience: audience.to_string(),
            jobs: BTreeMap::new(),
            ep_ads: BTreeMap::new(),
            pending_claims: BTreeMap::new(),
            negotiation_period_ms,
            ad_lifetime_ms,
            next_job_seq: 1,
            recorder: Recorder::new("pool"),
        }
    }

    /// Accept a job under a valid job.submit token; it enters Idle.
    pub fn submit_job(
        &mut self,
        authority: &Authority,
        spec: JobSpec,
        token: &Token,
        now: TimeMs,
    ) -> Result<String, SubmitError> {
        match authority.verify_token(token, &self.audience, Scope::JobSubmit, now) {
            Ok(_) => {}
            Err(err) => {
                emit(
                    &mut self.recorder,
                    now,
                    AuditVerb::RejectedAuth,
                    &spec.owner,
                    json!({"site": "pool-submit", "reason": err.reason()}),
                );
                return Err(err.into());
            }
        }
        let job_id = format!("{JOB_ID_PREFIX}{:06}", self.next_job_seq);
        self.next_job_seq += 1;
        let job = Job {
            job_id: job_id.clone(),
            owner: spec.owner,
            submit_time: now,
            requirements: spec.requirements,
            declared_runtime_ms: spec.declared_runtime_ms,
            fail: spec.fail,
            state: JobState::Idle,
            execution_record: None,
        };
        emit(
            &mut self.recorder,
            now,
            AuditVerb::Submitted,
            &job_id,
            json!({"owner": job.owner, "requirements": job.requirements, "declared_runtime_ms": job.declared_runtime_ms}),
        );
        self.jobs.insert(job_id.clone(), job);
        Ok(job_id)
    }

    pub fn register_ep(&mut self, glidein_id: &str, detected: ResourceSpec, now: TimeMs) {
        self.ep_ads.insert(
            glidein_id.to_string(),
            EpAd { remaining: detected, last_heartbeat: now, retiring: false },
        );
    }

    /// Heartbeats carry the pilot's authoritative remaining resources; they
    /// also reinstate an ad that expired while the pilot was alive.
    pub fn heartbeat_ep(
        &mut self,
        glidein_id: &str,
        remaining: ResourceSpec,
        retiring: bool,
        now: TimeMs,
    ) {
        self.ep_ads.insert(
            glidein_id.to_string(),
            EpAd { remaining, last_heartbeat: now, retiring },
        );
    }

    pub fn deregister_ep(&mut self, glidein_id: &str, now: TimeMs) {
        self.ep_ads.remove(glidein_id);
        self.requeue_jobs_matched_to(glidein_id, "ep-deregistered", now);
    }

    /// Stale-ad sweep: ads that missed heartbeats for longer than the ad
    /// lifetime vanish, and jobs whose claims went to them return to Idle so
    /// a crashed pilot cannot black-hole work.
    pub fn expire_ads(&mut self, now: TimeMs) -> Vec<String> {
        let expired: Vec<String> = self
            .ep_ads
            .iter()
            .filter(|(_, ad)| now.saturating_sub(ad.last_heartbeat) > self.ad_lifetime_ms)
            .map(|(id, _)| id.clone())
            .collect();
        for glidein_id in &expired {
            self.ep_ads.remove(glidein_id);
            self.requeue_jobs_matched_to(glidein_id, "ep-expired", now);
        }
        expired
    }

    fn requeue_jobs_matched_to(&mut self, glidein_id: &str, reason: &str, now: TimeMs) {
        let affected: Vec<String> = self
            .pending_claims
            .iter()
            .filter(|(_, g)| g.as_str() == glidein_id)
            .map(|(j, _)| j.clone())
            .collect();
        for job_id in affected {
            self.pending_claims.remove(&job_id);
            if let Some(job) = self.jobs.get_mut(&job_id) {
                if job.state == JobState::Matched {
                    job.state = job_transition(job.state, JobEvent::Unmatched)
                        .expect("Matched accepts Unmatched");
                    emit(
                        &mut self.recorder,
                        now,
                        AuditVerb::Queued,
                        &job_id,
                        json!({"reason": reason}),
                    );
                }
            }
        }
    }

    /// Match idle jobs to execution points: jobs in (submit_time, job_id)
    /// order, ads scanned in glidein id order, first fit wins, and the ad's
    /// remaining is provisionally deducted so one cycle can pack several
    /// jobs onto one pilot. Returns the claims to send.
    pub fn negotiate(&mut self, now: TimeMs) -> Vec<(String, String, JobTicket)> {
        let mut idle: Vec<(TimeMs, String)> = self
            .jobs
            .values()
            .filter(|j| j.state == JobState::Idle)
            .map(|j| (j.submit_time, j.job_id.clone()))
            .collect();
        idle.sort();
        let mut claims = Vec::new();
        for (_, job_id) in idle {
            let job = self.jobs.get(&job_id).expect("job exists");
            let requirements = job.requirements;
            let target = self
                .ep_ads
                .iter_mut()
                .filter(|(_, ad)| !ad.retiring)
                .find(|(_, ad)| fits(&requirements, &ad.remaining));
            let Some((glidein_id, ad)) = target else { continue };
            let glidein_id = glidein_id.clone();
            ad.remaining = ad.remaining.carve(&requirements).expect("fits checked");
            let job = self.jobs.get_mut(&job_id).expect("job exists");
            job.state = job_transition(job.state, JobEvent::Matched).expect("Idle accepts Matched");
            let ticket = JobTicket {
                job_id: job_id.clone(),
                requirements,
                declared_runtime_ms: job.declared_runtime_ms,
                fail: job.fail,
            };
            emit(
                &mut self.recorder,
                now,
                AuditVerb::Assigned,
                &job_id,
                json!({"glidein_id": glidein_id}),
            );
            self.pending_claims.insert(job_id.clone(), glidein_id.clone());
            claims.push((job_id, glidein_id, ticket));
        }
        claims
    }

    /// A claim came back from the pilot.
    pub fn claim_resolved(
        &mut self,
        job_id: &str,
        glidein_id: &str,
        result: &ClaimResult,
        now: TimeMs,
    ) {
        if self.pending_claims.get(job_id).map(String::as_str) != Some(glidein_id) {
            return; // superseded (e.g. requeued by an ad expiry) — ignore
        }
        self.pending_claims.remove(job_id);
        let Some(job) = self.jobs.get_mut(job_id) else { return };
        if job.state != JobState::Matched {
            return;
        }
        match result {
            ClaimResult::Accepted { slot_id, start_time, remaining } => {
                job.state = job_transition(job.state, JobEvent::Started)
                    .expect("Matched accepts Started");
                emit(
                    &mut self.recorder,
                    now,
                    AuditVerb::Started,
                    job_id,
                    json!({"glidein_id": glidein_id, "slot_id": slot_id, "start_time": start_time}),
                );
                if let Some(ad) = self.ep_ads.get_mut(glidein_id) {
                    ad.remaining = *remaining;
                    ad.last_heartbeat = now;
                }
            }
            ClaimResult::Refused { reason } => {
                job.state = job_transition(job.state, JobEvent::Unmatched)
                    .expect("Matched accepts Unmatched");
                emit(
                    &mut self.recorder,
                    now,
                    AuditVerb::Queued,
                    job_id,
                    json!({"reason": format!("claim-refused: {reason}")}),
                );
            }
        }
    }

    /// A pilot reported a finished slot.
    #[allow(clippy::too_many_arguments)]
    pub fn job_done(
        &mut self,
        job_id: &str,
        glidein_id: &str,
        slot_id: &str,
        start_time: TimeMs,
        end_time: TimeMs,
        outcome: JobOutcome,
        remaining: ResourceSpec,
        now: TimeMs,
    ) {
        if let Some(ad) = self.ep_ads.get_mut(glidein_id) {
            ad.remaining = remaining;
            ad.last_heartbeat = now;
        }
        let Some(job) = self.jobs.get_mut(job_id) else { return };
        if job.state != JobState::Running {
            return; // exactly-once: a terminal job never gains a second record
        }
        let event = match outcome {
            JobOutcome::Completed => JobEvent::Completed,
            JobOutcome::Failed => JobEvent::Failed,
        };
        job.state = job_transition(job.state, event).expect("Running accepts terminal events");
        job.execution_record = Some(ExecutionRecord {
            glidein_id: glidein_id.to_string(),
            slot_id: slot_id.to_string(),
            start_time,
            end_time,
        });
        let verb = match outcome {
            JobOutcome::Completed => AuditVerb::Completed,
            JobOutcome::Failed => AuditVerb::Failed,
        };
        emit(
            &mut self.recorder,
            now,
            verb,
            job_id,
            json!({
                "glidein_id": glidein_id,
                "slot_id": slot_id,
                "start_time": start_time,
                "end_time": end_time,
            }),
        );
    }

    /// Read-only snapshot at one event boundary.
    pub fn snapshot(&self) -> PoolSnapshot {
        let mut snapshot = PoolSnapshot::default();
        for job in self.jobs.values() {
            *snapshot.job_counts.entry(job.state).or_insert(0) += 1;
            match job.state {
                JobState::Idle => {
                    snapshot.idle_jobs.push((job.job_id.clone(), job.requirements))
                }
                JobState::Running => {
                    snapshot.running_jobs.push((job.job_id.clone(), job.requirements))
                }
                _ => {}
            }
        }
        for (glidein_id, ad) in &self.ep_ads {
            snapshot.eps.push(EpView {
                glidein_id: glidein_id.clone(),
                remaining: ad.remaining,
                retiring: ad.retiring,
            });
        }
        snapshot
    }
}
