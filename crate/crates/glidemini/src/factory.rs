//! The factory daemon: reads client requests from its mailbox, keeps
//! glidein pressure at each entry inside the configured limits, triggers
//! retirements, mirrors glidein lifecycles, and publishes per-entry status.

use std::collections::{BTreeMap, BTreeSet};

use serde_json::json;
use thiserror::Error;

use crate::audit::{emit, AuditVerb, GLIDEIN_ID_PREFIX};
use crate::credentials::{Authority, Scope};
use crate::events::Recorder;
use crate::mailbox::{FactoryStatusMessage, Mailbox};
use crate::model::{
    EntryDescriptor, GlideinEvent, GlideinRecord, GlideinState, IllegalTransition, ResourceSpec,
    TimeMs,
};
use crate::wire::{Dest, Effects, Payload, TimerKind};

pub const DEFAULT_FACTORY_CYCLE_MS: TimeMs = 2_000;

/// How many new pilots to submit: enough to close the gap to the requested
/// pressure, but never past the per-cycle throttle or the entry's cap.
pub fn compute_submission(
    req_pressure: u64,
    current_pressure: u64,
    max_pressure: u64,
    max_submit_per_cycle: u64,
) -> u64 {
    req_pressure
        .saturating_sub(current_pressure)
        .min(max_submit_per_cycle)
        .min(max_pressure.saturating_sub(current_pressure))
}

/// Which running pilots to retire when the client lowered its running cap.
///
/// Only pilots actually in Running count against `req_max_run`; idle
/// Registered pilots drain by their own idle timeout instead. The excess is
/// chosen to lose the least invested work: fewest jobs served first, then
/// latest submission, then largest id.
pub fn compute_retirements(
    req_max_run: u64,
    candidates: &[&GlideinRecord],
) -> BTreeSet<String> {
    let mut running: Vec<&&GlideinRecord> =
        candidates.iter().filter(|g| g.state == GlideinState::Running).collect();
    let excess = (running.len() as u64).saturating_sub(req_max_run) as usize;
    if excess == 0 {
        return BTreeSet::new();
    }
    running.sort_by(|a, b| {
        a.jobs_served
            .cmp(&b.jobs_served)
            .then(b.submit_time.cmp(&a.submit_time))
            .then(b.glidein_id.cmp(&a.glidein_id))
    });
    running.iter().take(excess).map(|g| g.glidein_id.clone()).collect()
}

#[derive(Debug, Error)]
pub enum FactoryEventError {
    #[error("unknown glidein {0}")]
    UnknownGlidein(String),
    #[error(transparent)]
    Illegal(#[from] IllegalTransition),
}

/// Per-entry summary of one cycle, for the structured cycle log line.
#[derive(Debug, Clone, serde::Serialize)]
pub struct EntryCycleSummary {
    pub entry_id: String,
    pub pressure: u64,
    pub submitted: u64,
    pub retired: u64,
    pub auth_failures: u64,
}

pub struct FactoryService {
    pub entries: BTreeMap<String, EntryDescriptor>,
    pub glideins: BTreeMap<String, GlideinRecord>,
    pub mailbox: Mailbox,
    pub cycle_period_ms: TimeMs,
    pub request_ttl_ms: TimeMs,
    next_glidein_seq: u64,
    status_seqs: BTreeMap<String, u64>,
    pub auth_failures: u64,
    pub recorder: Recorder,
}

impl FactoryService {
    pub fn new(
        entries: Vec<EntryDescriptor>,
        cycle_period_ms: TimeMs,
        request_ttl_ms: TimeMs,
    ) -> Self {
        Self {
            entries: entries.into_iter().map(|e| (e.entry_id.clone(), e)).collect(),
            glideins: BTreeMap::new(),
            mailbox: Mailbox::new(),
            cycle_period_ms,
            request_ttl_ms,
            next_glidein_seq: 1,
            status_seqs: BTreeMap::new(),
            auth_failures: 0,
            recorder: Recorder::new("factory"),
        }
    }

    /// Pressure one client holds at one entry.
    pub fn pressure_of(&self, entry_id: &str, client_id: &str) -> u64 {
        self.glideins
            .values()
            .filter(|g| {
                g.entry_id == entry_id && g.client_id == client_id && g.state.counts_as_pressure()
            })
            .count() as u64
    }

    /// Pressure at one entry across all clients.
    pub fn pressure_at(&self, entry_id: &str) -> u64 {
        self.glideins
            .values()
            .filter(|g| g.entry_id == entry_id && g.state.counts_as_pressure())
            .count() as u64
    }

    /// One control-loop pass over all entries in lexicographic order.
    pub fn cycle(&mut self, authority: &Authority, now: TimeMs, effects: &mut Effects) {
        let entry_ids: Vec<String> = self.entries.keys().cloned().collect();
        let mut summaries = Vec::new();
        for entry_id in entry_ids {
            let entry = self.entries[&entry_id].clone();
            let requests = self.mailbox.fetch_requests(&entry_id, now, self.request_ttl_ms);
            let mut remaining_entry =
                entry.max_pressure.saturating_sub(self.pressure_at(&entry_id));
            let mut remaining_cycle = entry.max_submit_per_cycle;
            let mut submitted = 0;
            let mut retired = 0;
            let mut cycle_auth_failures = 0;
            for request in requests {
                if !entry.trusted_clients.contains(&request.client_id) {
                    self.auth_failures += 1;
                    cycle_auth_failures += 1;
                    emit(
                        &mut self.recorder,
                        now,
                        AuditVerb::RejectedAuth,
                        &request.client_id,
                        json!({"site": "factory-request", "entry_id": entry_id, "reason": "untrusted-client"}),
                    );
                    continue;
                }
                if let Err(err) = authority.verify_token(
                    &request.credential,
                    &entry.audience,
                    Scope::ComputeCreate,
                    now,
                ) {
                    self.auth_failures += 1;
                    cycle_auth_failures += 1;
                    emit(
                        &mut self.recorder,
                        now,
                        AuditVerb::RejectedAuth,
                        &request.client_id,
                        json!({"site": "factory-request", "entry_id": entry_id, "reason": err.reason()}),
                    );
                    continue;
                }
                let client_pressure = self.pressure_of(&entry_id, &request.client_id);
                let n = compute_submission(
                    request.req_pressure,
                    client_pressure,
                    client_pressure + remaining_entry,
                    remaining_cycle,
                );
                for _ in 0..n {
                    let glidein_id =
                        format!("{GLIDEIN_ID_PREFIX}{:06}", self.next_glidein_seq);
                    self.next_glidein_seq += 1;
                    self.glideins.insert(
                        glidein_id.clone(),
                        GlideinRecord {
                            glidein_id: glidein_id.clone(),
                            entry_id: entry_id.clone(),
                            client_id: request.client_id.clone(),
                            state: GlideinState::Submitted,
                            submit_time: now,
                            detected: None,
                            jobs_served: 0,
                        },
                    );
                    emit(
                        &mut self.recorder,
                        now,
                        AuditVerb::Submitted,
                        &glidein_id,
                        json!({"entry_id": entry_id, "client_id": request.client_id}),
                    );
                    effects.send(
                        Dest::Ce,
                        Payload::GlideinSubmit {
                            glidein_id,
                            client_id: request.client_id.clone(),
                            entry_id: entry_id.clone(),
                            credential: request.credential.clone(),
                        },
                    );
                }
                remaining_entry -= n;
                remaining_cycle -= n;
                submitted += n;

                let candidates: Vec<&GlideinRecord> = self
                    .glideins
                    .values()
                    .filter(|g| {
                        g.entry_id == entry_id
                            && g.client_id == request.client_id
                            && matches!(
                                g.state,
                                GlideinState::Registered | GlideinState::Running
                            )
                    })
                    .collect();
                for glidein_id in compute_retirements(request.req_max_run, &candidates) {
                    retired += 1;
                    effects.send(Dest::Ce, Payload::GlideinRetire { glidein_id });
                }
            }
            let status = self.build_status(&entry_id, now);
            self.recorder.record(now, "status", serde_json::to_value(&status).unwrap());
            self.mailbox.publish_status(status);
            summaries.push(EntryCycleSummary {
                entry_id: entry_id.clone(),
                pressure: self.pressure_at(&entry_id),
                submitted,
                retired,
                auth_failures: cycle_auth_failures,
            });
        }
        self.recorder.record(
            now,
            "cycle",
            json!({"now": now, "entries": summaries, "auth_failures_total": self.auth_failures}),
        );
        effects.schedule(now + self.cycle_period_ms, TimerKind::FactoryCycle);
    }

    fn build_status(&mut self, entry_id: &str, now: TimeMs) -> FactoryStatusMessage {
        let mut counts: BTreeMap<String, BTreeMap<GlideinState, u64>> = BTreeMap::new();
        for glidein in self.glideins.values().filter(|g| g.entry_id == entry_id) {
            *counts
                .entry(glidein.client_id.clone())
                .or_default()
                .entry(glidein.state)
                .or_insert(0) += 1;
        }
        let seq = self.status_seqs.entry(entry_id.to_string()).or_insert(0);
        *seq += 1;
        FactoryStatusMessage { entry_id: entry_id.to_string(), seq: *seq, counts, sent_at: now }
    }

    /// Store an inbound provisioning request, auditing rejections.
    pub fn handle_request_put(
        &mut self,
        authority: &Authority,
        msg: crate::mailbox::RequestMessage,
        now: TimeMs,
    ) -> Result<(), crate::mailbox::MailboxError> {
        let client_id = msg.client_id.clone();
        match self.mailbox.put_request(authority, msg) {
            Ok(()) => Ok(()),
            Err(err) => {
                if matches!(err, crate::mailbox::MailboxError::BadSignature) {
                    self.auth_failures += 1;
                    emit(
                        &mut self.recorder,
                        now,
                        AuditVerb::RejectedAuth,
                        &client_id,
                        json!({"site": "mailbox-put", "reason": "bad-signature"}),
                    );
                }
                Err(err)
            }
        }
    }

    /// Mirror a CE/pool notification onto the pilot's record. Terminal
    /// records are retained for reporting.
    pub fn handle_glidein_event(
        &mut self,
        glidein_id: &str,
        event: GlideinEvent,
        detected: Option<ResourceSpec>,
        jobs_served: Option<u64>,
        _now: TimeMs,
    ) -> Result<GlideinState, FactoryEventError> {
        let record = self
            .glideins
            .get_mut(glidein_id)
            .ok_or_else(|| FactoryEventError::UnknownGlidein(glidein_id.to_string()))?;
        let state = record.apply(event)?;
        if let Some(detected) = detected {
            record.detected = Some(detected);
        }
        if let Some(jobs_served) = jobs_served {
            record.jobs_served = jobs_served;
        }
        Ok(state)
    }

    /// Counts by state across every record, for status displays.
    pub fn state_counts(&self) -> BTreeMap<GlideinState, u64> {
        let mut counts = BTreeMap::new();
        for glidein in self.glideins.values() {
            *counts.entry(glidein.state).or_insert(0) += 1;
        }
        counts
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::credentials::Token;
    use crate::mailbox::RequestMessage;
    use proptest::prelude::*;

    fn entry(max_pressure: u64, max_submit: u64) -> EntryDescriptor {
        EntryDescriptor {
            entry_id: "entry-a".into(),
            ce_address: "ce-1.glideinwms.org:9620".into(),
            audience: "ce-1.glideinwms.org".into(),
            max_pressure,
            max_submit_per_cycle: max_submit,
            trusted_clients: vec!["frontend-1".into()],
        }
    }

    fn setup(max_pressure: u64, max_submit: u64) -> (Authority, FactoryService, Token) {
        let mut authority = Authority::from_seed(21);
        let token = authority
            .issue_token("frontend-1", "ce-1.glideinwms.org", Scope::ComputeCreate, 3_600_000, 0)
            .unwrap();
        let factory =
            FactoryService::new(vec![entry(max_pressure, max_submit)], 2_000, 60_000);
        (authority, factory, token)
    }

    fn put_request(
        factory: &mut FactoryService,
        authority: &Authority,
        token: &Token,
        seq: u64,
        req_pressure: u64,
        req_max_run: u64,
        sent_at: TimeMs,
    ) {
        let mut msg = RequestMessage {
            client_id: "frontend-1".into(),
            entry_id: "entry-a".into(),
            seq,
            req_pressure,
            req_max_run,
            credential: token.clone(),
            sent_at,
            signature: String::new(),
        };
        msg.sign(authority);
        factory.mailbox.put_request(authority, msg).unwrap();
    }

    #[test]
    fn submission_formula_examples() {
        assert_eq!(compute_submission(5, 2, 8, 10), 3);
        assert_eq!(compute_submission(5, 7, 8, 10), 0);
        assert_eq!(compute_submission(20, 0, 8, 3), 3);
    }

    fn record(id: &str, state: GlideinState, jobs_served: u64, submit_time: TimeMs) -> GlideinRecord {
        GlideinRecord {
            glidein_id: id.into(),
            entry_id: "entry-a".into(),
            client_id: "frontend-1".into(),
            state,
            submit_time,
            detected: None,
            jobs_served,
        }
    }

    #[test]
    fn retirement_prefers_least_invested() {
        let records = [
            record("glidein-000001", GlideinState::Running, 5, 10),
            record("glidein-000002", GlideinState::Running, 2, 20),
            record("glidein-000003", GlideinState::Running, 2, 30),
            record("glidein-000004", GlideinState::Running, 0, 40),
        ];
        let refs: Vec<&GlideinRecord> = records.iter().collect();

        // independent check: rank all candidates by the stated preference
        // (fewest jobs served, then latest submit, then largest id) and take
        // the excess from the front
        let mut ranked = refs.clone();
        ranked.sort_by(|a, b| {
            a.jobs_served
                .cmp(&b.jobs_served)
                .then(b.submit_time.cmp(&a.submit_time))
                .then(b.glidein_id.cmp(&a.glidein_id))
        });
        let expected: BTreeSet<String> =
            ranked.iter().take(2).map(|g| g.glidein_id.clone()).collect();
        assert_eq!(
            expected,
            BTreeSet::from(["glidein-000004".to_string(), "glidein-000003".to_string()])
        );

        assert_eq!(compute_retirements(2, &refs), expected);
        assert_eq!(compute_retirements(3, &refs).len(), 1);
        assert_eq!(compute_retirements(4, &refs), BTreeSet::new());
    }

    #[test]
    fn retirement_boundary_cases() {
        let records = [
            record("glidein-000001", GlideinState::Running, 1, 10),
            record("glidein-000002", GlideinState::Running, 1, 20),
        ];
        let refs: Vec<&GlideinRecord> = records.iter().collect();
        assert!(compute_retirements(3, &refs).is_empty());
        assert!(compute_retirements(2, &refs).is_empty());
        assert_eq!(compute_retirements(0, &refs).len(), 2);
    }

    #[test]
    fn retirement_ignores_registered_but_idle_pilots() {
        let records = [
            record("glidein-000001", GlideinState::Registered, 0, 10),
            record("glidein-000002", GlideinState::Running, 3, 20),
        ];
        let refs: Vec<&GlideinRecord> = records.iter().collect();
        assert!(compute_retirements(1, &refs).is_empty());
        assert_eq!(
            compute_retirements(0, &refs),
            BTreeSet::from(["glidein-000002".to_string()])
        );
    }

    #[test]
    fn quiescent_cycle_publishes_status_only() {
        let (authority, mut factory, _) = setup(8, 4);
        let mut fx = Effects::none();
        factory.cycle(&authority, 2_000, &mut fx);
        assert!(fx.messages.is_empty());
        assert_eq!(factory.mailbox.fetch_status().len(), 1);
        assert_eq!(factory.glideins.len(), 0);
    }

    #[test]
    fn fresh_request_submits_up_to_formula() {
        let (authority, mut factory, token) = setup(8, 10);
        put_request(&mut factory, &authority, &token, 0, 5, 5, 1_000);
        let mut fx = Effects::none();
        factory.cycle(&authority, 2_000, &mut fx);
        let submissions: Vec<_> = fx
            .messages
            .iter()
            .filter(|(d, p)| *d == Dest::Ce && matches!(p, Payload::GlideinSubmit { .. }))
            .collect();
        assert_eq!(submissions.len(), 5);
        assert_eq!(factory.pressure_at("entry-a"), 5);
    }

    #[test]
    fn wrong_audience_request_is_skipped_and_counted() {
        let (mut authority, mut factory, _) = setup(8, 4);
        let wrong = authority
            .issue_token("frontend-1", "elsewhere.example.org", Scope::ComputeCreate, 3_600_000, 0)
            .unwrap();
        put_request(&mut factory, &authority, &wrong, 0, 5, 5, 1_000);
        let mut fx = Effects::none();
        factory.cycle(&authority, 2_000, &mut fx);
        assert!(fx.messages.is_empty());
        assert_eq!(factory.auth_failures, 1);
    }

    #[test]
    fn untrusted_client_request_is_skipped() {
        let (mut authority, mut factory, _) = setup(8, 4);
        let token = authority
            .issue_token("stranger", "ce-1.glideinwms.org", Scope::ComputeCreate, 3_600_000, 0)
            .unwrap();
        let mut msg = RequestMessage {
            client_id: "stranger".into(),
            entry_id: "entry-a".into(),
            seq: 0,
            req_pressure: 5,
            req_max_run: 5,
            credential: token,
            sent_at: 1_000,
            signature: String::new(),
        };
        msg.sign(&authority);
        factory.mailbox.put_request(&authority, msg).unwrap();
        let mut fx = Effects::none();
        factory.cycle(&authority, 2_000, &mut fx);
        assert!(fx.messages.is_empty());
        assert_eq!(factory.auth_failures, 1);
    }

    #[test]
    fn stale_request_starves_submissions() {
        let (authority, mut factory, token) = setup(8, 4);
        put_request(&mut factory, &authority, &token, 0, 5, 5, 0);
        let mut fx = Effects::none();
        factory.cycle(&authority, 100_000, &mut fx); // 100 s later, ttl 60 s
        assert!(fx.messages.is_empty());
        assert_eq!(factory.pressure_at("entry-a"), 0);
    }

    #[test]
    fn convergence_to_requested_pressure() {
        let (authority, mut factory, token) = setup(8, 2);
        let k = 5;
        let mut pressures = Vec::new();
        for cycle in 0..6u64 {
            let now = 2_000 * (cycle + 1);
            put_request(&mut factory, &authority, &token, cycle, k, k, now - 1);
            let mut fx = Effects::none();
            factory.cycle(&authority, now, &mut fx);
            pressures.push(factory.pressure_at("entry-a"));
        }
        // ceil(5 / 2) = 3 cycles to converge, then steady
        assert_eq!(pressures, vec![2, 4, 5, 5, 5, 5]);
    }

    #[test]
    fn event_mirroring_follows_the_state_machine() {
        let (authority, mut factory, token) = setup(8, 4);
        put_request(&mut factory, &authority, &token, 0, 1, 1, 1_000);
        let mut fx = Effects::none();
        factory.cycle(&authority, 2_000, &mut fx);
        let id = "glidein-000001";
        assert_eq!(
            factory.handle_glidein_event(id, GlideinEvent::Queued, None, None, 2_100).unwrap(),
            GlideinState::Queued
        );
        assert_eq!(
            factory.handle_glidein_event(id, GlideinEvent::Assigned, None, None, 3_000).unwrap(),
            GlideinState::Starting
        );
        assert_eq!(
            factory.handle_glidein_event(id, GlideinEvent::Failed, None, None, 6_000).unwrap(),
            GlideinState::Failed
        );
        assert!(matches!(
            factory.handle_glidein_event(id, GlideinEvent::Claimed, None, None, 7_000),
            Err(FactoryEventError::Illegal(_))
        ));
        assert!(matches!(
            factory.handle_glidein_event("glidein-000099", GlideinEvent::Queued, None, None, 0),
            Err(FactoryEventError::UnknownGlidein(_))
        ));
    }

    proptest! {
        #[test]
        fn submission_count_is_monotone(
            req in 0u64..50,
            cur in 0u64..50,
            maxp in 0u64..50,
            maxc in 0u64..50,
        ) {
            let n = compute_submission(req, cur, maxp, maxc);
            // never exceeds any governing limit
            prop_assert!(n <= maxc);
            prop_assert!(cur + n <= maxp.max(cur));
            prop_assert!(n <= req.saturating_sub(cur));
            // monotone up in requested pressure, down in current pressure
            prop_assert!(compute_submission(req + 1, cur, maxp, maxc) >= n);
            if cur > 0 {
                prop_assert!(compute_submission(req, cur - 1, maxp, maxc) >= n);
            }
        }
    }
}
