//! The client daemon: inspects the pool's job queue and the factory's
//! status, runs the request heuristic per entry, and publishes signed
//! requests to the factory mailbox.
//!
//! The heuristic is deliberately the simplest controller that keeps jobs
//! starting promptly, respects every limit, and lets supply drain to zero
//! when there is nothing to run. It is isolated in one pure function so
//! alternatives can be swapped in and compared in simulation.

use std::collections::BTreeMap;

use serde_json::json;

use crate::credentials::{Authority, Scope, Token};
use crate::events::Recorder;
use crate::mailbox::{FactoryStatusMessage, RequestMessage};
use crate::model::{fits, GlideinState, ResourceSpec, TimeMs};
use crate::wire::PoolSnapshot;

pub const DEFAULT_FRONTEND_CYCLE_MS: TimeMs = 2_000;
pub const DEFAULT_TOKEN_TTL_MS: TimeMs = 3_600_000;

/// An entry the frontend may request pilots from.
#[derive(Debug, Clone)]
pub struct KnownEntry {
    pub entry_id: String,
    /// Advertised node spec at the entry; what job requirements match
    /// against.
    pub node_advertised: ResourceSpec,
    /// hostname:port of the factory hosting the entry's mailbox.
    pub mailbox_addr: String,
    /// Token audience of the entry's CE.
    pub ce_audience: String,
}

/// The provisioning knobs from the frontend's configuration.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct RequestPolicy {
    pub max_pressure_per_entry: u64,
    pub total_max_glideins: u64,
    pub total_curb_glideins: u64,
    pub expansion_factor: f64,
}

/// Count idle and running jobs whose requirements fit the advertised node.
pub fn count_matching(
    idle_jobs: &[(String, ResourceSpec)],
    running_jobs: &[(String, ResourceSpec)],
    node_advertised: &ResourceSpec,
) -> (u64, u64) {
    let matching = |jobs: &[(String, ResourceSpec)]| {
        jobs.iter().filter(|(_, req)| fits(req, node_advertised)).count() as u64
    };
    (matching(idle_jobs), matching(running_jobs))
}

/// The request heuristic for one entry.
///
/// `busy_glideins` is this client's Running pilots at the entry;
/// `total_glideins` is its pilots in Submitted through Running across all
/// entries. Keeping busy pilots inside the base stops a steady job stream
/// from oscillating between teardown and resubmission. Above the curb the
/// request holds at the busy level; at the hard cap it drops to zero.
pub fn compute_request(
    matching_idle: u64,
    busy_glideins: u64,
    total_glideins: u64,
    policy: &RequestPolicy,
) -> (u64, u64) {
    let base = (matching_idle as f64 * policy.expansion_factor).ceil() as u64 + busy_glideins;
    let mut req_pressure = base.min(policy.max_pressure_per_entry);
    if total_glideins >= policy.total_max_glideins {
        req_pressure = 0;
    } else if total_glideins >= policy.total_curb_glideins {
        req_pressure = req_pressure.min(busy_glideins);
    }
    (req_pressure, req_pressure)
}

pub struct FrontendService {
    pub client_id: String,
    pub entries: Vec<KnownEntry>,
    pub policy: RequestPolicy,
    pub cycle_period_ms: TimeMs,
    pub token_ttl_ms: TimeMs,
    /// Last sequence number actually accepted by the mailbox, per entry.
    committed_seqs: BTreeMap<String, u64>,
    credentials: BTreeMap<String, Token>,
    pub recorder: Recorder,
}

impl FrontendService {
    pub fn new(
        client_id: &str,
        mut entries: Vec<KnownEntry>,
        policy: RequestPolicy,
        cycle_period_ms: TimeMs,
        token_ttl_ms: TimeMs,
    ) -> Self {
        entries.sort_by(|a, b| a.entry_id.cmp(&b.entry_id));
        Self {
            client_id: client_id.to_string(),
            entries,
            policy,
            cycle_period_ms,
            token_ttl_ms,
            committed_seqs: BTreeMap::new(),
            credentials: BTreeMap::new(),
            recorder: Recorder::new("frontend"),
        }
    }

    fn next_seq(&self, entry_id: &str) -> u64 {
        self.committed_seqs.get(entry_id).map(|s| s + 1).unwrap_or(0)
    }

    /// The mailbox accepted this entry's request; later requests may use the
    /// next sequence number. Skipped or failed puts leave the sequence
    /// untouched, so the retry next cycle reuses it.
    pub fn commit_seq(&mut self, entry_id: &str, seq: u64) {
        self.committed_seqs.insert(entry_id.to_string(), seq);
    }

    /// A fresh compute.create token per entry, refreshed when less than two
    /// cycles of validity remain.
    fn credential_for(
        &mut self,
        authority: &mut Authority,
        entry: &KnownEntry,
        now: TimeMs,
    ) -> Token {
        let needs_new = match self.credentials.get(&entry.entry_id) {
            Some(token) => token.expires_at.saturating_sub(now) < 2 * self.cycle_period_ms,
            None => true,
        };
        if needs_new {
            let token = match self.credentials.get(&entry.entry_id) {
                Some(old) => authority
                    .refresh_token(old, self.token_ttl_ms, now)
                    .expect("own token refreshes"),
                None => authority
                    .issue_token(
                        &self.client_id,
                        &entry.ce_audience,
                        Scope::ComputeCreate,
                        self.token_ttl_ms,
                        now,
                    )
                    .expect("positive ttl"),
            };
            self.credentials.insert(entry.entry_id.clone(), token);
        }
        self.credentials[&entry.entry_id].clone()
    }

    /// One control-loop pass: compute and sign one request per entry from
    /// the pool snapshot and the latest factory statuses. The caller
    /// delivers each request and reports acceptance via [`commit_seq`].
    pub fn prepare_requests(
        &mut self,
        authority: &mut Authority,
        snapshot: &PoolSnapshot,
        statuses: &[FactoryStatusMessage],
        now: TimeMs,
    ) -> Vec<RequestMessage> {
        let by_entry: BTreeMap<&str, &FactoryStatusMessage> =
            statuses.iter().map(|s| (s.entry_id.as_str(), s)).collect();
        let total_glideins: u64 =
            statuses.iter().map(|s| s.pressure_for(&self.client_id)).sum();
        let mut requests = Vec::new();
        let mut cycle_lines = Vec::new();
        let entries = self.entries.clone();
        for entry in &entries {
            let (matching_idle, _) = count_matching(
                &snapshot.idle_jobs,
                &snapshot.running_jobs,
                &entry.node_advertised,
            );
            let busy = by_entry
                .get(entry.entry_id.as_str())
                .map(|s| s.count_for(&self.client_id, GlideinState::Running))
                .unwrap_or(0);
            let (req_pressure, req_max_run) =
                compute_request(matching_idle, busy, total_glideins, &self.policy);
            let credential = self.credential_for(authority, entry, now);
            let mut msg = RequestMessage {
                client_id: self.client_id.clone(),
                entry_id: entry.entry_id.clone(),
                seq: self.next_seq(&entry.entry_id),
                req_pressure,
                req_max_run,
                credential,
                sent_at: now,
                signature: String::new(),
            };
            msg.sign(authority);
            cycle_lines.push(json!({
                "entry_id": entry.entry_id,
                "matching_idle": matching_idle,
                "busy": busy,
                "req_pressure": req_pressure,
            }));
            requests.push(msg);
        }
        self.recorder.record(
            now,
            "cycle",
            json!({"now": now, "total_glideins": total_glideins, "entries": cycle_lines}),
        );
        requests
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn policy(max_per_entry: u64, curb: u64, max: u64, expansion: f64) -> RequestPolicy {
        RequestPolicy {
            max_pressure_per_entry: max_per_entry,
            total_max_glideins: max,
            total_curb_glideins: curb,
            expansion_factor: expansion,
        }
    }

    fn jobs(n: usize, cores: u64) -> Vec<(String, ResourceSpec)> {
        (0..n)
            .map(|i| (format!("job-{i:06}"), ResourceSpec::new(cores, 1024, 0, 0)))
            .collect()
    }

    #[test]
    fn count_matching_respects_fit() {
        let node = ResourceSpec::new(8, 8192, 1000, 0);
        assert_eq!(count_matching(&jobs(10, 1), &[], &node), (10, 0));
        assert_eq!(count_matching(&jobs(3, 16), &[], &node), (0, 0));
        assert_eq!(count_matching(&[], &[], &node), (0, 0));
        assert_eq!(count_matching(&jobs(2, 1), &jobs(3, 2), &node), (2, 3));
    }

    #[test]
    fn request_formula_examples() {
        assert_eq!(compute_request(10, 0, 0, &policy(5, 50, 100, 1.0)), (5, 5));
        assert_eq!(compute_request(0, 0, 0, &policy(5, 50, 100, 1.0)), (0, 0));
        // over the curb: hold at the busy level, don't grow
        assert_eq!(compute_request(10, 3, 60, &policy(20, 50, 100, 1.0)), (3, 3));
        // at the hard cap: drop to zero outright
        assert_eq!(compute_request(10, 3, 100, &policy(20, 50, 100, 1.0)), (0, 0));
    }

    #[test]
    fn expansion_factor_scales_idle_count() {
        assert_eq!(compute_request(10, 0, 0, &policy(8, 50, 100, 0.125)), (2, 2));
        assert_eq!(compute_request(16, 0, 0, &policy(8, 50, 100, 0.0625)), (1, 1));
        assert_eq!(compute_request(3, 0, 0, &policy(100, 50, 100, 2.0)), (6, 6));
    }

    fn service() -> FrontendService {
        FrontendService::new(
            "frontend-1",
            vec![KnownEntry {
                entry_id: "entry-a".into(),
                node_advertised: ResourceSpec::new(8, 8192, 1000, 0),
                mailbox_addr: "factory-1.glideinwms.org:9619".into(),
                ce_audience: "ce-1.glideinwms.org".into(),
            }],
            policy(8, 50, 100, 1.0),
            2_000,
            3_600_000,
        )
    }

    #[test]
    fn prepare_requests_zero_when_pool_empty() {
        let mut authority = Authority::from_seed(2);
        let mut fe = service();
        let requests =
            fe.prepare_requests(&mut authority, &PoolSnapshot::default(), &[], 2_000);
        assert_eq!(requests.len(), 1);
        assert_eq!(requests[0].req_pressure, 0);
        assert_eq!(requests[0].seq, 0);
        assert!(requests[0].verify(&authority));
    }

    #[test]
    fn prepare_requests_caps_at_entry_limit() {
        let mut authority = Authority::from_seed(2);
        let mut fe = service();
        let snapshot = PoolSnapshot { idle_jobs: jobs(10, 1), ..Default::default() };
        let requests = fe.prepare_requests(&mut authority, &snapshot, &[], 2_000);
        assert_eq!(requests[0].req_pressure, 8);
    }

    #[test]
    fn seq_advances_only_after_commit() {
        let mut authority = Authority::from_seed(2);
        let mut fe = service();
        let snap = PoolSnapshot::default();
        let first = fe.prepare_requests(&mut authority, &snap, &[], 2_000);
        assert_eq!(first[0].seq, 0);
        // mailbox was down: no commit, next cycle reuses seq 0
        let retry = fe.prepare_requests(&mut authority, &snap, &[], 4_000);
        assert_eq!(retry[0].seq, 0);
        fe.commit_seq("entry-a", 0);
        let next = fe.prepare_requests(&mut authority, &snap, &[], 6_000);
        assert_eq!(next[0].seq, 1);
    }

    #[test]
    fn credentials_refresh_near_expiry() {
        let mut authority = Authority::from_seed(2);
        let mut fe = service();
        fe.token_ttl_ms = 10_000;
        let snap = PoolSnapshot::default();
        let first = fe.prepare_requests(&mut authority, &snap, &[], 0);
        let first_expiry = first[0].credential.expires_at;
        assert_eq!(first_expiry, 10_000);
        // still fresh at 2 s; same token
        let second = fe.prepare_requests(&mut authority, &snap, &[], 2_000);
        assert_eq!(second[0].credential.expires_at, first_expiry);
        // 7 s in, less than two cycles of validity remain: refreshed
        let third = fe.prepare_requests(&mut authority, &snap, &[], 7_000);
        assert_eq!(third[0].credential.expires_at, 17_000);
        assert!(third[0].verify(&authority));
    }

    proptest! {
        #[test]
        fn no_waste_and_promptness_directions(
            idle in 0u64..200,
            busy in 0u64..20,
            total in 0u64..200,
        ) {
            let p = policy(8, 50, 100, 1.0);
            let (req, max_run) = compute_request(idle, busy, total, &p);
            prop_assert_eq!(req, max_run);
            if idle == 0 && busy == 0 {
                prop_assert_eq!(req, 0);
            }
            if idle > 0 && total < p.total_curb_glideins {
                prop_assert!(req > 0);
            }
            prop_assert!(req <= p.max_pressure_per_entry);
        }

        #[test]
        fn cap_invariance_above_the_limit(extra in 0u64..500) {
            let p = policy(8, 50, 100, 1.0);
            let at_cap = compute_request(8, 0, 0, &p);
            let beyond = compute_request(8 + extra, 0, 0, &p);
            prop_assert_eq!(at_cap, beyond);
        }
    }
}
