//! Audit trail: the closed verb set every service records transitions with,
//! final-state reconstruction from those records, the per-pilot waste
//! metric, and the run-level metrics report derived purely from a log.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::events::{EventLog, EventRecord, Recorder};
use crate::model::{GlideinState, JobState, TimeMs};

pub const JOB_ID_PREFIX: &str = "job-";
pub const GLIDEIN_ID_PREFIX: &str = "glidein-";

/// The closed verb set. Downstream tooling never parses free text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditVerb {
    Submitted,
    Queued,
    Assigned,
    Validated,
    Registered,
    Claimed,
    Started,
    Completed,
    Failed,
    Retiring,
    Done,
    RejectedAuth,
}

impl AuditVerb {
    pub const ALL: [AuditVerb; 12] = [
        AuditVerb::Submitted,
        AuditVerb::Queued,
        AuditVerb::Assigned,
        AuditVerb::Validated,
        AuditVerb::Registered,
        AuditVerb::Claimed,
        AuditVerb::Started,
        AuditVerb::Completed,
        AuditVerb::Failed,
        AuditVerb::Retiring,
        AuditVerb::Done,
        AuditVerb::RejectedAuth,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            AuditVerb::Submitted => "submitted",
            AuditVerb::Queued => "queued",
            AuditVerb::Assigned => "assigned",
            AuditVerb::Validated => "validated",
            AuditVerb::Registered => "registered",
            AuditVerb::Claimed => "claimed",
            AuditVerb::Started => "started",
            AuditVerb::Completed => "completed",
            AuditVerb::Failed => "failed",
            AuditVerb::Retiring => "retiring",
            AuditVerb::Done => "done",
            AuditVerb::RejectedAuth => "rejected_auth",
        }
    }

    pub fn parse(s: &str) -> Result<AuditVerb, UnknownVerb> {
        Self::ALL
            .iter()
            .find(|v| v.as_str() == s)
            .copied()
            .ok_or_else(|| UnknownVerb(s.to_string()))
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown-verb: {0}")]
pub struct UnknownVerb(pub String);

/// Append one audit record to a service's pending records.
pub fn emit(recorder: &mut Recorder, time: TimeMs, verb: AuditVerb, subject: &str, detail: Value) {
    recorder.record(time, verb.as_str(), json!({ "subject": subject, "detail": detail }));
}

/// Same, but from an untrusted verb string; rejects verbs outside the set.
pub fn emit_raw(
    recorder: &mut Recorder,
    time: TimeMs,
    verb: &str,
    subject: &str,
    detail: Value,
) -> Result<(), UnknownVerb> {
    let verb = AuditVerb::parse(verb)?;
    emit(recorder, time, verb, subject, detail);
    Ok(())
}

/// View of one audit record pulled out of the event log.
#[derive(Debug, Clone)]
pub struct AuditView<'a> {
    pub time: TimeMs,
    pub service: &'a str,
    pub verb: AuditVerb,
    pub subject: &'a str,
    pub detail: &'a Value,
}

/// Extract the audit records (entries whose kind is a closed-set verb).
pub fn audit_records(log: &EventLog) -> Vec<AuditView<'_>> {
    log.entries().iter().filter_map(view_of).collect()
}

fn view_of(entry: &EventRecord) -> Option<AuditView<'_>> {
    let verb = AuditVerb::parse(&entry.kind).ok()?;
    let subject = entry.payload.get("subject")?.as_str()?;
    let detail = entry.payload.get("detail").unwrap_or(&Value::Null);
    Some(AuditView { time: entry.time, service: &entry.service, verb, subject, detail })
}

/// Job/glidein states implied by each verb, used to rebuild final states
/// from the audit trail alone.
fn job_state_for(verb: AuditVerb) -> Option<JobState> {
    match verb {
        AuditVerb::Submitted | AuditVerb::Queued => Some(JobState::Idle),
        AuditVerb::Assigned => Some(JobState::Matched),
        AuditVerb::Started => Some(JobState::Running),
        AuditVerb::Completed => Some(JobState::Completed),
        AuditVerb::Failed => Some(JobState::Failed),
        _ => None,
    }
}

fn glidein_state_for(verb: AuditVerb) -> Option<GlideinState> {
    match verb {
        AuditVerb::Submitted => Some(GlideinState::Submitted),
        AuditVerb::Queued => Some(GlideinState::Queued),
        AuditVerb::Assigned => Some(GlideinState::Starting),
        AuditVerb::Registered => Some(GlideinState::Registered),
        AuditVerb::Claimed => Some(GlideinState::Running),
        AuditVerb::Retiring => Some(GlideinState::Retiring),
        AuditVerb::Done => Some(GlideinState::Done),
        AuditVerb::Failed => Some(GlideinState::Failed),
        AuditVerb::Validated | AuditVerb::Started | AuditVerb::Completed
        | AuditVerb::RejectedAuth => None,
    }
}

/// Rebuild every entity's final state by replaying only audit records.
pub fn replay_final_states(
    log: &EventLog,
) -> (BTreeMap<String, JobState>, BTreeMap<String, GlideinState>) {
    let mut jobs = BTreeMap::new();
    let mut glideins = BTreeMap::new();
    for rec in audit_records(log) {
        if rec.verb == AuditVerb::RejectedAuth {
            continue;
        }
        if rec.subject.starts_with(JOB_ID_PREFIX) {
            if let Some(state) = job_state_for(rec.verb) {
                jobs.insert(rec.subject.to_string(), state);
            }
        } else if rec.subject.starts_with(GLIDEIN_ID_PREFIX) {
            if let Some(state) = glidein_state_for(rec.verb) {
                glideins.insert(rec.subject.to_string(), state);
            }
        }
    }
    (jobs, glideins)
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WasteError {
    #[error("glidein {0} not found in log")]
    Unknown(String),
    #[error("glidein {0} has not reached a terminal state")]
    NotTerminal(String),
}

/// Life summary of one glidein, parsed out of a log.
#[derive(Debug, Clone, Default)]
pub struct GlideinTrace {
    pub submitted_at: Option<TimeMs>,
    pub registered_at: Option<TimeMs>,
    pub terminal: Option<(GlideinState, TimeMs)>,
    /// Closed slot occupancy intervals, from the pool's job completion
    /// records.
    pub slot_intervals: Vec<(TimeMs, TimeMs)>,
    pub retirement_reason: Option<String>,
}

impl GlideinTrace {
    /// Measure of the union of slot intervals: time with at least one
    /// active slot.
    pub fn busy_ms(&self) -> TimeMs {
        let mut intervals = self.slot_intervals.clone();
        intervals.sort_unstable();
        let mut total = 0;
        let mut cur: Option<(TimeMs, TimeMs)> = None;
        for (s, e) in intervals {
            match cur {
                Some((cs, ce)) if s <= ce => cur = Some((cs, ce.max(e))),
                Some((cs, ce)) => {
                    total += ce - cs;
                    cur = Some((s, e));
                }
                None => cur = Some((s, e)),
            }
        }
        if let Some((cs, ce)) = cur {
            total += ce - cs;
        }
        total
    }

    /// Idle time attributable to the pilot itself: wall time from its first
    /// claim (or registration, if it never ran a job) to its terminal state,
    /// minus time spent with at least one active slot. Provisioning and
    /// matchmaking delays are reported separately as startup time, not
    /// counted as waste. Pilots that fail before registering report 0.
    pub fn waste_ms(&self) -> Option<TimeMs> {
        let (_, terminal_at) = self.terminal?;
        let anchor = match self.slot_intervals.iter().map(|(s, _)| *s).min() {
            Some(first_claim) => first_claim,
            None => match self.registered_at {
                Some(t) => t,
                None => return Some(0),
            },
        };
        Some(terminal_at.saturating_sub(anchor).saturating_sub(self.busy_ms()))
    }
}

/// Parse per-glidein traces out of a log.
pub fn glidein_traces(log: &EventLog) -> BTreeMap<String, GlideinTrace> {
    let mut traces: BTreeMap<String, GlideinTrace> = BTreeMap::new();
    for rec in audit_records(log) {
        if rec.subject.starts_with(GLIDEIN_ID_PREFIX) {
            let trace = traces.entry(rec.subject.to_string()).or_default();
            match rec.verb {
                AuditVerb::Submitted => trace.submitted_at = Some(rec.time),
                AuditVerb::Registered if trace.registered_at.is_none() => {
                    trace.registered_at = Some(rec.time)
                }
                AuditVerb::Done => {
                    trace.terminal = Some((GlideinState::Done, rec.time));
                    trace.retirement_reason = rec
                        .detail
                        .get("reason")
                        .and_then(|r| r.as_str())
                        .map(str::to_string);
                }
                AuditVerb::Failed => trace.terminal = Some((GlideinState::Failed, rec.time)),
                _ => {}
            }
        } else if rec.subject.starts_with(JOB_ID_PREFIX)
            && matches!(rec.verb, AuditVerb::Completed | AuditVerb::Failed)
        {
            if let (Some(gid), Some(start), Some(end)) = (
                rec.detail.get("glidein_id").and_then(|v| v.as_str()),
                rec.detail.get("start_time").and_then(|v| v.as_u64()),
                rec.detail.get("end_time").and_then(|v| v.as_u64()),
            ) {
                traces.entry(gid.to_string()).or_default().slot_intervals.push((start, end));
            }
        }
    }
    traces
}

/// Idle milliseconds attributable to one terminal glidein.
pub fn waste(log: &EventLog, glidein_id: &str) -> Result<TimeMs, WasteError> {
    let traces = glidein_traces(log);
    let trace = traces.get(glidein_id).ok_or_else(|| WasteError::Unknown(glidein_id.into()))?;
    trace.waste_ms().ok_or_else(|| WasteError::NotTerminal(glidein_id.into()))
}

/// Aggregated run metrics, all derived from the event log.
#[derive(Debug, Clone, Default, Serialize)]
pub struct MetricsReport {
    pub jobs_submitted: u64,
    pub jobs_completed: u64,
    pub jobs_failed: u64,
    pub jobs_removed: u64,
    /// Last execution end minus first submission arrival; 0 with no
    /// completed jobs.
    pub makespan_ms: TimeMs,
    pub total_glideins: u64,
    pub glideins_by_terminal_state: BTreeMap<GlideinState, u64>,
    pub per_glidein: BTreeMap<String, GlideinMetrics>,
    pub auth_failures: u64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct GlideinMetrics {
    pub busy_ms: TimeMs,
    pub idle_ms: TimeMs,
    /// Submission to registration; provisioning cost, kept out of idle_ms.
    pub startup_ms: TimeMs,
    pub jobs_served: u64,
    pub terminal_state: Option<GlideinState>,
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("malformed log entry: {0}")]
    Malformed(String),
}

/// Derive the metrics report from a log. Pure: recomputing on the same log
/// yields the identical report.
pub fn metrics_report(log: &EventLog) -> Result<MetricsReport, MetricsError> {
    let mut report = MetricsReport::default();
    let mut first_submit: Option<TimeMs> = None;
    let mut last_end: Option<TimeMs> = None;
    for rec in audit_records(log) {
        if rec.subject.starts_with(JOB_ID_PREFIX) {
            match rec.verb {
                AuditVerb::Submitted => {
                    report.jobs_submitted += 1;
                    first_submit = Some(first_submit.map_or(rec.time, |t| t.min(rec.time)));
                }
                AuditVerb::Completed | AuditVerb::Failed => {
                    let end = rec
                        .detail
                        .get("end_time")
                        .and_then(|v| v.as_u64())
                        .ok_or_else(|| {
                            MetricsError::Malformed(format!(
                                "{} record for {} lacks end_time",
                                rec.verb.as_str(),
                                rec.subject
                            ))
                        })?;
                    last_end = Some(last_end.map_or(end, |t| t.max(end)));
                    if rec.verb == AuditVerb::Completed {
                        report.jobs_completed += 1;
                    } else {
                        report.jobs_failed += 1;
                    }
                }
                _ => {}
            }
        }
        if rec.verb == AuditVerb::RejectedAuth {
            report.auth_failures += 1;
        }
    }
    if let (Some(first), Some(last)) = (first_submit, last_end) {
        report.makespan_ms = last.saturating_sub(first);
    }
    for (gid, trace) in glidein_traces(log) {
        report.total_glideins += 1;
        if let Some((state, _)) = trace.terminal {
            *report.glideins_by_terminal_state.entry(state).or_insert(0) += 1;
        }
        let startup_ms = match (trace.submitted_at, trace.registered_at) {
            (Some(s), Some(r)) => r.saturating_sub(s),
            _ => 0,
        };
        report.per_glidein.insert(
            gid,
            GlideinMetrics {
                busy_ms: trace.busy_ms(),
                idle_ms: trace.waste_ms().unwrap_or(0),
                startup_ms,
                jobs_served: trace.slot_intervals.len() as u64,
                terminal_state: trace.terminal.map(|(s, _)| s),
            },
        );
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn glidein_log(
        registered_at: TimeMs,
        intervals: &[(TimeMs, TimeMs)],
        done_at: Option<TimeMs>,
    ) -> EventLog {
        let mut log = EventLog::new();
        let gid = "glidein-000001";
        log.append(
            0,
            "factory",
            "submitted",
            json!({"subject": gid, "detail": {"entry_id": "e", "client_id": "c"}}),
        );
        log.append(registered_at, "glidein", "registered", json!({"subject": gid, "detail": {}}));
        for (i, (s, e)) in intervals.iter().enumerate() {
            let job = format!("job-{:06}", i + 1);
            log.append(0, "pool", "submitted", json!({"subject": job, "detail": {}}));
            log.append(*s, "pool", "started", json!({"subject": job, "detail": {"glidein_id": gid}}));
            log.append(
                *e,
                "pool",
                "completed",
                json!({"subject": job, "detail": {"glidein_id": gid, "slot_id": "slot-1", "start_time": s, "end_time": e}}),
            );
        }
        if let Some(t) = done_at {
            log.append(t, "glidein", "retiring", json!({"subject": gid, "detail": {"reason": "idle-timeout"}}));
            log.append(t, "glidein", "done", json!({"subject": gid, "detail": {"reason": "idle-timeout"}}));
        }
        log
    }

    #[test]
    fn verb_set_is_closed() {
        assert_eq!(AuditVerb::parse("registered").unwrap(), AuditVerb::Registered);
        assert_eq!(AuditVerb::parse("paused"), Err(UnknownVerb("paused".into())));
        let mut rec = Recorder::new("ce");
        assert!(emit_raw(&mut rec, 0, "queued", "glidein-000001", json!({})).is_ok());
        assert!(emit_raw(&mut rec, 0, "paused", "glidein-000001", json!({})).is_err());
        assert_eq!(rec.drain().len(), 1);
    }

    #[test]
    fn emit_appends_in_order() {
        let mut rec = Recorder::new("glidein");
        emit(&mut rec, 1, AuditVerb::Registered, "glidein-000001", json!({}));
        emit(&mut rec, 2, AuditVerb::Claimed, "glidein-000001", json!({"job_id": "job-000001"}));
        let drained = rec.drain();
        assert_eq!(drained.len(), 2);
        assert_eq!(drained[0].1, "registered");
        assert_eq!(drained[1].1, "claimed");
    }

    #[test]
    fn waste_counts_idle_after_first_claim() {
        // registered at 10 s, one job [12 s, 22 s], done at 30 s: the 2 s
        // matchmaking gap before the first claim is startup, not waste, so
        // idle time is the 8 s tail.
        let log = glidein_log(10_000, &[(12_000, 22_000)], Some(30_000));
        assert_eq!(waste(&log, "glidein-000001"), Ok(8_000));
    }

    #[test]
    fn waste_for_jobless_glidein_runs_from_registration() {
        let log = glidein_log(10_000, &[], Some(42_000));
        assert_eq!(waste(&log, "glidein-000001"), Ok(32_000));
    }

    #[test]
    fn waste_zero_for_validation_failures() {
        let mut log = EventLog::new();
        log.append(0, "factory", "submitted", json!({"subject": "glidein-000001", "detail": {}}));
        log.append(5_000, "ce", "failed", json!({"subject": "glidein-000001", "detail": {"reason": "validation"}}));
        assert_eq!(waste(&log, "glidein-000001"), Ok(0));
    }

    #[test]
    fn waste_requires_terminal_state() {
        let log = glidein_log(10_000, &[(12_000, 22_000)], None);
        assert_eq!(
            waste(&log, "glidein-000001"),
            Err(WasteError::NotTerminal("glidein-000001".into()))
        );
        assert_eq!(waste(&log, "glidein-000099"), Err(WasteError::Unknown("glidein-000099".into())));
    }

    #[test]
    fn busy_union_merges_overlapping_slots() {
        let log = glidein_log(0, &[(10_000, 20_000), (12_000, 18_000), (25_000, 30_000)], Some(60_000));
        let report = metrics_report(&log).unwrap();
        let gm = &report.per_glidein["glidein-000001"];
        assert_eq!(gm.busy_ms, 15_000);
        assert_eq!(gm.jobs_served, 3);
        // waste = (60 − 10) − 15 = 35 s
        assert_eq!(gm.idle_ms, 35_000);
    }

    #[test]
    fn metrics_report_is_pure() {
        let log = glidein_log(8_000, &[(10_000, 20_000)], Some(52_000));
        let a = metrics_report(&log).unwrap();
        let b = metrics_report(&log).unwrap();
        assert_eq!(
            serde_json::to_value(&a).unwrap(),
            serde_json::to_value(&b).unwrap()
        );
        assert_eq!(a.jobs_completed, 1);
        assert_eq!(a.makespan_ms, 20_000);
        assert_eq!(a.glideins_by_terminal_state[&GlideinState::Done], 1);
    }

    #[test]
    fn empty_log_zero_report() {
        let report = metrics_report(&EventLog::new()).unwrap();
        assert_eq!(report.jobs_submitted, 0);
        assert_eq!(report.makespan_ms, 0);
        assert!(report.per_glidein.is_empty());
    }

    #[test]
    fn replay_reconstructs_final_states() {
        let log = glidein_log(8_000, &[(10_000, 20_000)], Some(52_000));
        let (jobs, glideins) = replay_final_states(&log);
        assert_eq!(jobs["job-000001"], JobState::Completed);
        assert_eq!(glideins["glidein-000001"], GlideinState::Done);
    }
}
