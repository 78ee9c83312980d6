//! The inter-service contract: message payloads, the signed line-oriented
//! envelope used in process mode, and the timer requests services hand back
//! to whichever host (simulation scheduler or process loop) drives them.
//!
//! One message per line, UTF-8, each line the canonical serialization of an
//! object with fields `{type, sender, seq, payload, signature}`. Unknown
//! types are rejected. The signature covers the canonical form of the other
//! four fields, so bit-exactness of the canonical encoding is load-bearing.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::canonical::canonical_bytes;
use crate::credentials::{Authority, Token};
use crate::mailbox::{FactoryStatusMessage, RequestMessage};
use crate::model::{GlideinEvent, ResourceSpec, TimeMs};

/// Where an outbound message is headed. The pool shares the frontend's
/// process and port, so pool-bound traffic routes to `Frontend`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dest {
    Ce,
    Factory,
    Frontend,
}

/// A job as submitted by a user (before the pool assigns it an id).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobSpec {
    pub owner: String,
    pub requirements: ResourceSpec,
    pub declared_runtime_ms: TimeMs,
    #[serde(default)]
    pub fail: bool,
}

/// The job information a glidein needs to carve a slot and run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobTicket {
    pub job_id: String,
    pub requirements: ResourceSpec,
    pub declared_runtime_ms: TimeMs,
    #[serde(default)]
    pub fail: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobOutcome {
    Completed,
    Failed,
}

/// Result of a claim attempt, reported back to the pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClaimResult {
    Accepted { slot_id: String, start_time: TimeMs, remaining: ResourceSpec },
    Refused { reason: String },
}

/// Snapshot of the pool, served to the frontend heuristic and the CLI.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct PoolSnapshot {
    pub job_counts: std::collections::BTreeMap<crate::model::JobState, u64>,
    pub idle_jobs: Vec<(String, ResourceSpec)>,
    pub running_jobs: Vec<(String, ResourceSpec)>,
    pub eps: Vec<EpView>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpView {
    pub glidein_id: String,
    pub remaining: ResourceSpec,
    pub retiring: bool,
}

/// Every message that crosses a service boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "payload")]
pub enum Payload {
    /// frontend -> factory: publish a provisioning request.
    #[serde(rename = "REQUEST_PUT")]
    RequestPut(RequestMessage),
    /// factory -> frontend: outcome of a REQUEST_PUT.
    #[serde(rename = "REQUEST_ACK")]
    RequestAck { entry_id: String, seq: u64, accepted: bool, reason: Option<String> },
    /// factory (or an operator tool) -> mailbox: publish an entry status.
    #[serde(rename = "STATUS_PUT")]
    StatusPut(FactoryStatusMessage),
    /// frontend/CLI -> factory: read the latest statuses.
    #[serde(rename = "STATUS_GET")]
    StatusGet,
    /// factory -> frontend/CLI: all entries' latest status.
    #[serde(rename = "STATUS_REPLY")]
    StatusReply { statuses: Vec<FactoryStatusMessage> },
    /// factory -> CE: submit a pilot under the client's credential.
    #[serde(rename = "GLIDEIN_SUBMIT")]
    GlideinSubmit { glidein_id: String, client_id: String, entry_id: String, credential: Token },
    /// factory -> CE: ask a pilot to drain and go away.
    #[serde(rename = "GLIDEIN_RETIRE")]
    GlideinRetire { glidein_id: String },
    /// CE -> factory: lifecycle notification for a pilot.
    #[serde(rename = "GLIDEIN_EVENT")]
    GlideinEvent {
        glidein_id: String,
        event: GlideinEvent,
        reason: Option<String>,
        detected: Option<ResourceSpec>,
        /// Cumulative jobs the pilot has run; feeds retirement selection.
        jobs_served: Option<u64>,
    },
    /// user/CLI -> pool: submit a job under a job.submit token.
    #[serde(rename = "JOB_SUBMIT")]
    JobSubmit { spec: JobSpec, credential: Token },
    /// pool -> user/CLI: outcome of a JOB_SUBMIT.
    #[serde(rename = "JOB_SUBMIT_ACK")]
    JobSubmitAck { job_id: Option<String>, reason: Option<String> },
    /// glidein -> pool: advertise a freshly registered execution point.
    #[serde(rename = "EP_REGISTER")]
    EpRegister { glidein_id: String, detected: ResourceSpec },
    /// glidein -> pool: periodic ad refresh.
    #[serde(rename = "EP_HEARTBEAT")]
    EpHeartbeat { glidein_id: String, remaining: ResourceSpec, retiring: bool },
    /// glidein -> pool: remove the ad on clean retirement.
    #[serde(rename = "EP_DEREGISTER")]
    EpDeregister { glidein_id: String },
    /// pool -> glidein (via its CE): run this job.
    #[serde(rename = "CLAIM")]
    Claim { glidein_id: String, job: JobTicket },
    /// glidein -> pool: claim outcome.
    #[serde(rename = "CLAIM_REPLY")]
    ClaimReply { glidein_id: String, job_id: String, result: ClaimResult },
    /// glidein -> pool: a slot finished.
    #[serde(rename = "EP_JOB_DONE")]
    JobDone {
        glidein_id: String,
        slot_id: String,
        job_id: String,
        start_time: TimeMs,
        end_time: TimeMs,
        outcome: JobOutcome,
        remaining: ResourceSpec,
    },
    /// CLI/frontend -> pool: snapshot request.
    #[serde(rename = "QUERY")]
    Query,
    /// pool -> CLI/frontend: snapshot reply.
    #[serde(rename = "QUERY_REPLY")]
    QueryReply { snapshot: PoolSnapshot },
    /// health check request/response.
    #[serde(rename = "PING")]
    Ping,
    #[serde(rename = "PONG")]
    Pong { service: String },
    /// orchestrator -> service: exit after acknowledging.
    #[serde(rename = "SHUTDOWN")]
    Shutdown,
    #[serde(rename = "OK")]
    Ok,
    /// generic rejection carrying a stable reason string.
    #[serde(rename = "ERROR")]
    Error { reason: String },
}

impl Payload {
    pub fn type_name(&self) -> &'static str {
        match self {
            Payload::RequestPut(_) => "REQUEST_PUT",
            Payload::RequestAck { .. } => "REQUEST_ACK",
            Payload::StatusPut(_) => "STATUS_PUT",
            Payload::StatusGet => "STATUS_GET",
            Payload::StatusReply { .. } => "STATUS_REPLY",
            Payload::GlideinSubmit { .. } => "GLIDEIN_SUBMIT",
            Payload::GlideinRetire { .. } => "GLIDEIN_RETIRE",
            Payload::GlideinEvent { .. } => "GLIDEIN_EVENT",
            Payload::JobSubmit { .. } => "JOB_SUBMIT",
            Payload::JobSubmitAck { .. } => "JOB_SUBMIT_ACK",
            Payload::EpRegister { .. } => "EP_REGISTER",
            Payload::EpHeartbeat { .. } => "EP_HEARTBEAT",
            Payload::EpDeregister { .. } => "EP_DEREGISTER",
            Payload::Claim { .. } => "CLAIM",
            Payload::ClaimReply { .. } => "CLAIM_REPLY",
            Payload::JobDone { .. } => "EP_JOB_DONE",
            Payload::Query => "QUERY",
            Payload::QueryReply { .. } => "QUERY_REPLY",
            Payload::Ping => "PING",
            Payload::Pong { .. } => "PONG",
            Payload::Shutdown => "SHUTDOWN",
            Payload::Ok => "OK",
            Payload::Error { .. } => "ERROR",
        }
    }
}

/// One wire line: a payload plus sender identity, per-sender sequence
/// number, and the envelope signature.
#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub sender: String,
    pub seq: u64,
    pub payload: Payload,
}

#[derive(Debug, Error)]
pub enum WireError {
    #[error("malformed line: {0}")]
    Malformed(String),
    #[error("unknown or missing message type")]
    UnknownType,
    #[error("bad envelope signature")]
    BadSignature,
}

impl Envelope {
    pub fn new(sender: impl Into<String>, seq: u64, payload: Payload) -> Self {
        Self { sender: sender.into(), seq, payload }
    }

    fn signing_value(&self) -> Value {
        let mut v = serde_json::to_value(&self.payload).expect("payload serializes");
        let obj = v.as_object_mut().expect("tagged enum is an object");
        obj.insert("sender".into(), Value::String(self.sender.clone()));
        obj.insert("seq".into(), Value::Number(self.seq.into()));
        // tagged enums without content (e.g. PING) omit the payload field;
        // normalize so every line carries all five keys
        obj.entry("payload").or_insert(Value::Null);
        v
    }

    /// Encode as one signed, newline-terminated line.
    pub fn to_line(&self, authority: &Authority) -> String {
        let mut v = self.signing_value();
        let signature = authority.sign_envelope(&canonical_bytes(&v));
        v.as_object_mut().unwrap().insert("signature".into(), Value::String(signature));
        let mut line = serde_json::to_string(&v).expect("canonical encoding");
        line.push('\n');
        line
    }

    /// Decode and verify one line.
    pub fn from_line(authority: &Authority, line: &str) -> Result<Envelope, WireError> {
        let mut v: Value =
            serde_json::from_str(line.trim_end()).map_err(|e| WireError::Malformed(e.to_string()))?;
        let obj = v.as_object_mut().ok_or_else(|| WireError::Malformed("not an object".into()))?;
        let signature = obj
            .remove("signature")
            .and_then(|s| s.as_str().map(str::to_string))
            .ok_or_else(|| WireError::Malformed("missing signature".into()))?;
        if !authority.verify_envelope(&canonical_bytes(&v), &signature) {
            return Err(WireError::BadSignature);
        }
        let obj = v.as_object_mut().unwrap();
        let sender = obj
            .remove("sender")
            .and_then(|s| s.as_str().map(str::to_string))
            .ok_or_else(|| WireError::Malformed("missing sender".into()))?;
        let seq = obj
            .remove("seq")
            .and_then(|s| s.as_u64())
            .ok_or_else(|| WireError::Malformed("missing seq".into()))?;
        if obj.get("payload") == Some(&Value::Null) {
            obj.remove("payload");
        }
        let payload: Payload = serde_json::from_value(v).map_err(|_| WireError::UnknownType)?;
        Ok(Envelope { sender, seq, payload })
    }
}

/// Wakeups a service asks its host to schedule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TimerKind {
    CeCycle,
    FactoryCycle,
    FrontendCycle,
    Negotiate,
    GlideinStart { glidein_id: String },
    GlideinPoll { glidein_id: String },
    SlotDone { glidein_id: String, slot_id: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Timer {
    pub at: TimeMs,
    pub kind: TimerKind,
}

/// What a service handler wants done after processing an input: messages to
/// other services and timers to schedule.
#[derive(Debug, Default)]
pub struct Effects {
    pub messages: Vec<(Dest, Payload)>,
    pub timers: Vec<Timer>,
}

impl Effects {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn send(&mut self, dest: Dest, payload: Payload) {
        self.messages.push((dest, payload));
    }

    pub fn schedule(&mut self, at: TimeMs, kind: TimerKind) {
        self.timers.push(Timer { at, kind });
    }

    pub fn merge(&mut self, other: Effects) {
        self.messages.extend(other.messages);
        self.timers.extend(other.timers);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn auth() -> Authority {
        Authority::from_seed(11)
    }

    #[test]
    fn line_round_trip() {
        let a = auth();
        let env = Envelope::new("cli", 1, Payload::Ping);
        let line = env.to_line(&a);
        assert!(line.ends_with('\n'));
        let back = Envelope::from_line(&a, &line).unwrap();
        assert_eq!(back, env);
    }

    #[test]
    fn unknown_type_rejected() {
        let a = auth();
        let mut v = serde_json::json!({"type": "FLY", "payload": null, "sender": "x", "seq": 0});
        let sig = a.sign_envelope(&canonical_bytes(&v));
        v.as_object_mut().unwrap().insert("signature".into(), sig.into());
        let line = serde_json::to_string(&v).unwrap();
        assert!(matches!(Envelope::from_line(&a, &line), Err(WireError::UnknownType)));
    }

    #[test]
    fn wrong_secret_rejected() {
        let a = auth();
        let line = Envelope::new("cli", 0, Payload::Query).to_line(&a);
        let other = Authority::from_seed(12);
        assert!(matches!(Envelope::from_line(&other, &line), Err(WireError::BadSignature)));
    }

    proptest! {
        #[test]
        fn tampering_any_byte_is_detected(flip in 0usize..500) {
            let a = auth();
            let env = Envelope::new(
                "frontend-1",
                7,
                Payload::EpHeartbeat {
                    glidein_id: "glidein-000001".into(),
                    remaining: ResourceSpec::new(4, 2048, 100, 0),
                    retiring: false,
                },
            );
            let line = env.to_line(&a);
            let bytes = line.trim_end().as_bytes();
            let idx = flip % bytes.len();
            let mut tampered = bytes.to_vec();
            tampered[idx] ^= 0x02;
            if let Ok(s) = String::from_utf8(tampered) {
                // canonical form has no insignificant bytes: any accepted
                // reparse must decode to the identical envelope
                if let Ok(e) = Envelope::from_line(&a, &s) {
                    prop_assert_eq!(e, env);
                }
            }
        }
    }
}
