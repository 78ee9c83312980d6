//! The replayable, hashable trace of a run: an append-only list of
//! `(time, sequence_no, service, event_kind, payload)` entries. The log's
//! digest identifies a run; every metric is recomputable from it offline.

use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::canonical::canonical_bytes;
use crate::model::TimeMs;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub time: TimeMs,
    pub seq: u64,
    pub service: String,
    pub kind: String,
    pub payload: serde_json::Value,
}

#[derive(Debug, Error)]
pub enum EventLogError {
    #[error("malformed log entry at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Append-only event log with strictly increasing `(time, seq)`.
#[derive(Debug, Default, Clone)]
pub struct EventLog {
    entries: Vec<EventRecord>,
    next_seq: u64,
}

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append with the next sequence number. Hosts append in event order,
    /// which keeps `(time, seq)` strictly increasing for a live run.
    pub fn append(&mut self, time: TimeMs, service: &str, kind: &str, payload: serde_json::Value) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.entries.push(EventRecord {
            time,
            seq,
            service: service.to_string(),
            kind: kind.to_string(),
            payload,
        });
    }

    pub fn entries(&self) -> &[EventRecord] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Digest over the concatenated canonical entries; identifies a run.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        for entry in &self.entries {
            hasher.update(canonical_bytes(entry));
            hasher.update(b"\n");
        }
        hex::encode(hasher.finalize())
    }

    /// One canonical line per entry.
    pub fn write_to(&self, mut w: impl Write) -> io::Result<()> {
        for entry in &self.entries {
            w.write_all(&canonical_bytes(entry))?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_from(r: impl BufRead) -> Result<Self, EventLogError> {
        let mut entries = Vec::new();
        for (idx, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: EventRecord = serde_json::from_str(&line)
                .map_err(|e| EventLogError::Malformed { line: idx + 1, reason: e.to_string() })?;
            entries.push(entry);
        }
        let next_seq = entries.iter().map(|e| e.seq + 1).max().unwrap_or(0);
        Ok(Self { entries, next_seq })
    }

    /// Merge per-service logs into one trace ordered by
    /// `(time, service, seq)`.
    pub fn merge(logs: impl IntoIterator<Item = EventLog>) -> Self {
        let mut entries: Vec<EventRecord> = logs.into_iter().flat_map(|l| l.entries).collect();
        entries.sort_by(|a, b| {
            (a.time, &a.service, a.seq).cmp(&(b.time, &b.service, b.seq))
        });
        let next_seq = entries.len() as u64;
        Self { entries, next_seq }
    }
}

/// Buffer a service fills while handling one input; the host drains it into
/// the global log (simulation) or the service's log file (process mode).
#[derive(Debug, Default)]
pub struct Recorder {
    pub service: String,
    pending: Vec<(TimeMs, String, serde_json::Value)>,
}

impl Recorder {
    pub fn new(service: &str) -> Self {
        Self { service: service.to_string(), pending: Vec::new() }
    }

    pub fn record(&mut self, time: TimeMs, kind: &str, payload: serde_json::Value) {
        self.pending.push((time, kind.to_string(), payload));
    }

    pub fn drain(&mut self) -> Vec<(TimeMs, String, serde_json::Value)> {
        std::mem::take(&mut self.pending)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_stable_and_content_sensitive() {
        let mut a = EventLog::new();
        a.append(10, "factory", "cycle", serde_json::json!({"n": 1}));
        a.append(20, "ce", "cycle", serde_json::json!({"n": 2}));
        let mut b = EventLog::new();
        b.append(10, "factory", "cycle", serde_json::json!({"n": 1}));
        b.append(20, "ce", "cycle", serde_json::json!({"n": 2}));
        assert_eq!(a.hash(), b.hash());
        b.append(30, "ce", "cycle", serde_json::json!({"n": 3}));
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn file_round_trip() {
        let mut log = EventLog::new();
        log.append(5, "pool", "submitted", serde_json::json!({"subject": "job-000001"}));
        let mut buf = Vec::new();
        log.write_to(&mut buf).unwrap();
        let back = EventLog::read_from(buf.as_slice()).unwrap();
        assert_eq!(back.entries(), log.entries());
        assert_eq!(back.hash(), log.hash());
    }

    #[test]
    fn malformed_line_reports_position() {
        let data = b"{\"time\":1,\"seq\":0,\"service\":\"ce\",\"kind\":\"cycle\",\"payload\":{}}\nnot json\n";
        match EventLog::read_from(&data[..]) {
            Err(EventLogError::Malformed { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected malformed error, got {other:?}"),
        }
    }

    #[test]
    fn merge_orders_across_services() {
        let mut a = EventLog::new();
        a.append(10, "factory", "cycle", serde_json::json!({}));
        a.append(30, "factory", "cycle", serde_json::json!({}));
        let mut b = EventLog::new();
        b.append(20, "ce", "cycle", serde_json::json!({}));
        let merged = EventLog::merge([a, b]);
        let times: Vec<TimeMs> = merged.entries().iter().map(|e| e.time).collect();
        assert_eq!(times, vec![10, 20, 30]);
    }
}
