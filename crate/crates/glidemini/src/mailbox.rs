//! The factory-hosted message exchange: clients publish provisioning
//! requests, the factory publishes per-entry glidein status. Latest-value
//! semantics per key, not a queue — a request is an idempotent desire, so
//! only the newest matters.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::canonical_bytes;
use crate::credentials::{Authority, Token};
use crate::model::{GlideinState, TimeMs};

/// Default staleness cutoff: a silent frontend fails safe toward zero new
/// submissions after this long.
pub const DEFAULT_REQUEST_TTL_MS: TimeMs = 60_000;

/// A client's provisioning desire for one entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestMessage {
    pub client_id: String,
    pub entry_id: String,
    pub seq: u64,
    /// Desired queued+running glideins at the entry.
    pub req_pressure: u64,
    /// Cap on glideins simultaneously in Running.
    pub req_max_run: u64,
    /// compute.create token whose audience is the entry's CE.
    pub credential: Token,
    pub sent_at: TimeMs,
    /// Envelope signature over the canonical form of all other fields.
    pub signature: String,
}

#[derive(Serialize)]
struct RequestSigningView<'a> {
    client_id: &'a str,
    entry_id: &'a str,
    seq: u64,
    req_pressure: u64,
    req_max_run: u64,
    credential: &'a Token,
    sent_at: TimeMs,
}

impl RequestMessage {
    fn signing_bytes(&self) -> Vec<u8> {
        canonical_bytes(&RequestSigningView {
            client_id: &self.client_id,
            entry_id: &self.entry_id,
            seq: self.seq,
            req_pressure: self.req_pressure,
            req_max_run: self.req_max_run,
            credential: &self.credential,
            sent_at: self.sent_at,
        })
    }

    pub fn sign(&mut self, authority: &Authority) {
        self.signature = authority.sign_envelope(&self.signing_bytes());
    }

    pub fn verify(&self, authority: &Authority) -> bool {
        authority.verify_envelope(&self.signing_bytes(), &self.signature)
    }
}

/// Per-entry glidein counts published by the factory each cycle, keyed by
/// client and state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactoryStatusMessage {
    pub entry_id: String,
    pub seq: u64,
    pub counts: BTreeMap<String, BTreeMap<GlideinState, u64>>,
    pub sent_at: TimeMs,
}

impl FactoryStatusMessage {
    /// This client's glideins currently holding pressure at the entry.
    pub fn pressure_for(&self, client_id: &str) -> u64 {
        self.counts
            .get(client_id)
            .map(|by_state| {
                by_state
                    .iter()
                    .filter(|(s, _)| s.counts_as_pressure())
                    .map(|(_, n)| n)
                    .sum()
            })
            .unwrap_or(0)
    }

    pub fn count_for(&self, client_id: &str, state: GlideinState) -> u64 {
        self.counts
            .get(client_id)
            .and_then(|by_state| by_state.get(&state))
            .copied()
            .unwrap_or(0)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MailboxError {
    #[error("bad-signature")]
    BadSignature,
    #[error("stale-sequence: seq {seq} <= stored {stored}")]
    StaleSequence { seq: u64, stored: u64 },
}

/// Latest-value store keyed by (client, entry) for requests and by entry for
/// statuses. Owned by the factory; all access is serialized by its loop.
#[derive(Default)]
pub struct Mailbox {
    requests: BTreeMap<(String, String), RequestMessage>,
    statuses: BTreeMap<String, FactoryStatusMessage>,
}

impl Mailbox {
    pub fn new() -> Self {
        Self::default()
    }

    /// Store a request iff its envelope verifies and its sequence number
    /// advances past the stored one for the same (client, entry).
    pub fn put_request(
        &mut self,
        authority: &Authority,
        msg: RequestMessage,
    ) -> Result<(), MailboxError> {
        if !msg.verify(authority) {
            return Err(MailboxError::BadSignature);
        }
        let key = (msg.client_id.clone(), msg.entry_id.clone());
        if let Some(stored) = self.requests.get(&key) {
            if msg.seq <= stored.seq {
                return Err(MailboxError::StaleSequence { seq: msg.seq, stored: stored.seq });
            }
        }
        self.requests.insert(key, msg);
        Ok(())
    }

    /// Fresh requests for one entry, at most one per client, ordered by
    /// client id. Requests older than `ttl_ms` are dropped from the box.
    pub fn fetch_requests(
        &mut self,
        entry_id: &str,
        now: TimeMs,
        ttl_ms: TimeMs,
    ) -> Vec<RequestMessage> {
        let stale: Vec<(String, String)> = self
            .requests
            .iter()
            .filter(|((_, e), msg)| e == entry_id && now.saturating_sub(msg.sent_at) > ttl_ms)
            .map(|(k, _)| k.clone())
            .collect();
        for key in stale {
            self.requests.remove(&key);
        }
        self.requests
            .iter()
            .filter(|((_, e), _)| e == entry_id)
            .map(|(_, msg)| msg.clone())
            .collect()
    }

    /// Retain the latest status per entry.
    pub fn publish_status(&mut self, status: FactoryStatusMessage) {
        self.statuses.insert(status.entry_id.clone(), status);
    }

    /// Latest status for every entry, ordered by entry id.
    pub fn fetch_status(&self) -> Vec<FactoryStatusMessage> {
        self.statuses.values().cloned().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::credentials::Scope;

    fn setup() -> (Authority, Token) {
        let mut auth = Authority::from_seed(3);
        let tok = auth
            .issue_token("frontend-1", "ce-1.glideinwms.org", Scope::ComputeCreate, 3_600_000, 0)
            .unwrap();
        (auth, tok)
    }

    fn request(auth: &Authority, tok: &Token, seq: u64, sent_at: TimeMs) -> RequestMessage {
        let mut msg = RequestMessage {
            client_id: "frontend-1".into(),
            entry_id: "entry-a".into(),
            seq,
            req_pressure: 5,
            req_max_run: 5,
            credential: tok.clone(),
            sent_at,
            signature: String::new(),
        };
        msg.sign(auth);
        msg
    }

    #[test]
    fn put_enforces_sequence_monotonicity() {
        let (auth, tok) = setup();
        let mut mbox = Mailbox::new();
        mbox.put_request(&auth, request(&auth, &tok, 0, 0)).unwrap();
        assert_eq!(
            mbox.put_request(&auth, request(&auth, &tok, 0, 1)),
            Err(MailboxError::StaleSequence { seq: 0, stored: 0 })
        );
        mbox.put_request(&auth, request(&auth, &tok, 3, 2)).unwrap();
        mbox.put_request(&auth, request(&auth, &tok, 5, 3)).unwrap();
        let fetched = mbox.fetch_requests("entry-a", 4, 60_000);
        assert_eq!(fetched.len(), 1);
        assert_eq!(fetched[0].seq, 5);
    }

    #[test]
    fn put_rejects_tampered_envelope() {
        let (auth, tok) = setup();
        let mut mbox = Mailbox::new();
        let mut msg = request(&auth, &tok, 0, 0);
        msg.req_pressure = 999; // mutate after signing
        assert_eq!(mbox.put_request(&auth, msg), Err(MailboxError::BadSignature));
        assert!(mbox.fetch_requests("entry-a", 0, 60_000).is_empty());
    }

    #[test]
    fn fetch_purges_stale_requests() {
        let (auth, tok) = setup();
        let mut mbox = Mailbox::new();
        mbox.put_request(&auth, request(&auth, &tok, 0, 0)).unwrap();
        let fetched = mbox.fetch_requests("entry-a", 100_000, 60_000);
        assert!(fetched.is_empty());
        // a later fetch at an early time still finds nothing: it was purged
        assert!(mbox.fetch_requests("entry-a", 1_000, 60_000).is_empty());
    }

    #[test]
    fn fetch_orders_by_client_id() {
        let (mut auth, _) = setup();
        let tok_b = auth
            .issue_token("a-client", "ce-1.glideinwms.org", Scope::ComputeCreate, 3_600_000, 0)
            .unwrap();
        let tok_a = auth
            .issue_token("frontend-1", "ce-1.glideinwms.org", Scope::ComputeCreate, 3_600_000, 0)
            .unwrap();
        let mut mbox = Mailbox::new();
        mbox.put_request(&auth, request(&auth, &tok_a, 0, 0)).unwrap();
        let mut other = RequestMessage {
            client_id: "a-client".into(),
            entry_id: "entry-a".into(),
            seq: 0,
            req_pressure: 1,
            req_max_run: 1,
            credential: tok_b,
            sent_at: 0,
            signature: String::new(),
        };
        other.sign(&auth);
        mbox.put_request(&auth, other).unwrap();
        let fetched = mbox.fetch_requests("entry-a", 1, 60_000);
        assert_eq!(fetched.len(), 2);
        assert_eq!(fetched[0].client_id, "a-client");
        assert_eq!(fetched[1].client_id, "frontend-1");
    }

    #[test]
    fn status_latest_wins_and_orders_by_entry() {
        let mut mbox = Mailbox::new();
        assert!(mbox.fetch_status().is_empty());
        for (entry, seq) in [("entry-b", 1), ("entry-a", 1), ("entry-b", 2)] {
            mbox.publish_status(FactoryStatusMessage {
                entry_id: entry.into(),
                seq,
                counts: BTreeMap::new(),
                sent_at: seq,
            });
        }
        let statuses = mbox.fetch_status();
        assert_eq!(statuses.len(), 2);
        assert_eq!(statuses[0].entry_id, "entry-a");
        assert_eq!(statuses[1].entry_id, "entry-b");
        assert_eq!(statuses[1].seq, 2);
    }
}
