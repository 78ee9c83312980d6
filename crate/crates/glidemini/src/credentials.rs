//! Local token authority: issues, refreshes, and verifies scoped bearer
//! tokens, and signs the envelopes exchanged through the factory mailbox.
//!
//! One shared secret per topology plays the role a CA plus token issuer
//! would in a real deployment. Every service reads the secret from the
//! shared secret directory; verification is a keyed-hash recomputation.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use hmac::{Hmac, Mac};
use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use thiserror::Error;

use crate::canonical::canonical_bytes;
use crate::model::TimeMs;

pub const SECRET_LEN: usize = 32;
pub const SECRET_FILE: &str = "authority.key";

type HmacSha256 = Hmac<Sha256>;

/// The three actions the system authorizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scope {
    #[serde(rename = "compute.create")]
    ComputeCreate,
    #[serde(rename = "job.submit")]
    JobSubmit,
    #[serde(rename = "mailbox.write")]
    MailboxWrite,
}

/// A scoped, audience-bound, expiring bearer token.
///
/// The signature is a keyed hash over the canonical serialization of all
/// other fields; validity is the half-open interval
/// `[issued_at, expires_at)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub subject: String,
    pub audience: String,
    pub scope: Scope,
    pub issued_at: TimeMs,
    pub expires_at: TimeMs,
    pub signature: String,
}

#[derive(Serialize)]
struct TokenSigningView<'a> {
    subject: &'a str,
    audience: &'a str,
    scope: Scope,
    issued_at: TimeMs,
    expires_at: TimeMs,
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum VerifyError {
    #[error("bad-signature")]
    BadSignature,
    #[error("wrong-audience")]
    WrongAudience,
    #[error("wrong-scope")]
    WrongScope,
    #[error("expired")]
    Expired,
    #[error("not-yet-valid")]
    NotYetValid,
}

impl VerifyError {
    /// Stable identifier used in audit records and wire rejections.
    pub fn reason(&self) -> &'static str {
        match self {
            VerifyError::BadSignature => "bad-signature",
            VerifyError::WrongAudience => "wrong-audience",
            VerifyError::WrongScope => "wrong-scope",
            VerifyError::Expired => "expired",
            VerifyError::NotYetValid => "not-yet-valid",
        }
    }
}

#[derive(Debug, Error)]
pub enum AuthorityError {
    #[error("ttl must be positive")]
    NonPositiveTtl,
    #[error("secret file {path}: {source}")]
    SecretIo { path: PathBuf, source: io::Error },
    #[error("secret file {path} is corrupt: expected {expected} bytes, found {found}")]
    CorruptSecret { path: PathBuf, expected: usize, found: usize },
}

/// Issuance log entry kept for auditing who was granted what.
#[derive(Debug, Clone, Serialize)]
pub struct IssuedEntry {
    pub subject: String,
    pub audience: String,
    pub scope: Scope,
    pub expires_at: TimeMs,
}

/// The token authority: a shared secret plus an append-only issuance log.
pub struct Authority {
    secret: Vec<u8>,
    issued_log: Vec<IssuedEntry>,
}

impl Authority {
    pub fn from_secret(secret: Vec<u8>) -> Self {
        Self { secret, issued_log: Vec::new() }
    }

    /// Deterministic authority for simulation runs.
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut secret = vec![0u8; SECRET_LEN];
        rng.fill_bytes(&mut secret);
        Self::from_secret(secret)
    }

    pub fn secret(&self) -> &[u8] {
        &self.secret
    }

    /// Short identifier for the secret, safe to log.
    pub fn fingerprint(&self) -> String {
        use sha2::Digest;
        let digest = Sha256::digest(&self.secret);
        hex::encode(&digest[..8])
    }

    pub fn issued_log(&self) -> &[IssuedEntry] {
        &self.issued_log
    }

    fn mac_hex(&self, bytes: &[u8]) -> String {
        let mut mac = HmacSha256::new_from_slice(&self.secret).expect("any key length works");
        mac.update(bytes);
        hex::encode(mac.finalize().into_bytes())
    }

    /// Issue a token valid for `ttl_ms` starting at `now`.
    pub fn issue_token(
        &mut self,
        subject: &str,
        audience: &str,
        scope: Scope,
        ttl_ms: TimeMs,
        now: TimeMs,
    ) -> Result<Token, AuthorityError> {
        if ttl_ms == 0 {
            return Err(AuthorityError::NonPositiveTtl);
        }
        let expires_at = now + ttl_ms;
        let view = TokenSigningView {
            subject,
            audience,
            scope,
            issued_at: now,
            expires_at,
        };
        let signature = self.mac_hex(&canonical_bytes(&view));
        self.issued_log.push(IssuedEntry {
            subject: subject.to_string(),
            audience: audience.to_string(),
            scope,
            expires_at,
        });
        Ok(Token {
            subject: subject.to_string(),
            audience: audience.to_string(),
            scope,
            issued_at: now,
            expires_at,
            signature,
        })
    }

    /// Check signature, audience, scope, and freshness, in that order.
    pub fn verify_token(
        &self,
        token: &Token,
        expected_audience: &str,
        required_scope: Scope,
        now: TimeMs,
    ) -> Result<String, VerifyError> {
        self.check_token_signature(token)?;
        if token.audience != expected_audience {
            return Err(VerifyError::WrongAudience);
        }
        if token.scope != required_scope {
            return Err(VerifyError::WrongScope);
        }
        if now < token.issued_at {
            return Err(VerifyError::NotYetValid);
        }
        if now >= token.expires_at {
            return Err(VerifyError::Expired);
        }
        Ok(token.subject.clone())
    }

    fn check_token_signature(&self, token: &Token) -> Result<(), VerifyError> {
        let view = TokenSigningView {
            subject: &token.subject,
            audience: &token.audience,
            scope: token.scope,
            issued_at: token.issued_at,
            expires_at: token.expires_at,
        };
        let expected = self.mac_hex(&canonical_bytes(&view));
        if constant_time_eq(expected.as_bytes(), token.signature.as_bytes()) {
            Ok(())
        } else {
            Err(VerifyError::BadSignature)
        }
    }

    /// Re-issue a token with the same subject/audience/scope and a fresh
    /// expiry. The old token only needs a valid signature, not freshness.
    pub fn refresh_token(
        &mut self,
        token: &Token,
        ttl_ms: TimeMs,
        now: TimeMs,
    ) -> Result<Token, RefreshError> {
        self.check_token_signature(token).map_err(RefreshError::Verify)?;
        let subject = token.subject.clone();
        let audience = token.audience.clone();
        self.issue_token(&subject, &audience, token.scope, ttl_ms, now)
            .map_err(RefreshError::Authority)
    }

    /// Keyed hash over canonical payload bytes; the mailbox envelope seal.
    pub fn sign_envelope(&self, payload_canonical: &[u8]) -> String {
        self.mac_hex(payload_canonical)
    }

    pub fn verify_envelope(&self, payload_canonical: &[u8], signature: &str) -> bool {
        constant_time_eq(self.mac_hex(payload_canonical).as_bytes(), signature.as_bytes())
    }
}

#[derive(Debug, Error)]
pub enum RefreshError {
    #[error(transparent)]
    Verify(VerifyError),
    #[error(transparent)]
    Authority(AuthorityError),
}

fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    if a.len() != b.len() {
        return false;
    }
    let mut diff = 0u8;
    for (x, y) in a.iter().zip(b.iter()) {
        diff |= x ^ y;
    }
    diff == 0
}

/// Create or load the shared secret under `secret_dir`.
///
/// A fresh directory gets a new secret (deterministic when `seed` is given);
/// an existing secret is loaded byte-identically. The file is owner-only.
pub fn init_authority(secret_dir: &Path, seed: Option<u64>) -> Result<Authority, AuthorityError> {
    let path = secret_dir.join(SECRET_FILE);
    if path.exists() {
        let bytes = fs::read(&path)
            .map_err(|source| AuthorityError::SecretIo { path: path.clone(), source })?;
        if bytes.len() != SECRET_LEN {
            return Err(AuthorityError::CorruptSecret {
                path,
                expected: SECRET_LEN,
                found: bytes.len(),
            });
        }
        return Ok(Authority::from_secret(bytes));
    }
    fs::create_dir_all(secret_dir)
        .map_err(|source| AuthorityError::SecretIo { path: secret_dir.to_path_buf(), source })?;
    let mut secret = vec![0u8; SECRET_LEN];
    match seed {
        Some(seed) => {
            rand_chacha::ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut secret);
        }
        None => rand::thread_rng().fill_bytes(&mut secret),
    }
    fs::write(&path, &secret)
        .map_err(|source| AuthorityError::SecretIo { path: path.clone(), source })?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        fs::set_permissions(&path, fs::Permissions::from_mode(0o600))
            .map_err(|source| AuthorityError::SecretIo { path: path.clone(), source })?;
    }
    Ok(Authority::from_secret(secret))
}
