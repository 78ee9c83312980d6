//! The local token authority: issuing, verifying, refreshing, and the
//! rejection reasons each kind of bad token earns.
//!
//! ```bash
//! cargo run --example token_authority
//! ```

use glidemini::canonical::canonical_string;
use glidemini::credentials::{Authority, Scope};

fn main() {
    let mut authority = Authority::from_seed(2024);
    println!("authority fingerprint: {}", authority.fingerprint());

    let token = authority
        .issue_token("frontend-1", "ce-1.glideinwms.org", Scope::ComputeCreate, 3_600_000, 5_000)
        .unwrap();
    println!("token wire form: {}", canonical_string(&token));

    let subject = authority
        .verify_token(&token, "ce-1.glideinwms.org", Scope::ComputeCreate, 6_000)
        .unwrap();
    println!("verified inside the validity window: subject {subject}");

    // each defect earns its own rejection reason
    let outcomes = [
        (
            "at expiry (half-open window)",
            authority.verify_token(&token, "ce-1.glideinwms.org", Scope::ComputeCreate, 3_605_000),
        ),
        (
            "wrong audience",
            authority.verify_token(&token, "pool.glideinwms.org", Scope::ComputeCreate, 6_000),
        ),
        (
            "wrong scope",
            authority.verify_token(&token, "ce-1.glideinwms.org", Scope::JobSubmit, 6_000),
        ),
        (
            "before issue",
            authority.verify_token(&token, "ce-1.glideinwms.org", Scope::ComputeCreate, 1_000),
        ),
    ];
    for (label, outcome) in outcomes {
        match outcome {
            Ok(_) => println!("{label}: accepted"),
            Err(reason) => println!("{label}: rejected ({})", reason.reason()),
        }
    }

    let mut forged = token.clone();
    let mut sig = hex::decode(&forged.signature).unwrap();
    sig[0] ^= 0x01;
    forged.signature = hex::encode(sig);
    let reason = authority
        .verify_token(&forged, "ce-1.glideinwms.org", Scope::ComputeCreate, 6_000)
        .unwrap_err();
    println!("one flipped signature byte: rejected ({})", reason.reason());

    let renewed = authority.refresh_token(&token, 3_600_000, 3_604_000).unwrap();
    println!(
        "refreshed near expiry: now valid until {} s",
        renewed.expires_at as f64 / 1000.0
    );
}
