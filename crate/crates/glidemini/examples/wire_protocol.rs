//! The line protocol services speak in process mode: one signed canonical
//! JSON object per line. Tampered lines and unknown types are rejected.
//!
//! ```bash
//! cargo run --example wire_protocol
//! ```

use glidemini::credentials::Authority;
use glidemini::model::ResourceSpec;
use glidemini::wire::{Envelope, Payload, WireError};

fn main() {
    let authority = Authority::from_seed(99);
    let envelope = Envelope::new(
        "ce",
        7,
        Payload::EpHeartbeat {
            glidein_id: "glidein-000001".to_string(),
            remaining: ResourceSpec::new(6, 6144, 1000, 0),
            retiring: false,
        },
    );
    let line = envelope.to_line(&authority);
    print!("wire line: {line}");

    let decoded = Envelope::from_line(&authority, &line).unwrap();
    println!("decoded: sender={} seq={} type={}", decoded.sender, decoded.seq, decoded.payload.type_name());

    // flip one byte: the envelope signature no longer verifies
    let mut tampered = line.trim_end().as_bytes().to_vec();
    let idx = line.find("6144").unwrap();
    tampered[idx] = b'9';
    match Envelope::from_line(&authority, &String::from_utf8(tampered).unwrap()) {
        Err(WireError::BadSignature) => println!("tampered line: rejected (bad envelope signature)"),
        other => println!("tampered line: unexpected {other:?}"),
    }

    // a different topology's secret cannot read this one's traffic
    let stranger = Authority::from_seed(100);
    match Envelope::from_line(&stranger, &line) {
        Err(WireError::BadSignature) => println!("foreign secret: rejected"),
        other => println!("foreign secret: unexpected {other:?}"),
    }
}
