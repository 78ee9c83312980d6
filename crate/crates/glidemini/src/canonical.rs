//! Canonical serialization: the byte form that signatures cover and event
//! logs hash. Field names sorted lexicographically, integers in decimal,
//! no insignificant whitespace.

use serde::Serialize;

/// Serialize a value to its canonical byte form.
///
/// Values are routed through [`serde_json::Value`], whose object
/// representation is a sorted map, so struct field declaration order never
/// leaks into the output.
pub fn canonical_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let v = serde_json::to_value(value).expect("value must be JSON-representable");
    serde_json::to_vec(&v).expect("canonical encoding cannot fail")
}

/// Canonical form as a string, for line-oriented logs and the wire protocol.
pub fn canonical_string<T: Serialize>(value: &T) -> String {
    String::from_utf8(canonical_bytes(value)).expect("canonical form is UTF-8")
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Serialize;

    #[derive(Serialize)]
    struct Unordered {
        zeta: u64,
        alpha: &'static str,
        mid: Vec<u64>,
    }

    #[test]
    fn keys_are_sorted_and_compact() {
        let s = canonical_string(&Unordered { zeta: 7, alpha: "x", mid: vec![1, 2] });
        assert_eq!(s, r#"{"alpha":"x","mid":[1,2],"zeta":7}"#);
    }

    #[test]
    fn integers_stay_decimal() {
        let s = canonical_string(&serde_json::json!({ "t": 20010u64 }));
        assert_eq!(s, r#"{"t":20010}"#);
    }
}
