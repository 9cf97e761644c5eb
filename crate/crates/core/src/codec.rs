//! Base64 payloads for `f64` arrays (little-endian IEEE-754), so matrices
//! survive a JSON round trip bit-for-bit.

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Deserializer, Serializer};

use crate::error::{Error, Result};

pub fn encode_f64(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    STANDARD.encode(bytes)
}

pub fn decode_f64(text: &str) -> Result<Vec<f64>> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| Error::Format(format!("base64 payload: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Format(format!(
            "payload of {} bytes is not f64-aligned",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

/// `#[serde(with = "crate::codec::b64")]` for `Vec<f64>` fields.
pub mod b64 {
    use super::*;

    pub fn serialize<S: Serializer>(values: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&encode_f64(values))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
        let text = String::deserialize(d)?;
        decode_f64(&text).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_exact(values in proptest::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 0..64)) {
            let back = decode_f64(&encode_f64(&values)).unwrap();
            prop_assert_eq!(back.len(), values.len());
            for (a, b) in back.iter().zip(&values) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn misaligned_payload_rejected() {
        assert!(decode_f64(&STANDARD.encode([1u8, 2, 3])).is_err());
        assert!(decode_f64("not base64!").is_err());
    }
}
