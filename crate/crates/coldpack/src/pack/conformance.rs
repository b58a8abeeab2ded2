//! Cross-language conformance fixtures for the packing format.
//!
//! A fixture file is a JSON list of cases, each pairing signed codes with
//! the expected block bytes in hex, so other implementations can check
//! their packers and unpackers byte for byte.

use serde::{Deserialize, Serialize};

use super::{encode_offset, pack_channel, unpack_channel_reference, PackError};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConformanceCase {
    pub name: String,
    pub bits: u8,
    pub register_width: u32,
    /// Signed codes, already padded to a group multiple.
    pub codes: Vec<i16>,
    /// Expected block bytes, lowercase hex.
    pub blocks_hex: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConformanceFile {
    pub schema_version: u32,
    pub cases: Vec<ConformanceCase>,
}

fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn from_hex(s: &str) -> Result<Vec<u8>, PackError> {
    if !s.len().is_multiple_of(2) {
        return Err(PackError::InvalidTensor("odd hex string length".into()));
    }
    (0..s.len() / 2)
        .map(|i| {
            u8::from_str_radix(&s[2 * i..2 * i + 2], 16)
                .map_err(|e| PackError::InvalidTensor(format!("bad hex: {e}")))
        })
        .collect()
}

/// Builds a case by packing `codes`, recording the produced bytes.
pub fn make_case(
    name: &str,
    bits: u8,
    register_width: u32,
    codes: &[i16],
) -> Result<ConformanceCase, PackError> {
    let u: Vec<u8> = codes
        .iter()
        .map(|&q| encode_offset(q, bits))
        .collect::<Result<_, _>>()?;
    let blocks = pack_channel(&u, bits, register_width)?;
    Ok(ConformanceCase {
        name: name.to_string(),
        bits,
        register_width,
        codes: codes.to_vec(),
        blocks_hex: to_hex(&blocks),
    })
}

/// Checks one case in both directions: pack(codes) == blocks and
/// unpack(blocks) == codes.
pub fn verify_case(case: &ConformanceCase) -> Result<(), PackError> {
    let u: Vec<u8> = case
        .codes
        .iter()
        .map(|&q| encode_offset(q, case.bits))
        .collect::<Result<_, _>>()?;
    let blocks = pack_channel(&u, case.bits, case.register_width)?;
    let expect = from_hex(&case.blocks_hex)?;
    if blocks != expect {
        return Err(PackError::InvalidTensor(format!(
            "case {}: packed bytes {} differ from fixture {}",
            case.name,
            to_hex(&blocks),
            case.blocks_hex
        )));
    }
    let back = unpack_channel_reference(&blocks, case.bits, case.register_width)?;
    let got: Vec<i16> = back.iter().map(|&v| v as i16).collect();
    if got != case.codes {
        return Err(PackError::InvalidTensor(format!(
            "case {}: unpacked codes differ from fixture",
            case.name
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn case_roundtrip() {
        let case = make_case("w3", 3, 8, &[1, -2, 3, -3, 0, 2, -1, 1]).unwrap();
        assert_eq!(case.blocks_hex, "6d2dad");
        verify_case(&case).unwrap();
    }

    #[test]
    fn tampered_case_fails() {
        let mut case = make_case("w3", 3, 8, &[1, -2, 3, -3, 0, 2, -1, 1]).unwrap();
        case.blocks_hex = "6d2dae".into();
        assert!(verify_case(&case).is_err());
    }
}
