//! Function signatures for stripped binaries: the 4 bytes before a function
//! and its first 16 bytes, taken from a symbolicated build and searched for
//! in a stripped one.

use goblin::elf::program_header::{PF_X, PT_LOAD};
use goblin::elf::Elf;
use memchr::memmem;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub const PREAMBLE_LEN: usize = 4;
pub const PREFIX_LEN: usize = 16;
pub const CONTEXT_LEN: usize = 8;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum SigscanError {
    #[error("offset {offset:#x} leaves no room for a signature in {len} bytes")]
    OutOfRange { offset: u64, len: usize },
    #[error("bad hex in {field}: {message}")]
    BadHex { field: &'static str, message: String },
    #[error("not an ELF file: {0}")]
    NotElf(String),
}

/// Hex text with optional whitespace, either case.
pub fn parse_hex(text: &str, field: &'static str) -> Result<Vec<u8>, SigscanError> {
    let compact: String = text.chars().filter(|c| !c.is_whitespace()).collect();
    hex::decode(compact).map_err(|e| SigscanError::BadHex {
        field,
        message: e.to_string(),
    })
}

/// Uppercase hex with a space between bytes.
pub fn format_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02X}")).collect::<Vec<_>>().join(" ")
}

mod hex_array {
    use super::*;

    pub fn serialize<S: Serializer, const N: usize>(v: &[u8; N], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format_hex(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>, const N: usize>(d: D) -> Result<[u8; N], D::Error> {
        let text = String::deserialize(d)?;
        let bytes = parse_hex(&text, "signature").map_err(serde::de::Error::custom)?;
        let len = bytes.len();
        bytes
            .try_into()
            .map_err(|_| serde::de::Error::custom(format!("expected {N} bytes, got {len}")))
    }
}

mod hex_vec {
    use super::*;

    pub fn serialize<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format_hex(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        parse_hex(&text, "context").map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignatureSpec {
    #[serde(default)]
    pub label: String,
    #[serde(with = "hex_array")]
    pub preamble: [u8; PREAMBLE_LEN],
    #[serde(with = "hex_array")]
    pub prefix: [u8; PREFIX_LEN],
}

impl SignatureSpec {
    /// Preamble followed by prefix.
    pub fn pattern(&self) -> [u8; PREAMBLE_LEN + PREFIX_LEN] {
        let mut p = [0; PREAMBLE_LEN + PREFIX_LEN];
        p[..PREAMBLE_LEN].copy_from_slice(&self.preamble);
        p[PREAMBLE_LEN..].copy_from_slice(&self.prefix);
        p
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanHit {
    /// File offset where the function (the prefix) starts.
    pub offset: u64,
    /// Virtual address of `offset` when scanning ELF segments.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vaddr: Option<u64>,
    /// File offset of the first context byte.
    pub context_start: u64,
    /// Up to 8 bytes either side of `offset`.
    #[serde(with = "hex_vec")]
    pub context: Vec<u8>,
}

pub fn extract_signature(blob: &[u8], function_offset: u64, label: &str) -> Result<SignatureSpec, SigscanError> {
    let out_of_range = SigscanError::OutOfRange {
        offset: function_offset,
        len: blob.len(),
    };
    let off = usize::try_from(function_offset).map_err(|_| out_of_range.clone())?;
    if off < PREAMBLE_LEN || off.checked_add(PREFIX_LEN).is_none_or(|end| end > blob.len()) {
        return Err(out_of_range);
    }
    Ok(SignatureSpec {
        label: label.to_string(),
        preamble: blob[off - PREAMBLE_LEN..off].try_into().expect("4 bytes"),
        prefix: blob[off..off + PREFIX_LEN].try_into().expect("16 bytes"),
    })
}

fn hit_at(blob: &[u8], offset: usize) -> ScanHit {
    let start = offset.saturating_sub(CONTEXT_LEN);
    let end = (offset + CONTEXT_LEN).min(blob.len());
    ScanHit {
        offset: offset as u64,
        vaddr: None,
        context_start: start as u64,
        context: blob[start..end].to_vec(),
    }
}

/// Every match of preamble plus prefix, overlapping ones included, in
/// ascending order of function offset.
pub fn locate(blob: &[u8], sig: &SignatureSpec) -> Vec<ScanHit> {
    let pattern = sig.pattern();
    let finder = memmem::Finder::new(&pattern);
    let mut hits = Vec::new();
    let mut pos = 0;
    while let Some(i) = finder.find(&blob[pos..]) {
        hits.push(hit_at(blob, pos + i + PREAMBLE_LEN));
        pos += i + 1;
    }
    hits
}

/// [`locate`] restricted to executable `PT_LOAD` segments of an ELF file.
/// Offsets stay file offsets; `vaddr` is filled from the segment mapping.
pub fn locate_in_elf(blob: &[u8], sig: &SignatureSpec) -> Result<Vec<ScanHit>, SigscanError> {
    let elf = Elf::parse(blob).map_err(|e| SigscanError::NotElf(e.to_string()))?;
    let mut hits = Vec::new();
    for ph in &elf.program_headers {
        if ph.p_type != PT_LOAD || ph.p_flags & PF_X == 0 {
            continue;
        }
        let start = usize::try_from(ph.p_offset).unwrap_or(usize::MAX).min(blob.len());
        let end = usize::try_from(ph.p_offset.saturating_add(ph.p_filesz))
            .unwrap_or(usize::MAX)
            .min(blob.len());
        for h in locate(&blob[start..end], sig) {
            let file_off = start + h.offset as usize;
            let mut hit = hit_at(blob, file_off);
            hit.vaddr = Some(ph.p_vaddr + (file_off - start) as u64);
            hits.push(hit);
        }
    }
    hits.sort_by_key(|h| h.offset);
    hits.dedup_by_key(|h| h.offset);
    Ok(hits)
}

/// Parses `0x`-prefixed hex or decimal.
pub fn parse_offset(text: &str) -> Option<u64> {
    let t = text.trim();
    match t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")) {
        Some(h) => u64::from_str_radix(h, 16).ok(),
        None => t.parse().ok(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const UNITY_PREAMBLE: [u8; 4] = [0xFD, 0xFD, 0xFF, 0x17];
    const UNITY_PREFIX: [u8; 16] = [
        0xF7, 0x5B, 0xBD, 0xA9, 0xF5, 0x53, 0x01, 0xA9, 0xF3, 0x7B, 0x02, 0xA9, 0xF4, 0x03, 0x02, 0xAA,
    ];

    fn naive(blob: &[u8], sig: &SignatureSpec) -> Vec<u64> {
        let p = sig.pattern();
        (0..blob.len().saturating_sub(p.len() - 1))
            .filter(|&i| blob[i..i + p.len()] == p)
            .map(|i| (i + PREAMBLE_LEN) as u64)
            .collect()
    }

    fn plant(blob: &mut [u8], at: usize) {
        blob[at - 4..at].copy_from_slice(&UNITY_PREAMBLE);
        blob[at..at + 16].copy_from_slice(&UNITY_PREFIX);
    }

    #[test]
    fn documented_bytes() {
        let mut blob = vec![0u8; 0x100];
        plant(&mut blob, 0x40);
        let sig = extract_signature(&blob, 0x40, "unity").unwrap();
        assert_eq!(sig.preamble, UNITY_PREAMBLE);
        assert_eq!(
            format_hex(&sig.prefix),
            "F7 5B BD A9 F5 53 01 A9 F3 7B 02 A9 F4 03 02 AA"
        );
        let hits = locate(&blob, &sig);
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].offset, 0x40);
        assert_eq!(hits[0].context_start, 0x38);
        assert_eq!(hits[0].context.len(), 16);
    }

    #[test]
    fn boundaries() {
        let blob: Vec<u8> = (0..20).collect();
        let sig = extract_signature(&blob, 4, "").unwrap();
        assert_eq!(sig.pattern().to_vec(), blob);
        assert!(matches!(
            extract_signature(&blob, 2, ""),
            Err(SigscanError::OutOfRange { .. })
        ));
        assert!(extract_signature(&blob, 5, "").is_err());
        assert!(locate(&[0u8; 100], &sig).is_empty());
    }

    #[test]
    fn two_hits_ascending() {
        let mut blob = vec![0x11u8; 0x200];
        plant(&mut blob, 0x150);
        plant(&mut blob, 0x30);
        let sig = extract_signature(&blob, 0x150, "").unwrap();
        let offs: Vec<u64> = locate(&blob, &sig).iter().map(|h| h.offset).collect();
        assert_eq!(offs, vec![0x30, 0x150]);
    }

    #[test]
    fn overlapping_hits() {
        let blob = vec![0xAAu8; 30];
        let sig = extract_signature(&blob, 4, "").unwrap();
        assert_eq!(locate(&blob, &sig).len(), 11);
    }

    #[test]
    fn json_round_trip() {
        let sig = SignatureSpec {
            label: "unity".into(),
            preamble: UNITY_PREAMBLE,
            prefix: UNITY_PREFIX,
        };
        let text = serde_json::to_string(&sig).unwrap();
        assert!(text.contains("\"FD FD FF 17\""));
        assert_eq!(serde_json::from_str::<SignatureSpec>(&text).unwrap(), sig);
        let loose = r#"{"preamble":"fdfdff17","prefix":"f75bbda9f55301a9f37b02a9f40302aa"}"#;
        assert_eq!(
            serde_json::from_str::<SignatureSpec>(loose).unwrap().prefix,
            UNITY_PREFIX
        );
        assert!(serde_json::from_str::<SignatureSpec>(r#"{"preamble":"fdfd","prefix":"00"}"#).is_err());
    }

    #[test]
    fn offsets() {
        assert_eq!(parse_offset("0x814468"), Some(0x814468));
        assert_eq!(parse_offset("64"), Some(64));
        assert_eq!(parse_offset("zz"), None);
    }

    /// ELF64 little-endian with one executable PT_LOAD over `[0x1000, 0x1000 + len)`
    /// mapped at 0x400000, plus a non-executable copy of the same bytes after it.
    fn tiny_elf(code: &[u8]) -> Vec<u8> {
        let mut f = vec![0u8; 0x1000];
        f[..4].copy_from_slice(b"\x7fELF");
        f[4] = 2; // 64-bit
        f[5] = 1; // little endian
        f[6] = 1;
        f[16..18].copy_from_slice(&3u16.to_le_bytes()); // ET_DYN
        f[18..20].copy_from_slice(&183u16.to_le_bytes()); // aarch64
        f[20..24].copy_from_slice(&1u32.to_le_bytes());
        f[32..40].copy_from_slice(&64u64.to_le_bytes()); // e_phoff
        f[52..54].copy_from_slice(&64u16.to_le_bytes()); // e_ehsize
        f[54..56].copy_from_slice(&56u16.to_le_bytes()); // e_phentsize
        f[56..58].copy_from_slice(&2u16.to_le_bytes()); // e_phnum
        let code_off = 0x1000u64;
        let data_off = code_off + code.len() as u64;
        let mut ph = |at: usize, flags: u32, off: u64, vaddr: u64| {
            f[at..at + 4].copy_from_slice(&PT_LOAD.to_le_bytes());
            f[at + 4..at + 8].copy_from_slice(&flags.to_le_bytes());
            f[at + 8..at + 16].copy_from_slice(&off.to_le_bytes());
            f[at + 16..at + 24].copy_from_slice(&vaddr.to_le_bytes());
            f[at + 24..at + 32].copy_from_slice(&vaddr.to_le_bytes());
            f[at + 32..at + 40].copy_from_slice(&(code.len() as u64).to_le_bytes());
            f[at + 40..at + 48].copy_from_slice(&(code.len() as u64).to_le_bytes());
            f[at + 48..at + 56].copy_from_slice(&0x1000u64.to_le_bytes());
        };
        ph(64, PF_X | 4, code_off, 0x400000);
        ph(120, 4, data_off, 0x800000);
        f.extend_from_slice(code);
        f.extend_from_slice(code);
        f
    }

    #[test]
    fn elf_executable_segments_only() {
        let mut code = vec![0u8; 0x80];
        plant(&mut code, 0x20);
        let elf = tiny_elf(&code);
        let sig = extract_signature(&code, 0x20, "").unwrap();
        assert_eq!(locate(&elf, &sig).len(), 2);
        let hits = locate_in_elf(&elf, &sig).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].offset, 0x1020);
        assert_eq!(hits[0].vaddr, Some(0x400020));
        assert!(matches!(locate_in_elf(&code, &sig), Err(SigscanError::NotElf(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn agrees_with_naive_scan(mut blob in prop::collection::vec(0u8..4, 24..600), at in prop::collection::vec(any::<prop::sample::Index>(), 1..3), pick in any::<prop::sample::Index>()) {
            for a in &at {
                let o = 4 + a.index(blob.len() - 20);
                plant(&mut blob, o);
            }
            let o = 4 + pick.index(blob.len() - 20);
            let sig = extract_signature(&blob, o as u64, "").unwrap();
            let found: Vec<u64> = locate(&blob, &sig).iter().map(|h| h.offset).collect();
            prop_assert_eq!(&found, &naive(&blob, &sig));
            prop_assert!(found.contains(&(o as u64)));
        }
    }
}
