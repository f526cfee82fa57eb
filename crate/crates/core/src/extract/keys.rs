//! Key-value decomposition of request regions.
//!
//! Returns every key occurrence with its byte offset inside the region so
//! detections can point back at the evidence.

use std::collections::BTreeSet;
use std::sync::LazyLock;

use regex::Regex;

/// Canonical key form: lowercase, `-` mapped to `_`, runs collapsed.
pub fn normalize_key(key: &str) -> String {
    let mut out = String::with_capacity(key.len());
    for c in key.trim().chars() {
        let c = if c == '-' { '_' } else { c.to_ascii_lowercase() };
        if c == '_' && out.ends_with('_') {
            continue;
        }
        out.push(c);
    }
    out
}

/// A key occurrence: byte offset and raw text.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct KeyHit<'a> {
    pub offset: usize,
    pub raw: &'a str,
}

/// Keys of an `a=1&b=2` query string.
pub fn query_keys(query: &str) -> Vec<KeyHit<'_>> {
    let mut out = Vec::new();
    let mut pos = 0;
    for part in query.split('&') {
        let key = part.split_once('=').map(|(k, _)| k).unwrap_or(part);
        if !key.is_empty() {
            out.push(KeyHit { offset: pos, raw: key });
        }
        pos += part.len() + 1;
    }
    out
}

static QUOTED_KEY: LazyLock<Regex> = LazyLock::new(|| Regex::new(r#""((?:[^"\\]|\\.){1,256})"\s*:"#).unwrap());
static ASSIGN_KEY: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?:^|[&?;,\s{(\[])([A-Za-z0-9_.\-]{1,128})=").unwrap());

/// Keys found in a text span. When `json_keys` is given (the body parsed as
/// JSON), only quoted keys from that set are reported; otherwise both the
/// `"k":` and `k=` forms are.
pub fn text_keys<'a>(text: &'a str, json_keys: Option<&BTreeSet<String>>) -> Vec<KeyHit<'a>> {
    let mut out = Vec::new();
    for cap in QUOTED_KEY.captures_iter(text) {
        let m = cap.get(1).expect("group 1");
        if json_keys.is_none_or(|keys| keys.contains(m.as_str())) {
            out.push(KeyHit {
                offset: m.start(),
                raw: m.as_str(),
            });
        }
    }
    if json_keys.is_none() {
        for cap in ASSIGN_KEY.captures_iter(text) {
            let m = cap.get(1).expect("group 1");
            out.push(KeyHit {
                offset: m.start(),
                raw: m.as_str(),
            });
        }
    }
    out.sort();
    out.dedup();
    out
}

/// All object keys of a JSON document, recursively.
pub fn json_key_set(body: &[u8]) -> Option<BTreeSet<String>> {
    let value: serde_json::Value = serde_json::from_slice(body).ok()?;
    if !(value.is_object() || value.is_array()) {
        return None;
    }
    let mut keys = BTreeSet::new();
    walk(&value, &mut keys);
    Some(keys)
}

fn walk(v: &serde_json::Value, keys: &mut BTreeSet<String>) {
    match v {
        serde_json::Value::Object(map) => {
            for (k, child) in map {
                keys.insert(k.clone());
                walk(child, keys);
            }
        }
        serde_json::Value::Array(items) => items.iter().for_each(|c| walk(c, keys)),
        _ => {}
    }
}

/// Maximal runs of printable ASCII (plus tab/CR/LF) as `(offset, text)`.
pub fn ascii_spans(bytes: &[u8]) -> Vec<(usize, &str)> {
    let printable = |b: u8| (0x20..0x7f).contains(&b) || matches!(b, b'\t' | b'\n' | b'\r');
    let mut out = Vec::new();
    let mut start = None;
    for (i, &b) in bytes.iter().enumerate() {
        match (printable(b), start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push((s, std::str::from_utf8(&bytes[s..i]).expect("ascii")));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, std::str::from_utf8(&bytes[s..]).expect("ascii")));
    }
    out
}
