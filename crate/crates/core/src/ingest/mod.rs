//! Capture ingestion.
//!
//! Captures arrive either as PCAPNG files whose packets carry an
//! `app=<package>[;sni=<host>]` comment, or as JSONL transaction logs. Both
//! front-ends produce the same [`HttpTransaction`] records, in capture order.

pub mod http;
pub mod pcapng;
pub mod reassembly;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::net::IpAddr;
use std::path::Path;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use reassembly::reassemble;

/// PCAPNG Section Header Block type, also the file magic.
pub const PCAPNG_MAGIC: [u8; 4] = [0x0A, 0x0D, 0x0D, 0x0A];

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    UnreadableFile {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed PCAPNG block at byte offset {0}")]
    MalformedBlock(usize),
    #[error("unrecognized capture format (neither PCAPNG magic nor JSON object)")]
    UnknownFormat,
    #[error("line {line}: {message}")]
    BadRecord { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaptureFormat {
    Pcapng,
    Jsonl,
}

impl CaptureFormat {
    /// Sniffs the format from the leading bytes.
    pub fn sniff(data: &[u8]) -> Option<Self> {
        if data.starts_with(&PCAPNG_MAGIC) {
            return Some(CaptureFormat::Pcapng);
        }
        let first = data.iter().find(|b| !b.is_ascii_whitespace())?;
        (*first == b'{').then_some(CaptureFormat::Jsonl)
    }
}

impl std::str::FromStr for CaptureFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "pcapng" => Ok(CaptureFormat::Pcapng),
            "jsonl" => Ok(CaptureFormat::Jsonl),
            other => Err(format!("unknown capture format {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Request,
    Response,
}

/// One decrypted application-layer exchange attributed to an app.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HttpTransaction {
    pub app: String,
    pub ts_us: u64,
    #[serde(default)]
    pub host: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sni: Option<String>,
    #[serde(default)]
    pub method: String,
    #[serde(default)]
    pub path: String,
    #[serde(default)]
    pub query: String,
    #[serde(default)]
    pub headers: Vec<(String, String)>,
    #[serde(default, rename = "body_b64", with = "body_b64")]
    pub body: Vec<u8>,
    #[serde(default = "default_direction")]
    pub direction: Direction,
}

fn default_direction() -> Direction {
    Direction::Request
}

impl HttpTransaction {
    /// First header value whose name matches case-insensitively.
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    /// Applies the host invariants: lowercase, no port, no trailing dot, SNI
    /// fallback when the Host header is absent.
    pub fn normalize(&mut self) {
        let mut host = normalize_host(&self.host);
        if let Some(sni) = self.sni.as_mut() {
            *sni = normalize_host(sni);
            if sni.is_empty() {
                self.sni = None;
            }
        }
        if host.is_empty() {
            if let Some(sni) = &self.sni {
                host = sni.clone();
            }
        }
        self.host = host;
    }
}

/// Lowercases a host, strips a port, IPv6 brackets and a trailing dot.
pub fn normalize_host(raw: &str) -> String {
    let mut h = raw.trim().to_ascii_lowercase();
    if let Some(rest) = h.strip_prefix('[') {
        if let Some(end) = rest.find(']') {
            h = rest[..end].to_string();
        }
    } else if h.matches(':').count() == 1 {
        // host:port; bare IPv6 literals have more than one colon
        if let Some((name, _port)) = h.rsplit_once(':') {
            h = name.to_string();
        }
    }
    while h.ends_with('.') {
        h.pop();
    }
    h
}

mod body_b64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(body: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(body))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = Option::<String>::deserialize(d)?.unwrap_or_default();
        STANDARD.decode(s.as_bytes()).map_err(serde::de::Error::custom)
    }
}

/// A transport endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Endpoint {
    pub ip: IpAddr,
    pub port: u16,
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.ip {
            IpAddr::V4(ip) => write!(f, "{ip}:{}", self.port),
            IpAddr::V6(ip) => write!(f, "[{ip}]:{}", self.port),
        }
    }
}

/// A decoded TCP segment plus its app annotation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packet {
    pub app_id: String,
    pub timestamp_us: u64,
    pub src: Endpoint,
    pub dst: Endpoint,
    pub tcp_seq: u32,
    pub tcp_ack: u32,
    pub payload: Vec<u8>,
    pub comment: String,
}

impl Packet {
    pub fn stream_key(&self) -> TcpStreamKey {
        TcpStreamKey {
            src: self.src,
            dst: self.dst,
            app_id: self.app_id.clone(),
        }
    }
}

/// One direction of a TCP connection, scoped to an app.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TcpStreamKey {
    pub src: Endpoint,
    pub dst: Endpoint,
    pub app_id: String,
}

impl TcpStreamKey {
    pub fn reversed(&self) -> Self {
        TcpStreamKey {
            src: self.dst,
            dst: self.src,
            app_id: self.app_id.clone(),
        }
    }
}

/// The parsed form of a per-packet comment.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Annotation {
    pub app: String,
    pub sni: Option<String>,
}

impl Annotation {
    /// Parses `app=<package>[;sni=<host>]`. Returns `None` when no non-empty
    /// `app` field is present.
    pub fn parse(comment: &str) -> Option<Self> {
        let mut ann = Annotation::default();
        for field in comment.split(';') {
            let Some((k, v)) = field.split_once('=') else {
                continue;
            };
            match k.trim() {
                "app" => ann.app = v.trim().to_string(),
                "sni" => {
                    let sni = normalize_host(v);
                    ann.sni = (!sni.is_empty()).then_some(sni);
                }
                _ => {}
            }
        }
        (!ann.app.is_empty()).then_some(ann)
    }
}

/// Result of loading one capture file.
#[derive(Debug, Clone, Default)]
pub struct IngestOutcome {
    pub transactions: Vec<HttpTransaction>,
    /// Packet indices skipped for lacking an app annotation.
    pub missing_annotation: Vec<usize>,
    /// Packets that were not TCP over IP.
    pub non_tcp_packets: usize,
}

impl IngestOutcome {
    pub fn skipped(&self) -> usize {
        self.missing_annotation.len()
    }
}

/// Loads one capture file, sniffing the format when `format` is `None`.
pub fn load_transactions(path: &Path, format: Option<CaptureFormat>) -> Result<IngestOutcome, IngestError> {
    let data = std::fs::read(path).map_err(|source| IngestError::UnreadableFile {
        path: path.display().to_string(),
        source,
    })?;
    parse_capture(&data, format)
}

/// Parses capture bytes already in memory.
pub fn parse_capture(data: &[u8], format: Option<CaptureFormat>) -> Result<IngestOutcome, IngestError> {
    let format = match format {
        Some(f) => f,
        None if data.iter().all(u8::is_ascii_whitespace) => CaptureFormat::Jsonl,
        None => CaptureFormat::sniff(data).ok_or(IngestError::UnknownFormat)?,
    };
    match format {
        CaptureFormat::Jsonl => Ok(IngestOutcome {
            transactions: read_jsonl(data)?,
            ..Default::default()
        }),
        CaptureFormat::Pcapng => {
            let capture = pcapng::read_packets(data)?;
            Ok(IngestOutcome {
                transactions: transactions_from_packets(&capture.packets),
                missing_annotation: capture.missing_annotation,
                non_tcp_packets: capture.non_tcp,
            })
        }
    }
}

/// Reads a JSONL transaction log. Blank lines are ignored.
pub fn read_jsonl(data: &[u8]) -> Result<Vec<HttpTransaction>, IngestError> {
    let mut out = Vec::new();
    for (idx, line) in data.lines().enumerate() {
        let line = line.map_err(|e| IngestError::BadRecord {
            line: idx + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let mut txn: HttpTransaction = serde_json::from_str(&line).map_err(|e| IngestError::BadRecord {
            line: idx + 1,
            message: e.to_string(),
        })?;
        txn.normalize();
        if txn.app.trim().is_empty() {
            return Err(IngestError::BadRecord {
                line: idx + 1,
                message: "missing app".into(),
            });
        }
        if txn.host.is_empty() {
            return Err(IngestError::BadRecord {
                line: idx + 1,
                message: "neither host nor sni given".into(),
            });
        }
        out.push(txn);
    }
    Ok(out)
}

pub fn write_jsonl<W: Write>(mut w: W, txns: &[HttpTransaction]) -> std::io::Result<()> {
    for t in txns {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Turns annotated packets into transactions: reassemble each direction,
/// parse HTTP/1.x messages, and fall back to RAW or TLS records.
pub fn transactions_from_packets(packets: &[Packet]) -> Vec<HttpTransaction> {
    let streams = reassembly::reassemble_streams(packets);

    // SNI and first-seen capture index per connection (both directions).
    let mut sni: BTreeMap<ConnKey, String> = BTreeMap::new();
    for p in packets {
        if let Some(s) = Annotation::parse(&p.comment).and_then(|a| a.sni) {
            sni.entry(ConnKey::of(&p.stream_key())).or_insert(s);
        }
    }

    struct Pending {
        order: (usize, usize),
        txn: HttpTransaction,
    }
    let mut pending: Vec<Pending> = Vec::new();
    let mut request_hosts: BTreeMap<TcpStreamKey, String> = BTreeMap::new();
    let mut plaintext: BTreeSet<ConnKey> = BTreeSet::new();

    // Requests first so that responses can borrow the Host of their request.
    let mut ordered: Vec<&reassembly::Stream> = streams.iter().collect();
    ordered.sort_by_key(|s| (!http::looks_like_request(&s.bytes), s.first_index));

    for stream in ordered {
        if stream.bytes.is_empty() || http::looks_like_tls(&stream.bytes) {
            continue;
        }
        let conn = ConnKey::of(&stream.key);
        let conn_sni = sni.get(&conn).cloned();
        plaintext.insert(conn);
        for msg in http::parse_messages(&stream.bytes) {
            let (ts_us, index) = stream.locate(msg.offset);
            let mut txn = HttpTransaction {
                app: stream.key.app_id.clone(),
                ts_us,
                host: msg.header("host").unwrap_or_default().to_string(),
                sni: conn_sni.clone(),
                method: msg.method,
                path: msg.path,
                query: msg.query,
                headers: msg.headers,
                body: msg.body,
                direction: msg.direction,
            };
            if txn.direction == Direction::Request && !txn.host.is_empty() {
                request_hosts
                    .entry(stream.key.clone())
                    .or_insert_with(|| normalize_host(&txn.host));
            }
            if txn.direction == Direction::Response && txn.host.is_empty() {
                if let Some(h) = request_hosts.get(&stream.key.reversed()) {
                    txn.host = h.clone();
                }
            }
            let server = match txn.direction {
                Direction::Request => stream.key.dst.ip,
                Direction::Response => stream.key.src.ip,
            };
            txn.normalize();
            if txn.host.is_empty() {
                txn.host = server.to_string();
            }
            pending.push(Pending {
                order: (index, msg.offset),
                txn,
            });
        }
    }

    // Connections with an SNI that carried no parseable plaintext.
    for (conn, host) in &sni {
        if plaintext.contains(conn) {
            continue;
        }
        let Some(first) = streams
            .iter()
            .filter(|s| &ConnKey::of(&s.key) == conn)
            .min_by_key(|s| s.first_index)
        else {
            continue;
        };
        pending.push(Pending {
            order: (first.first_index, 0),
            txn: HttpTransaction {
                app: conn.app.clone(),
                ts_us: first.first_ts_us,
                host: host.clone(),
                sni: Some(host.clone()),
                method: "TLS".into(),
                path: String::new(),
                query: String::new(),
                headers: Vec::new(),
                body: Vec::new(),
                direction: Direction::Request,
            },
        });
    }

    pending.sort_by_key(|p| p.order);
    pending.into_iter().map(|p| p.txn).collect()
}

/// Direction-agnostic connection identity.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct ConnKey {
    a: Endpoint,
    b: Endpoint,
    app: String,
}

impl ConnKey {
    fn of(k: &TcpStreamKey) -> Self {
        let (a, b) = if k.src <= k.dst { (k.src, k.dst) } else { (k.dst, k.src) };
        ConnKey {
            a,
            b,
            app: k.app_id.clone(),
        }
    }
}

/// Encodes bytes the way the JSONL schema does.
pub fn encode_body(body: &[u8]) -> String {
    base64::engine::general_purpose::STANDARD.encode(body)
}
