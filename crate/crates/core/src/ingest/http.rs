//! Minimal HTTP/1.x message splitter for reassembled plaintext streams.
//!
//! Handles request/status line, headers, `Content-Length` bodies and chunked
//! transfer coding. Anything else becomes a single `RAW` message holding the
//! remaining bytes.

use super::Direction;

const METHODS: &[&str] = &[
    "GET", "POST", "PUT", "DELETE", "HEAD", "OPTIONS", "PATCH", "CONNECT", "TRACE",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    /// Offset of the message start within the stream.
    pub offset: usize,
    pub method: String,
    pub path: String,
    pub query: String,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
    pub direction: Direction,
}

impl Message {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }
}

pub fn looks_like_request(bytes: &[u8]) -> bool {
    METHODS
        .iter()
        .any(|m| bytes.len() > m.len() && bytes.starts_with(m.as_bytes()) && bytes[m.len()] == b' ')
}

fn looks_like_response(bytes: &[u8]) -> bool {
    bytes.starts_with(b"HTTP/1.")
}

/// TLS record header: content type 20..=23, major version 3.
pub fn looks_like_tls(bytes: &[u8]) -> bool {
    bytes.len() >= 5 && (0x14..=0x17).contains(&bytes[0]) && bytes[1] == 0x03 && bytes[2] <= 0x04
}

fn find(hay: &[u8], needle: &[u8]) -> Option<usize> {
    memchr::memmem::find(hay, needle)
}

/// Splits a stream into HTTP messages.
pub fn parse_messages(stream: &[u8]) -> Vec<Message> {
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < stream.len() {
        let rest = &stream[pos..];
        let is_req = looks_like_request(rest);
        if !is_req && !looks_like_response(rest) {
            out.push(raw(pos, rest));
            break;
        }
        match parse_one(rest, is_req) {
            Some((mut msg, used)) => {
                msg.offset = pos;
                out.push(msg);
                pos += used.max(1);
            }
            None => {
                out.push(raw(pos, rest));
                break;
            }
        }
    }
    out
}

fn raw(offset: usize, bytes: &[u8]) -> Message {
    Message {
        offset,
        method: "RAW".into(),
        path: String::new(),
        query: String::new(),
        headers: Vec::new(),
        body: bytes.to_vec(),
        direction: Direction::Request,
    }
}

fn parse_one(buf: &[u8], is_request: bool) -> Option<(Message, usize)> {
    let (head_end, sep_len) = match (find(buf, b"\r\n\r\n"), find(buf, b"\n\n")) {
        (Some(a), Some(b)) if b < a => (b, 2),
        (Some(a), _) => (a, 4),
        (None, Some(b)) => (b, 2),
        (None, None) => return None,
    };
    let head = String::from_utf8_lossy(&buf[..head_end]);
    let mut lines = head.lines();
    let start = lines.next()?.trim_end();
    let mut headers = Vec::new();
    for line in lines {
        let line = line.trim_end_matches('\r');
        if let Some((k, v)) = line.split_once(':') {
            headers.push((k.trim().to_string(), v.trim().to_string()));
        }
    }

    let (method, path, query, direction) = if is_request {
        let mut parts = start.splitn(3, ' ');
        let method = parts.next()?.to_string();
        let target = parts.next().unwrap_or("");
        let (path, query) = split_target(target, &mut headers);
        (method, path, query, Direction::Request)
    } else {
        (String::new(), String::new(), String::new(), Direction::Response)
    };

    let body_start = head_end + sep_len;
    let after = &buf[body_start..];
    let header = |name: &str| {
        headers
            .iter()
            .find(|(k, _): &&(String, String)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.clone())
    };
    let chunked = header("transfer-encoding")
        .map(|v| v.to_ascii_lowercase().contains("chunked"))
        .unwrap_or(false);
    let (body, used) = if chunked {
        decode_chunked(after)
    } else if let Some(len) = header("content-length").and_then(|v| v.parse::<usize>().ok()) {
        let n = len.min(after.len());
        (after[..n].to_vec(), n)
    } else if is_request {
        (Vec::new(), 0)
    } else {
        (after.to_vec(), after.len())
    };

    Some((
        Message {
            offset: 0,
            method,
            path,
            query,
            headers,
            body,
            direction,
        },
        body_start + used,
    ))
}

/// Splits a request target into path and query. Absolute-form targets
/// contribute a Host header when none is present.
fn split_target(target: &str, headers: &mut Vec<(String, String)>) -> (String, String) {
    let mut t = target;
    for scheme in ["http://", "https://"] {
        if let Some(rest) = t.strip_prefix(scheme) {
            let (authority, path) = match rest.find('/') {
                Some(i) => (&rest[..i], &rest[i..]),
                None => (rest, "/"),
            };
            if !headers.iter().any(|(k, _)| k.eq_ignore_ascii_case("host")) {
                headers.push(("Host".into(), authority.to_string()));
            }
            t = path;
        }
    }
    let t = t.split('#').next().unwrap_or("");
    match t.split_once('?') {
        Some((p, q)) => (p.to_string(), q.to_string()),
        None => (t.to_string(), String::new()),
    }
}

/// Decodes a chunked body; returns the payload and the bytes consumed.
/// Truncated input yields whatever chunks were complete plus the partial one.
fn decode_chunked(buf: &[u8]) -> (Vec<u8>, usize) {
    let mut out = Vec::new();
    let mut pos = 0;
    loop {
        let Some(line_end) = find(&buf[pos..], b"\r\n") else {
            return (out, buf.len());
        };
        let line = String::from_utf8_lossy(&buf[pos..pos + line_end]);
        let size_str = line.split(';').next().unwrap_or("").trim();
        let Ok(size) = usize::from_str_radix(size_str, 16) else {
            return (out, buf.len());
        };
        pos += line_end + 2;
        if size == 0 {
            // trailers end with an empty line
            match find(&buf[pos..], b"\r\n") {
                Some(0) => pos += 2,
                Some(_) => {
                    if let Some(end) = find(&buf[pos..], b"\r\n\r\n") {
                        pos += end + 4;
                    } else {
                        pos = buf.len();
                    }
                }
                None => pos = buf.len(),
            }
            return (out, pos);
        }
        let end = (pos + size).min(buf.len());
        out.extend_from_slice(&buf[pos..end]);
        if end < pos + size {
            return (out, buf.len());
        }
        pos = end;
        if buf[pos..].starts_with(b"\r\n") {
            pos += 2;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn get_with_query() {
        let msgs = parse_messages(b"GET /v1/events?user_id=42&x=1 HTTP/1.1\r\nHost: a.com\r\n\r\n");
        assert_eq!(msgs.len(), 1);
        assert_eq!(msgs[0].method, "GET");
        assert_eq!(msgs[0].path, "/v1/events");
        assert_eq!(msgs[0].query, "user_id=42&x=1");
        assert_eq!(msgs[0].header("HOST"), Some("a.com"));
        assert!(msgs[0].body.is_empty());
    }

    #[test]
    fn pipelined_with_content_length() {
        let s = b"POST /a HTTP/1.1\r\nHost: h\r\nContent-Length: 3\r\n\r\nabcGET /b HTTP/1.1\r\nHost: h\r\n\r\n";
        let msgs = parse_messages(s);
        assert_eq!(msgs.len(), 2);
        assert_eq!(msgs[0].body, b"abc");
        assert_eq!(msgs[1].path, "/b");
        assert_eq!(msgs[1].offset, 51);
    }

    #[test]
    fn chunked_body() {
        let s = b"POST /c HTTP/1.1\r\nHost: h\r\nTransfer-Encoding: chunked\r\n\r\n4\r\nWiki\r\n5;ext=1\r\npedia\r\n0\r\n\r\n";
        let msgs = parse_messages(s);
        assert_eq!(msgs.len(), 1);
        assert_eq!(msgs[0].body, b"Wikipedia");
    }

    #[test]
    fn non_http_is_raw() {
        let msgs = parse_messages(b"\x00\x01hello user_id=5");
        assert_eq!(msgs.len(), 1);
        assert_eq!(msgs[0].method, "RAW");
        assert_eq!(msgs[0].body, b"\x00\x01hello user_id=5");
    }

    #[test]
    fn unterminated_headers_are_raw() {
        let msgs = parse_messages(b"GET / HTTP/1.1\r\nHost: a");
        assert_eq!(msgs[0].method, "RAW");
    }

    #[test]
    fn absolute_form_target_supplies_host() {
        let msgs = parse_messages(b"GET http://proxy.example.com/x?y=1 HTTP/1.1\r\n\r\n");
        assert_eq!(msgs[0].header("host"), Some("proxy.example.com"));
        assert_eq!(msgs[0].path, "/x");
        assert_eq!(msgs[0].query, "y=1");
    }

    #[test]
    fn response_without_length_runs_to_end() {
        let msgs = parse_messages(b"HTTP/1.0 200 OK\r\nServer: x\r\n\r\nhello");
        assert_eq!(msgs[0].direction, Direction::Response);
        assert_eq!(msgs[0].body, b"hello");
    }

    #[test]
    fn tls_detection() {
        assert!(looks_like_tls(&[0x16, 0x03, 0x01, 0x02, 0x00]));
        assert!(!looks_like_tls(b"GET / HTTP/1.1"));
    }
}
