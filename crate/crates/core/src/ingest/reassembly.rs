//! TCP stream reassembly over packets whose sequence numbers were already
//! adjusted for the decrypted byte stream.
//!
//! Per stream, payload bytes are laid out by sequence number. Overlapping
//! bytes keep whatever was captured first; the stream ends at the first gap.

use std::collections::BTreeMap;

use super::{Packet, TcpStreamKey};

/// A reassembled stream plus the bookkeeping needed to timestamp messages.
#[derive(Debug, Clone)]
pub struct Stream {
    pub key: TcpStreamKey,
    pub bytes: Vec<u8>,
    /// Capture index of the first packet seen on this stream.
    pub first_index: usize,
    pub first_ts_us: u64,
    /// (stream offset, capture index, timestamp) of each contributing
    /// segment, sorted by offset.
    marks: Vec<(usize, usize, u64)>,
}

impl Stream {
    /// Timestamp and capture index of the segment that carries `offset`.
    pub fn locate(&self, offset: usize) -> (u64, usize) {
        let idx = self.marks.partition_point(|m| m.0 <= offset);
        match idx.checked_sub(1).and_then(|i| self.marks.get(i)) {
            Some(&(_, index, ts)) => (ts, index),
            None => (self.first_ts_us, self.first_index),
        }
    }
}

/// Reassembles every stream, returning `(key, bytes)` in first-seen order.
pub fn reassemble(packets: &[Packet]) -> Vec<(TcpStreamKey, Vec<u8>)> {
    reassemble_streams(packets)
        .into_iter()
        .map(|s| (s.key, s.bytes))
        .collect()
}

struct Segment<'a> {
    capture_index: usize,
    ts: u64,
    seq: u32,
    payload: &'a [u8],
}

pub fn reassemble_streams(packets: &[Packet]) -> Vec<Stream> {
    let mut by_key: BTreeMap<TcpStreamKey, Vec<Segment<'_>>> = BTreeMap::new();
    let mut first_seen: BTreeMap<TcpStreamKey, (usize, u64)> = BTreeMap::new();
    for (i, p) in packets.iter().enumerate() {
        let key = p.stream_key();
        first_seen.entry(key.clone()).or_insert((i, p.timestamp_us));
        let segs = by_key.entry(key).or_default();
        if !p.payload.is_empty() {
            segs.push(Segment {
                capture_index: i,
                ts: p.timestamp_us,
                seq: p.tcp_seq,
                payload: &p.payload,
            });
        }
    }

    let mut streams: Vec<Stream> = by_key
        .into_iter()
        .map(|(key, segs)| {
            let (first_index, first_ts_us) = first_seen[&key];
            let (bytes, marks) = stitch(&segs);
            Stream {
                key,
                bytes,
                first_index,
                first_ts_us,
                marks,
            }
        })
        .collect();
    streams.sort_by_key(|s| s.first_index);
    streams
}

#[allow(clippy::type_complexity)]
fn stitch(segs: &[Segment<'_>]) -> (Vec<u8>, Vec<(usize, usize, u64)>) {
    let Some(anchor) = segs.first().map(|s| s.seq) else {
        return (Vec::new(), Vec::new());
    };
    // Signed distance from the anchor in sequence space (RFC 1982 style),
    // so wraparound inside a stream is handled and the result does not
    // depend on which segment is the anchor.
    let rel = |seq: u32| seq.wrapping_sub(anchor) as i32 as i64;
    let start = segs.iter().map(|s| rel(s.seq)).min().unwrap_or(0);

    let mut spans: Vec<(usize, usize, &Segment<'_>)> = segs
        .iter()
        .map(|s| {
            let off = (rel(s.seq) - start) as usize;
            (off, off + s.payload.len(), s)
        })
        .collect();
    spans.sort_by_key(|(off, end, s)| (*off, *end, s.capture_index));

    // Contiguous prefix.
    let mut end = 0usize;
    for &(off, e, _) in &spans {
        if off > end {
            break;
        }
        end = end.max(e);
    }

    let mut bytes = vec![0u8; end];
    let mut filled = vec![false; end];
    let mut in_capture_order: Vec<&(usize, usize, &Segment<'_>)> =
        spans.iter().filter(|(off, _, _)| *off < end).collect();
    in_capture_order.sort_by_key(|(_, _, s)| s.capture_index);
    for (off, e, s) in in_capture_order {
        let stop = (*e).min(end);
        for pos in *off..stop {
            if !filled[pos] {
                bytes[pos] = s.payload[pos - off];
                filled[pos] = true;
            }
        }
    }

    let mut marks: Vec<(usize, usize, u64)> = spans
        .iter()
        .filter(|(off, _, _)| *off < end)
        .map(|(off, _, s)| (*off, s.capture_index, s.ts))
        .collect();
    marks.sort();
    marks.dedup_by_key(|m| m.0);
    (bytes, marks)
}
