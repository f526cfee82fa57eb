//! PCAPNG front-end: block parsing, link-layer decoding, and a small writer
//! used to synthesize captures for tests and fixtures.

use std::net::IpAddr;

use etherparse::{NetSlice, PacketBuilder, SlicedPacket, TransportSlice};
use pcap_parser::pcapng::{parse_block_be, parse_block_le, Block};
use pcap_parser::traits::PcapNGPacketBlock;
use pcap_parser::{Linktype, OptionCode};

use super::{Annotation, Endpoint, IngestError, Packet};

/// Decoded packets of one capture plus skip accounting.
#[derive(Debug, Clone, Default)]
pub struct Capture {
    pub packets: Vec<Packet>,
    /// Indices (over all packet blocks) lacking an `app=` annotation.
    pub missing_annotation: Vec<usize>,
    pub non_tcp: usize,
}

struct Interface {
    linktype: Linktype,
    resolution: u64,
    offset_s: i64,
}

const BOM_LE: [u8; 4] = [0x4D, 0x3C, 0x2B, 0x1A];
const BOM_BE: [u8; 4] = [0x1A, 0x2B, 0x3C, 0x4D];

pub fn read_packets(data: &[u8]) -> Result<Capture, IngestError> {
    let mut out = Capture::default();
    let mut interfaces: Vec<Interface> = Vec::new();
    let mut big_endian = false;
    let mut packet_index = 0usize;
    let mut rest = data;

    while !rest.is_empty() {
        let offset = data.len() - rest.len();
        if rest.starts_with(&super::PCAPNG_MAGIC) {
            match rest.get(8..12) {
                Some(b) if b == BOM_LE => big_endian = false,
                Some(b) if b == BOM_BE => big_endian = true,
                _ => return Err(IngestError::MalformedBlock(offset)),
            }
        } else if offset == 0 {
            return Err(IngestError::MalformedBlock(0));
        }
        let parsed = if big_endian {
            parse_block_be(rest)
        } else {
            parse_block_le(rest)
        };
        let (next, block) = parsed.map_err(|_| IngestError::MalformedBlock(offset))?;
        if next.len() >= rest.len() {
            return Err(IngestError::MalformedBlock(offset));
        }
        rest = next;

        match block {
            Block::SectionHeader(_) => interfaces.clear(),
            Block::InterfaceDescription(idb) => interfaces.push(Interface {
                linktype: idb.linktype,
                resolution: idb.ts_resolution().unwrap_or(1_000_000),
                offset_s: idb.ts_offset(),
            }),
            Block::EnhancedPacket(epb) => {
                let index = packet_index;
                packet_index += 1;
                let comment = epb
                    .options
                    .iter()
                    .find(|o| o.code == OptionCode::Comment)
                    .and_then(|o| o.as_str().ok())
                    .map(|s| s.trim_end_matches('\0').to_string());
                let Some((ann, comment)) = comment.and_then(|c| Annotation::parse(&c).map(|a| (a, c))) else {
                    log::debug!("packet {index} has no app annotation; skipped");
                    out.missing_annotation.push(index);
                    continue;
                };
                let Some(iface) = interfaces.get(epb.if_id as usize) else {
                    return Err(IngestError::MalformedBlock(offset));
                };
                let ticks = ((epb.ts_high as u64) << 32) | epb.ts_low as u64;
                let ts_us = to_micros(ticks, iface.resolution, iface.offset_s);
                match decode_tcp(iface.linktype, epb.packet_data()) {
                    Some((src, dst, seq, ack, payload)) => out.packets.push(Packet {
                        app_id: ann.app,
                        timestamp_us: ts_us,
                        src,
                        dst,
                        tcp_seq: seq,
                        tcp_ack: ack,
                        payload,
                        comment,
                    }),
                    None => out.non_tcp += 1,
                }
            }
            Block::SimplePacket(_) => {
                // no options, hence never annotated
                out.missing_annotation.push(packet_index);
                packet_index += 1;
            }
            _ => {}
        }
    }
    Ok(out)
}

/// Converts interface ticks to microseconds; coarser resolutions are scaled up.
fn to_micros(ticks: u64, resolution: u64, offset_s: i64) -> u64 {
    let us = (ticks as u128 * 1_000_000) / resolution.max(1) as u128;
    let us = us as i128 + offset_s as i128 * 1_000_000;
    us.clamp(0, u64::MAX as i128) as u64
}

type TcpParts = (Endpoint, Endpoint, u32, u32, Vec<u8>);

fn decode_tcp(linktype: Linktype, frame: &[u8]) -> Option<TcpParts> {
    let sliced = match linktype {
        Linktype::ETHERNET => SlicedPacket::from_ethernet(frame).ok()?,
        Linktype::LINUX_SLL => SlicedPacket::from_linux_sll(frame).ok()?,
        Linktype::RAW | Linktype::IPV4 | Linktype::IPV6 => SlicedPacket::from_ip(frame).ok()?,
        Linktype::NULL | Linktype::LOOP => SlicedPacket::from_ip(frame.get(4..)?).ok()?,
        _ => return None,
    };
    let (src_ip, dst_ip): (IpAddr, IpAddr) = match sliced.net? {
        NetSlice::Ipv4(ip) => (ip.header().source_addr().into(), ip.header().destination_addr().into()),
        NetSlice::Ipv6(ip) => (ip.header().source_addr().into(), ip.header().destination_addr().into()),
        _ => return None,
    };
    let TransportSlice::Tcp(tcp) = sliced.transport? else {
        return None;
    };
    Some((
        Endpoint {
            ip: src_ip,
            port: tcp.source_port(),
        },
        Endpoint {
            ip: dst_ip,
            port: tcp.destination_port(),
        },
        tcp.sequence_number(),
        tcp.acknowledgment_number(),
        tcp.payload().to_vec(),
    ))
}

/// Builds an Ethernet/IP/TCP frame.
pub fn tcp_frame(src: Endpoint, dst: Endpoint, seq: u32, ack: u32, payload: &[u8]) -> Vec<u8> {
    let eth = PacketBuilder::ethernet2([2, 0, 0, 0, 0, 1], [2, 0, 0, 0, 0, 2]);
    let ip = match (src.ip, dst.ip) {
        (IpAddr::V4(s), IpAddr::V4(d)) => eth.ipv4(s.octets(), d.octets(), 64),
        (IpAddr::V6(s), IpAddr::V6(d)) => eth.ipv6(s.octets(), d.octets(), 64),
        (s, d) => panic!("mixed address families {s} / {d}"),
    };
    let builder = ip.tcp(src.port, dst.port, seq, 65535).ack(ack).psh();
    let mut out = Vec::with_capacity(builder.size(payload.len()));
    builder.write(&mut out, payload).expect("writing to a Vec cannot fail");
    out
}

/// Builds an Ethernet/IPv4/UDP frame.
pub fn udp_frame(src: Endpoint, dst: Endpoint, payload: &[u8]) -> Vec<u8> {
    let (IpAddr::V4(s), IpAddr::V4(d)) = (src.ip, dst.ip) else {
        panic!("udp_frame supports IPv4 only");
    };
    let builder = PacketBuilder::ethernet2([2, 0, 0, 0, 0, 1], [2, 0, 0, 0, 0, 2])
        .ipv4(s.octets(), d.octets(), 64)
        .udp(src.port, dst.port);
    let mut out = Vec::with_capacity(builder.size(payload.len()));
    builder.write(&mut out, payload).expect("writing to a Vec cannot fail");
    out
}

/// Minimal PCAPNG writer: one section, one Ethernet interface.
pub struct Writer {
    buf: Vec<u8>,
    big_endian: bool,
    tsresol: u8,
}

impl Writer {
    pub fn new() -> Self {
        Self::with_options(false, 6)
    }

    /// `tsresol` follows the `if_tsresol` encoding (6 = microseconds).
    pub fn with_options(big_endian: bool, tsresol: u8) -> Self {
        let mut w = Writer {
            buf: Vec::new(),
            big_endian,
            tsresol,
        };
        let mut shb = Vec::new();
        w.u32(&mut shb, 0x1A2B_3C4D);
        w.u16(&mut shb, 1);
        w.u16(&mut shb, 0);
        shb.extend_from_slice(&if big_endian {
            (-1i64).to_be_bytes()
        } else {
            (-1i64).to_le_bytes()
        });
        w.block(0x0A0D_0D0A, &shb);

        let mut idb = Vec::new();
        w.u16(&mut idb, 1); // Ethernet
        w.u16(&mut idb, 0);
        w.u32(&mut idb, 0);
        if tsresol != 6 {
            w.option(&mut idb, 9, &[tsresol]);
        }
        w.option(&mut idb, 0, &[]);
        w.block(1, &idb);
        w
    }

    fn u16(&self, out: &mut Vec<u8>, v: u16) {
        out.extend_from_slice(&if self.big_endian {
            v.to_be_bytes()
        } else {
            v.to_le_bytes()
        });
    }

    fn u32(&self, out: &mut Vec<u8>, v: u32) {
        out.extend_from_slice(&if self.big_endian {
            v.to_be_bytes()
        } else {
            v.to_le_bytes()
        });
    }

    fn option(&self, out: &mut Vec<u8>, code: u16, value: &[u8]) {
        self.u16(out, code);
        self.u16(out, value.len() as u16);
        out.extend_from_slice(value);
        pad4(out);
    }

    fn block(&mut self, block_type: u32, body: &[u8]) {
        let total = (12 + body.len()) as u32;
        let mut out = Vec::with_capacity(total as usize);
        self.u32(&mut out, block_type);
        self.u32(&mut out, total);
        out.extend_from_slice(body);
        self.u32(&mut out, total);
        self.buf.extend_from_slice(&out);
    }

    /// Appends an Enhanced Packet Block; `ts_us` is converted to the
    /// interface resolution.
    pub fn packet(&mut self, ts_us: u64, frame: &[u8], comment: Option<&str>) {
        let ticks = if self.tsresol >= 6 {
            ts_us * 10u64.pow(self.tsresol as u32 - 6)
        } else {
            ts_us / 10u64.pow(6 - self.tsresol as u32)
        };
        let mut body = Vec::new();
        self.u32(&mut body, 0);
        self.u32(&mut body, (ticks >> 32) as u32);
        self.u32(&mut body, ticks as u32);
        self.u32(&mut body, frame.len() as u32);
        self.u32(&mut body, frame.len() as u32);
        body.extend_from_slice(frame);
        pad4(&mut body);
        if let Some(c) = comment {
            self.option(&mut body, 1, c.as_bytes());
            self.option(&mut body, 0, &[]);
        }
        self.block(6, &body);
    }

    /// Appends a Simple Packet Block, which cannot carry an annotation.
    pub fn simple_packet(&mut self, frame: &[u8]) {
        let mut body = Vec::new();
        self.u32(&mut body, frame.len() as u32);
        body.extend_from_slice(frame);
        pad4(&mut body);
        self.block(3, &body);
    }

    /// Appends a TCP packet carrying `p.comment` (omitted when empty).
    pub fn tcp_packet(&mut self, p: &Packet) {
        let frame = tcp_frame(p.src, p.dst, p.tcp_seq, p.tcp_ack, &p.payload);
        let comment = (!p.comment.is_empty()).then_some(p.comment.as_str());
        self.packet(p.timestamp_us, &frame, comment);
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

impl Default for Writer {
    fn default() -> Self {
        Self::new()
    }
}

fn pad4(out: &mut Vec<u8>) {
    while !out.len().is_multiple_of(4) {
        out.push(0);
    }
}

/// Serializes packets into a capture, one EPB per packet.
pub fn write_packets(packets: &[Packet]) -> Vec<u8> {
    let mut w = Writer::new();
    for p in packets {
        w.tcp_packet(p);
    }
    w.finish()
}
