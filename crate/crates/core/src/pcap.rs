//! Classic pcap reading and writing.
//!
//! Only the classic (non-ng) format with microsecond timestamps and an
//! Ethernet link layer is accepted. Records that do not carry an IPv4
//! packet are skipped and counted; everything else is decoded into a
//! [`Packet`] that keeps its original record bytes so a capture can be
//! written back out byte-for-byte.

use std::fmt;
use std::net::{Ipv4Addr, SocketAddrV4};

use serde::{Deserialize, Serialize};
use thiserror::Error;

const MAGIC_MICROS: u32 = 0xa1b2_c3d4;
const GLOBAL_HEADER_LEN: usize = 24;
const RECORD_HEADER_LEN: usize = 16;
const LINKTYPE_ETHERNET: u32 = 1;

const ETHERTYPE_IPV4: u16 = 0x0800;
const ETHERTYPE_VLAN: u16 = 0x8100;

const IPPROTO_ICMP: u8 = 1;
const IPPROTO_TCP: u8 = 6;
const IPPROTO_UDP: u8 = 17;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PcapError {
    #[error("bad pcap magic {0:#010x}")]
    BadMagic(u32),
    #[error("unsupported link type {0} (only Ethernet is supported)")]
    UnsupportedLinkType(u32),
    #[error("truncated capture at offset {offset}: need {needed} bytes, {available} available")]
    TruncatedFile {
        offset: usize,
        needed: usize,
        available: usize,
    },
}

/// Transport protocol carried by an IPv4 packet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Proto {
    Tcp,
    Udp,
    Icmp,
    Other,
}

impl Proto {
    pub fn has_ports(self) -> bool {
        matches!(self, Proto::Tcp | Proto::Udp)
    }

    fn from_ip_proto(p: u8) -> Self {
        match p {
            IPPROTO_TCP => Proto::Tcp,
            IPPROTO_UDP => Proto::Udp,
            IPPROTO_ICMP => Proto::Icmp,
            _ => Proto::Other,
        }
    }
}

impl fmt::Display for Proto {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Proto::Tcp => "TCP",
            Proto::Udp => "UDP",
            Proto::Icmp => "ICMP",
            Proto::Other => "OTHER",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ByteOrder {
    Little,
    Big,
}

impl ByteOrder {
    fn u32(self, b: &[u8]) -> u32 {
        let a = [b[0], b[1], b[2], b[3]];
        match self {
            ByteOrder::Little => u32::from_le_bytes(a),
            ByteOrder::Big => u32::from_be_bytes(a),
        }
    }

    fn u16(self, b: &[u8]) -> u16 {
        let a = [b[0], b[1]];
        match self {
            ByteOrder::Little => u16::from_le_bytes(a),
            ByteOrder::Big => u16::from_be_bytes(a),
        }
    }

    fn put_u32(self, out: &mut Vec<u8>, v: u32) {
        match self {
            ByteOrder::Little => out.extend_from_slice(&v.to_le_bytes()),
            ByteOrder::Big => out.extend_from_slice(&v.to_be_bytes()),
        }
    }

    fn put_u16(self, out: &mut Vec<u8>, v: u16) {
        match self {
            ByteOrder::Little => out.extend_from_slice(&v.to_le_bytes()),
            ByteOrder::Big => out.extend_from_slice(&v.to_be_bytes()),
        }
    }
}

/// The raw pcap record a packet was decoded from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawRecord {
    pub ts_sec: u32,
    pub ts_usec: u32,
    pub orig_len: u32,
    pub data: Vec<u8>,
}

/// A decoded IPv4 packet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packet {
    /// Microseconds since the epoch.
    pub timestamp_us: u64,
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    /// Zero when `proto` has no port concept.
    pub src_port: u16,
    pub dst_port: u16,
    pub proto: Proto,
    pub payload: Vec<u8>,
    pub record: RawRecord,
}

impl Packet {
    pub fn src(&self) -> SocketAddrV4 {
        SocketAddrV4::new(self.src_ip, self.src_port)
    }

    pub fn dst(&self) -> SocketAddrV4 {
        SocketAddrV4::new(self.dst_ip, self.dst_port)
    }

    /// Builds a TCP packet with a synthetic Ethernet/IPv4/TCP frame.
    pub fn tcp(ts_us: u64, src: SocketAddrV4, dst: SocketAddrV4, flags: u8, seq: u32, payload: &[u8]) -> Packet {
        let mut l4 = Vec::with_capacity(20 + payload.len());
        l4.extend_from_slice(&src.port().to_be_bytes());
        l4.extend_from_slice(&dst.port().to_be_bytes());
        l4.extend_from_slice(&seq.to_be_bytes());
        l4.extend_from_slice(&0u32.to_be_bytes());
        l4.push(5 << 4);
        l4.push(flags);
        l4.extend_from_slice(&65535u16.to_be_bytes());
        l4.extend_from_slice(&[0, 0, 0, 0]);
        l4.extend_from_slice(payload);
        let csum = transport_checksum(*src.ip(), *dst.ip(), IPPROTO_TCP, &l4);
        l4[16..18].copy_from_slice(&csum.to_be_bytes());
        Self::from_l4(ts_us, src, dst, IPPROTO_TCP, &l4)
    }

    /// Builds a UDP packet with a synthetic Ethernet/IPv4/UDP frame.
    pub fn udp(ts_us: u64, src: SocketAddrV4, dst: SocketAddrV4, payload: &[u8]) -> Packet {
        let len = (8 + payload.len()) as u16;
        let mut l4 = Vec::with_capacity(len as usize);
        l4.extend_from_slice(&src.port().to_be_bytes());
        l4.extend_from_slice(&dst.port().to_be_bytes());
        l4.extend_from_slice(&len.to_be_bytes());
        l4.extend_from_slice(&[0, 0]);
        l4.extend_from_slice(payload);
        let csum = match transport_checksum(*src.ip(), *dst.ip(), IPPROTO_UDP, &l4) {
            0 => 0xffff,
            c => c,
        };
        l4[6..8].copy_from_slice(&csum.to_be_bytes());
        Self::from_l4(ts_us, src, dst, IPPROTO_UDP, &l4)
    }

    fn from_l4(ts_us: u64, src: SocketAddrV4, dst: SocketAddrV4, ip_proto: u8, l4: &[u8]) -> Packet {
        let total = (20 + l4.len()) as u16;
        let mut frame = Vec::with_capacity(14 + total as usize);
        frame.extend_from_slice(&[0x02, 0, 0, 0, 0, 0x02]);
        frame.extend_from_slice(&[0x02, 0, 0, 0, 0, 0x01]);
        frame.extend_from_slice(&ETHERTYPE_IPV4.to_be_bytes());
        let mut ip = [0u8; 20];
        ip[0] = 0x45;
        ip[2..4].copy_from_slice(&total.to_be_bytes());
        ip[6] = 0x40; // DF
        ip[8] = 64;
        ip[9] = ip_proto;
        ip[12..16].copy_from_slice(&src.ip().octets());
        ip[16..20].copy_from_slice(&dst.ip().octets());
        let csum = ones_complement(&ip, 0);
        ip[10..12].copy_from_slice(&csum.to_be_bytes());
        frame.extend_from_slice(&ip);
        frame.extend_from_slice(l4);
        let record = RawRecord {
            ts_sec: (ts_us / 1_000_000) as u32,
            ts_usec: (ts_us % 1_000_000) as u32,
            orig_len: frame.len() as u32,
            data: frame,
        };
        decode_record(record).expect("synthetic frame decodes")
    }
}

fn ones_complement(data: &[u8], initial: u32) -> u16 {
    let mut sum = initial;
    for chunk in data.chunks(2) {
        let word = if chunk.len() == 2 {
            u16::from_be_bytes([chunk[0], chunk[1]])
        } else {
            u16::from_be_bytes([chunk[0], 0])
        };
        sum += u32::from(word);
    }
    while sum > 0xffff {
        sum = (sum & 0xffff) + (sum >> 16);
    }
    !(sum as u16)
}

fn transport_checksum(src: Ipv4Addr, dst: Ipv4Addr, proto: u8, l4: &[u8]) -> u16 {
    let mut pseudo = Vec::with_capacity(12);
    pseudo.extend_from_slice(&src.octets());
    pseudo.extend_from_slice(&dst.octets());
    pseudo.push(0);
    pseudo.push(proto);
    pseudo.extend_from_slice(&(l4.len() as u16).to_be_bytes());
    let partial = !ones_complement(&pseudo, 0);
    ones_complement(l4, u32::from(partial))
}

/// A parsed capture file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Capture {
    pub byte_order: ByteOrder,
    pub version: (u16, u16),
    pub thiszone: i32,
    pub sigfigs: u32,
    pub snaplen: u32,
    pub packets: Vec<Packet>,
    /// Records that were not IPv4 or whose headers did not decode.
    pub skipped: usize,
}

impl Capture {
    /// A little-endian v2.4 Ethernet capture holding `packets`.
    pub fn from_packets(packets: Vec<Packet>) -> Self {
        Capture {
            byte_order: ByteOrder::Little,
            version: (2, 4),
            thiszone: 0,
            sigfigs: 0,
            snaplen: 65535,
            packets,
            skipped: 0,
        }
    }

    /// Serializes the global header and every decoded packet's record.
    pub fn to_bytes(&self) -> Vec<u8> {
        let bo = self.byte_order;
        let mut out = Vec::with_capacity(
            GLOBAL_HEADER_LEN
                + self
                    .packets
                    .iter()
                    .map(|p| RECORD_HEADER_LEN + p.record.data.len())
                    .sum::<usize>(),
        );
        bo.put_u32(&mut out, MAGIC_MICROS);
        bo.put_u16(&mut out, self.version.0);
        bo.put_u16(&mut out, self.version.1);
        bo.put_u32(&mut out, self.thiszone as u32);
        bo.put_u32(&mut out, self.sigfigs);
        bo.put_u32(&mut out, self.snaplen);
        bo.put_u32(&mut out, LINKTYPE_ETHERNET);
        for p in &self.packets {
            write_record(&mut out, bo, &p.record);
        }
        out
    }
}

fn write_record(out: &mut Vec<u8>, bo: ByteOrder, r: &RawRecord) {
    bo.put_u32(out, r.ts_sec);
    bo.put_u32(out, r.ts_usec);
    bo.put_u32(out, r.data.len() as u32);
    bo.put_u32(out, r.orig_len);
    out.extend_from_slice(&r.data);
}

/// Parses a classic pcap byte stream.
pub fn parse_capture(bytes: &[u8]) -> Result<Capture, PcapError> {
    if bytes.len() < 4 {
        return Err(PcapError::TruncatedFile {
            offset: 0,
            needed: GLOBAL_HEADER_LEN,
            available: bytes.len(),
        });
    }
    let byte_order = if u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) == MAGIC_MICROS {
        ByteOrder::Little
    } else if u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) == MAGIC_MICROS {
        ByteOrder::Big
    } else {
        return Err(PcapError::BadMagic(u32::from_be_bytes([
            bytes[0], bytes[1], bytes[2], bytes[3],
        ])));
    };
    if bytes.len() < GLOBAL_HEADER_LEN {
        return Err(PcapError::TruncatedFile {
            offset: 0,
            needed: GLOBAL_HEADER_LEN,
            available: bytes.len(),
        });
    }
    let bo = byte_order;
    let linktype = bo.u32(&bytes[20..24]);
    if linktype != LINKTYPE_ETHERNET {
        return Err(PcapError::UnsupportedLinkType(linktype));
    }
    let mut capture = Capture {
        byte_order,
        version: (bo.u16(&bytes[4..6]), bo.u16(&bytes[6..8])),
        thiszone: bo.u32(&bytes[8..12]) as i32,
        sigfigs: bo.u32(&bytes[12..16]),
        snaplen: bo.u32(&bytes[16..20]),
        packets: Vec::new(),
        skipped: 0,
    };

    let mut off = GLOBAL_HEADER_LEN;
    while off < bytes.len() {
        let rest = &bytes[off..];
        if rest.len() < RECORD_HEADER_LEN {
            return Err(PcapError::TruncatedFile {
                offset: off,
                needed: RECORD_HEADER_LEN,
                available: rest.len(),
            });
        }
        let incl_len = bo.u32(&rest[8..12]) as usize;
        if rest.len() - RECORD_HEADER_LEN < incl_len {
            return Err(PcapError::TruncatedFile {
                offset: off,
                needed: RECORD_HEADER_LEN + incl_len,
                available: rest.len(),
            });
        }
        let record = RawRecord {
            ts_sec: bo.u32(&rest[0..4]),
            ts_usec: bo.u32(&rest[4..8]),
            orig_len: bo.u32(&rest[12..16]),
            data: rest[RECORD_HEADER_LEN..RECORD_HEADER_LEN + incl_len].to_vec(),
        };
        match decode_record(record) {
            Some(p) => capture.packets.push(p),
            None => capture.skipped += 1,
        }
        off += RECORD_HEADER_LEN + incl_len;
    }
    Ok(capture)
}

fn decode_record(record: RawRecord) -> Option<Packet> {
    let frame = &record.data;
    if frame.len() < 14 {
        return None;
    }
    let mut ethertype = u16::from_be_bytes([frame[12], frame[13]]);
    let mut l3 = 14;
    if ethertype == ETHERTYPE_VLAN {
        if frame.len() < 18 {
            return None;
        }
        ethertype = u16::from_be_bytes([frame[16], frame[17]]);
        l3 = 18;
    }
    if ethertype != ETHERTYPE_IPV4 {
        return None;
    }
    let ip = &frame[l3..];
    if ip.len() < 20 || ip[0] >> 4 != 4 {
        return None;
    }
    let ihl = usize::from(ip[0] & 0x0f) * 4;
    let total_len = usize::from(u16::from_be_bytes([ip[2], ip[3]]));
    if ihl < 20 || total_len < ihl || ip.len() < ihl {
        return None;
    }
    // fragments other than the first carry no transport header
    let frag_offset = u16::from_be_bytes([ip[6], ip[7]]) & 0x1fff;
    if frag_offset != 0 {
        return None;
    }
    let ip_end = total_len.min(ip.len());
    let l4 = &ip[ihl..ip_end];
    let proto = Proto::from_ip_proto(ip[9]);
    let src_ip = Ipv4Addr::new(ip[12], ip[13], ip[14], ip[15]);
    let dst_ip = Ipv4Addr::new(ip[16], ip[17], ip[18], ip[19]);

    let (src_port, dst_port, payload) = match proto {
        Proto::Tcp => {
            if l4.len() < 20 {
                return None;
            }
            let data_off = usize::from(l4[12] >> 4) * 4;
            if data_off < 20 || data_off > l4.len() {
                return None;
            }
            (
                u16::from_be_bytes([l4[0], l4[1]]),
                u16::from_be_bytes([l4[2], l4[3]]),
                &l4[data_off..],
            )
        }
        Proto::Udp => {
            if l4.len() < 8 {
                return None;
            }
            (
                u16::from_be_bytes([l4[0], l4[1]]),
                u16::from_be_bytes([l4[2], l4[3]]),
                &l4[8..],
            )
        }
        Proto::Icmp => {
            if l4.len() < 8 {
                return None;
            }
            (0, 0, &l4[8..])
        }
        Proto::Other => (0, 0, l4),
    };

    Some(Packet {
        timestamp_us: u64::from(record.ts_sec) * 1_000_000 + u64::from(record.ts_usec),
        src_ip,
        dst_ip,
        src_port,
        dst_port,
        proto,
        payload: payload.to_vec(),
        record,
    })
}

/// TCP flag bits used by [`Packet::tcp`].
pub mod tcp_flags {
    pub const FIN: u8 = 0x01;
    pub const SYN: u8 = 0x02;
    pub const PSH: u8 = 0x08;
    pub const ACK: u8 = 0x10;
}
