//! Application data units: maximal same-direction runs of payload-bearing
//! packets.

use std::fmt;
use std::net::{Ipv4Addr, SocketAddrV4};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::pcap::{Packet, Proto};

/// Default idle gap that closes an ADU.
pub const DEFAULT_ADU_GAP: Duration = Duration::from_secs(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Endpoint {
    pub ip: Ipv4Addr,
    pub port: u16,
}

impl From<SocketAddrV4> for Endpoint {
    fn from(a: SocketAddrV4) -> Self {
        Endpoint {
            ip: *a.ip(),
            port: a.port(),
        }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.ip, self.port)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Adu {
    pub src: Endpoint,
    pub dst: Endpoint,
    pub proto: Proto,
    /// Member payloads concatenated in capture order.
    pub payload: Vec<u8>,
    /// Indices into the packet list the ADU was assembled from.
    pub packet_indices: Vec<usize>,
    pub start_us: u64,
}

impl Adu {
    fn key(&self) -> (Endpoint, Endpoint, Proto) {
        (self.src, self.dst, self.proto)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AduSequence {
    pub source_id: String,
    pub adus: Vec<Adu>,
}

impl AduSequence {
    pub fn len(&self) -> usize {
        self.adus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adus.is_empty()
    }
}

/// Groups `packets` (timestamp ordered) into ADUs.
///
/// Packets without payload are ignored: they neither join an ADU nor
/// break a run. A new ADU starts when the (src, dst, proto) key differs
/// from the previous payload-bearing packet or when the gap to it
/// exceeds `gap`.
pub fn assemble_adus(source_id: impl Into<String>, packets: &[Packet], gap: Duration) -> AduSequence {
    let gap_us = gap.as_micros().min(u128::from(u64::MAX)) as u64;
    let mut adus: Vec<Adu> = Vec::new();
    let mut last_ts = 0u64;
    for (idx, p) in packets.iter().enumerate() {
        if p.payload.is_empty() {
            continue;
        }
        let key = (Endpoint::from(p.src()), Endpoint::from(p.dst()), p.proto);
        let extend = match adus.last() {
            Some(cur) => cur.key() == key && p.timestamp_us.saturating_sub(last_ts) <= gap_us,
            None => false,
        };
        if extend {
            let cur = adus.last_mut().expect("checked above");
            cur.payload.extend_from_slice(&p.payload);
            cur.packet_indices.push(idx);
        } else {
            adus.push(Adu {
                src: key.0,
                dst: key.1,
                proto: key.2,
                payload: p.payload.clone(),
                packet_indices: vec![idx],
                start_us: p.timestamp_us,
            });
        }
        last_ts = p.timestamp_us;
    }
    AduSequence {
        source_id: source_id.into(),
        adus,
    }
}
