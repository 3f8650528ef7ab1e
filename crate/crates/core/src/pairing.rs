//! Vulnerability-description to packet pairing.
//!
//! A description is cut into sentences, every payload-bearing packet of
//! the malicious traffic is rendered as text, and the `k` closest
//! sentence/packet pairs under a pluggable distance are kept.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::pcap::{Packet, Proto};

pub const DEFAULT_TOP_K: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceContext {
    pub text: String,
    pub index: usize,
}

/// Where a rendered packet came from: capture, ADU, packet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PacketRef {
    pub sequence: usize,
    pub adu: usize,
    pub packet: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PacketContext {
    pub rendering: String,
    pub adu_ref: PacketRef,
    pub proto: Proto,
    pub dst_port: u16,
    #[serde(skip)]
    pub payload: Vec<u8>,
}

impl PacketContext {
    pub fn from_packet(packet: &Packet, adu_ref: PacketRef) -> Self {
        PacketContext {
            rendering: render_packet(packet),
            adu_ref,
            proto: packet.proto,
            dst_port: packet.dst_port,
            payload: packet.payload.clone(),
        }
    }
}

/// `PROTO src -> dst payload`, with bytes outside printable ASCII
/// written as `\xNN` and backslashes doubled.
pub fn render_packet(p: &Packet) -> String {
    let mut s = format!("{} {} -> {} ", p.proto, p.src(), p.dst());
    for &b in &p.payload {
        match b {
            b'\\' => s.push_str("\\\\"),
            0x20..=0x7e => s.push(b as char),
            _ => s.push_str(&format!("\\x{b:02x}")),
        }
    }
    s
}

/// Splits on newlines, and on `.`, `!`, `?` when followed by whitespace or
/// the end of the text, so dotted versions and addresses stay intact.
pub fn segment_description(vd: &str) -> Vec<SentenceContext> {
    let mut out = Vec::new();
    let mut start = 0;
    let bytes = vd.as_bytes();
    let mut push = |s: &str| {
        let t = s.trim();
        if !t.is_empty() {
            out.push(SentenceContext {
                text: t.to_string(),
                index: out.len(),
            });
        }
    };
    for (i, &b) in bytes.iter().enumerate() {
        let ends = match b {
            b'\n' => true,
            b'.' | b'!' | b'?' => bytes.get(i + 1).is_none_or(|n| n.is_ascii_whitespace()),
            _ => false,
        };
        if ends {
            push(&vd[start..i]);
            start = i + 1;
        }
    }
    push(&vd[start..]);
    out
}

/// A distance between a sentence and a packet rendering.
pub trait DistanceMetric: Sync {
    fn distance(&self, sentence: &str, rendering: &str) -> f64;
}

/// Cosine distance between bags of character 3-grams taken from the
/// lower-cased alphanumeric tokens of each text. Tokens shorter than
/// three characters are grams on their own.
#[derive(Debug, Clone, Copy, Default)]
pub struct NgramCosine;

fn ngram_bag(text: &str) -> BTreeMap<String, u64> {
    let mut bag = BTreeMap::new();
    let lower = text.to_lowercase();
    for tok in lower.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
        let chars: Vec<char> = tok.chars().collect();
        if chars.len() < 3 {
            *bag.entry(tok.to_string()).or_insert(0) += 1;
        } else {
            for w in chars.windows(3) {
                *bag.entry(w.iter().collect::<String>()).or_insert(0) += 1;
            }
        }
    }
    bag
}

impl DistanceMetric for NgramCosine {
    fn distance(&self, a: &str, b: &str) -> f64 {
        let (x, y) = (ngram_bag(a), ngram_bag(b));
        if x == y {
            return 0.0;
        }
        if x.is_empty() || y.is_empty() {
            return 1.0;
        }
        let dot: u64 = x.iter().filter_map(|(k, v)| y.get(k).map(|w| v * w)).sum();
        let nx: u64 = x.values().map(|v| v * v).sum();
        let ny: u64 = y.values().map(|v| v * v).sum();
        let cos = dot as f64 / ((nx as f64).sqrt() * (ny as f64).sqrt());
        (1.0 - cos).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedPair {
    pub sentence: SentenceContext,
    pub packet: PacketContext,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedPairs {
    pub pairs: Vec<RankedPair>,
    pub k: usize,
}

/// The `k` smallest-distance pairs of the full cross product, ties
/// broken by (sentence position, packet position).
pub fn join_label(vc: &[SentenceContext], nc: &[PacketContext], k: usize, metric: &dyn DistanceMetric) -> RankedPairs {
    use rayon::prelude::*;
    let mut scored: Vec<(f64, usize, usize)> = (0..vc.len() * nc.len())
        .into_par_iter()
        .map(|idx| {
            let (s, p) = (idx / nc.len(), idx % nc.len());
            (metric.distance(&vc[s].text, &nc[p].rendering), s, p)
        })
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    scored.truncate(k);
    RankedPairs {
        pairs: scored
            .into_iter()
            .map(|(d, s, p)| RankedPair {
                sentence: vc[s].clone(),
                packet: nc[p].clone(),
                distance: d,
            })
            .collect(),
        k,
    }
}

/// Substrings of `text` that look like matchable signature tokens:
/// runs of `[A-Za-z0-9:._-]` with trailing separators trimmed, 3 to 40
/// bytes long and containing a letter.
pub fn pattern_tokens(text: &[u8]) -> Vec<Vec<u8>> {
    text.split(|&b| !(b.is_ascii_alphanumeric() || matches!(b, b':' | b'.' | b'_' | b'-')))
        .map(|t| {
            let end = t.iter().rposition(|b| b.is_ascii_alphanumeric()).map_or(0, |i| i + 1);
            &t[..end]
        })
        .filter(|t| (3..=40).contains(&t.len()) && t.iter().any(u8::is_ascii_alphabetic))
        .map(<[u8]>::to_vec)
        .collect()
}
