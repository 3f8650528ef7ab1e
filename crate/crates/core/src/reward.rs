//! ADU-level F1 reward.
//!
//! Malicious captures mostly contain ordinary background traffic, so the
//! malicious ADUs that also appear (near-identically) in the benign
//! captures are removed first. True and false negatives are then counted
//! over the remaining attack ADUs only, and false positives over the
//! benign ADUs only.

use serde::{Deserialize, Serialize};

use crate::adu::{Adu, AduSequence};
use crate::vnf::VnfInstance;

/// Default similarity at or above which a malicious ADU counts as benign
/// background.
pub const DEFAULT_PAIR_THRESHOLD: f64 = 0.9;

/// Position of an ADU inside a list of sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AduRef {
    pub sequence: usize,
    pub adu: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AduCorpus {
    pub benign: Vec<AduSequence>,
    pub malicious: Vec<AduSequence>,
}

impl AduCorpus {
    pub fn benign_adus(&self) -> impl Iterator<Item = (AduRef, &Adu)> {
        flatten(&self.benign)
    }

    pub fn malicious_adus(&self) -> impl Iterator<Item = (AduRef, &Adu)> {
        flatten(&self.malicious)
    }
}

pub(crate) fn flatten(seqs: &[AduSequence]) -> impl Iterator<Item = (AduRef, &Adu)> {
    seqs.iter().enumerate().flat_map(|(s, seq)| {
        seq.adus
            .iter()
            .enumerate()
            .map(move |(a, adu)| (AduRef { sequence: s, adu: a }, adu))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackAdu {
    pub origin: AduRef,
    pub adu: Adu,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExcludedAdu {
    pub malicious: AduRef,
    pub benign: AduRef,
    pub similarity: f64,
}

/// Malicious ADUs split into attack traffic (`M - B`) and excluded
/// benign-looking background.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DiffResult {
    pub attack: Vec<AttackAdu>,
    pub excluded: Vec<ExcludedAdu>,
}

impl DiffResult {
    pub fn attack_adus(&self) -> impl Iterator<Item = &Adu> {
        self.attack.iter().map(|a| &a.adu)
    }
}

/// Sorted, deduplicated byte-3-gram set. Payloads shorter than three
/// bytes contribute one gram tagged with their length.
fn grams(payload: &[u8]) -> Vec<u32> {
    let mut g: Vec<u32> = if payload.len() < 3 {
        if payload.is_empty() {
            Vec::new()
        } else {
            let mut v = (payload.len() as u32) << 24;
            for (i, &b) in payload.iter().enumerate() {
                v |= u32::from(b) << (8 * i);
            }
            vec![v]
        }
    } else {
        payload
            .windows(3)
            .map(|w| u32::from(w[0]) | u32::from(w[1]) << 8 | u32::from(w[2]) << 16)
            .collect()
    };
    g.sort_unstable();
    g.dedup();
    g
}

fn jaccard(a: &[u32], b: &[u32]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

/// Byte-3-gram Jaccard similarity of payloads; zero across protocols.
pub fn adu_similarity(a: &Adu, b: &Adu) -> f64 {
    if a.proto != b.proto {
        return 0.0;
    }
    jaccard(&grams(&a.payload), &grams(&b.payload))
}

/// Greedy similarity matching of every malicious ADU against the union
/// of benign ADUs. The highest-similarity unmatched pair is taken first,
/// ties broken by (malicious, benign) position; a malicious ADU is
/// excluded when its partner's similarity reaches `threshold`.
pub fn pair_rank(malicious: &[AduSequence], benign: &[AduSequence], threshold: f64) -> DiffResult {
    let m: Vec<(AduRef, &Adu, Vec<u32>)> = flatten(malicious).map(|(r, a)| (r, a, grams(&a.payload))).collect();
    let b: Vec<(AduRef, &Adu, Vec<u32>)> = flatten(benign).map(|(r, a)| (r, a, grams(&a.payload))).collect();

    // Pairs below the threshold never exclude anything and are processed
    // after every pair above it, so they can be dropped up front.
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (mi, (_, ma, mg)) in m.iter().enumerate() {
        for (bi, (_, ba, bg)) in b.iter().enumerate() {
            if ma.proto != ba.proto {
                continue;
            }
            let s = jaccard(mg, bg);
            if s >= threshold {
                pairs.push((s, mi, bi));
            }
        }
    }
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));

    let mut m_used = vec![false; m.len()];
    let mut b_used = vec![false; b.len()];
    let mut excluded = Vec::new();
    for (s, mi, bi) in pairs {
        if m_used[mi] || b_used[bi] {
            continue;
        }
        m_used[mi] = true;
        b_used[bi] = true;
        excluded.push(ExcludedAdu {
            malicious: m[mi].0,
            benign: b[bi].0,
            similarity: s,
        });
    }
    excluded.sort_by_key(|e| e.malicious);
    let attack = m
        .iter()
        .zip(&m_used)
        .filter(|(_, used)| !**used)
        .map(|((r, a, _), _)| AttackAdu {
            origin: *r,
            adu: (*a).clone(),
        })
        .collect();
    DiffResult { attack, excluded }
}

/// [`pair_rank`] over a single malicious and a single benign sequence.
pub fn pair_rank_adus(malicious: &AduSequence, benign: &AduSequence, threshold: f64) -> DiffResult {
    pair_rank(std::slice::from_ref(malicious), std::slice::from_ref(benign), threshold)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub fp: u64,
}

/// Runs the attack ADUs and the benign ADUs through `vnf`. Excluded
/// malicious ADUs are not evaluated.
pub fn count_confusion(vnf: &mut VnfInstance, diff: &DiffResult, benign: &[AduSequence]) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for adu in diff.attack_adus() {
        if vnf.evaluate(adu).is_detection() {
            c.tp += 1;
        } else {
            c.fn_ += 1;
        }
    }
    for (_, adu) in flatten(benign) {
        if vnf.evaluate(adu).is_detection() {
            c.fp += 1;
        }
    }
    c
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardValue {
    pub r: f64,
    pub precision: f64,
    pub recall: f64,
}

/// F1 of precision and recall, with 0/0 taken as 0 throughout.
pub fn reward(c: ConfusionCounts) -> RewardValue {
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let r = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    RewardValue { r, precision, recall }
}
