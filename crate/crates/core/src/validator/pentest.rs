use serde::{Deserialize, Serialize};

use crate::reward::{flatten, reward, AduCorpus, AduRef, ConfusionCounts, DiffResult, RewardValue};
use crate::rules::{MiddleboxAction, RuleSet};
use crate::vnf::VnfInstance;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrafficSide {
    Attack,
    Benign,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PentestRecord {
    pub side: TrafficSide,
    pub adu: AduRef,
    pub expected: MiddleboxAction,
    pub observed: MiddleboxAction,
}

impl PentestRecord {
    /// An alert counts as stopping an attack; any detection of benign
    /// traffic is a mismatch.
    pub fn is_mismatch(&self) -> bool {
        match self.side {
            TrafficSide::Attack => !self.observed.is_detection(),
            TrafficSide::Benign => self.observed.is_detection(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PentestReport {
    pub records: Vec<PentestRecord>,
    pub counts: ConfusionCounts,
    pub passed: bool,
}

impl PentestReport {
    pub fn mismatches(&self) -> impl Iterator<Item = &PentestRecord> {
        self.records.iter().filter(|r| r.is_mismatch())
    }
}

/// Replays the attack ADUs (expected BLOCK) and every benign ADU (expected
/// ALLOW) through a fresh VNF enforcing `rules`.
pub fn vnf_pentest(rules: &RuleSet, corpus: &AduCorpus, diff: &DiffResult) -> PentestReport {
    let mut vnf = VnfInstance::instantiate(rules, 0);
    let mut records = Vec::new();
    let mut counts = ConfusionCounts::default();
    for a in &diff.attack {
        let observed = vnf.evaluate(&a.adu);
        if observed.is_detection() {
            counts.tp += 1;
        } else {
            counts.fn_ += 1;
        }
        records.push(PentestRecord {
            side: TrafficSide::Attack,
            adu: a.origin,
            expected: MiddleboxAction::Block,
            observed,
        });
    }
    for (adu_ref, adu) in flatten(&corpus.benign) {
        let observed = vnf.evaluate(adu);
        if observed.is_detection() {
            counts.fp += 1;
        }
        records.push(PentestRecord {
            side: TrafficSide::Benign,
            adu: adu_ref,
            expected: MiddleboxAction::Allow,
            observed,
        });
    }
    PentestReport {
        passed: counts.fn_ == 0 && counts.fp == 0,
        records,
        counts,
    }
}

pub fn feedback(report: &PentestReport) -> RewardValue {
    reward(report.counts)
}
