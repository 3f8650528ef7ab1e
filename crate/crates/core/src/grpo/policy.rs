//! Factored categorical rule-generation policy.
//!
//! Each context (one per vulnerability task) owns a head: five independent
//! categorical factors over the fields of a single filter rule. All heads
//! share one flat logit vector.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::GrpoError;
use crate::pairing::{pattern_tokens, RankedPairs};
use crate::rules::{AddrMatch, ContentOption, FilterRule, MiddleboxAction, PortMatch, RuleProto, RuleSet};

pub const FACTOR_COUNT: usize = 5;
const MAX_CONTENTS: usize = 64;

/// Candidate values for each rule field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleVocabulary {
    pub actions: Vec<MiddleboxAction>,
    pub protos: Vec<RuleProto>,
    pub dst_ports: Vec<PortMatch>,
    pub contents: Vec<Vec<u8>>,
    pub nocase: Vec<bool>,
}

impl RuleVocabulary {
    /// Contents are the signature-like tokens of every ranked sentence and
    /// packet payload, in rank order; ports are `any` plus the destination
    /// ports of ranked TCP/UDP packets.
    pub fn from_pairs(pairs: &RankedPairs) -> Self {
        let mut contents: Vec<Vec<u8>> = Vec::new();
        let mut ports: Vec<u16> = Vec::new();
        for p in &pairs.pairs {
            let toks = pattern_tokens(p.packet.payload.as_slice())
                .into_iter()
                .chain(pattern_tokens(p.sentence.text.as_bytes()));
            for t in toks {
                if contents.len() < MAX_CONTENTS && !contents.contains(&t) {
                    contents.push(t);
                }
            }
            if p.packet.proto.has_ports() && !ports.contains(&p.packet.dst_port) {
                ports.push(p.packet.dst_port);
            }
        }
        ports.sort_unstable();
        RuleVocabulary {
            actions: MiddleboxAction::ALL.to_vec(),
            protos: RuleProto::ALL.to_vec(),
            dst_ports: std::iter::once(PortMatch::Any)
                .chain(ports.into_iter().map(PortMatch::Port))
                .collect(),
            contents,
            nocase: vec![false, true],
        }
    }

    pub fn sizes(&self) -> [usize; FACTOR_COUNT] {
        [
            self.actions.len(),
            self.protos.len(),
            self.dst_ports.len(),
            self.contents.len(),
            self.nocase.len(),
        ]
    }

    fn check(&self) -> Result<(), GrpoError> {
        const NAMES: [&str; FACTOR_COUNT] = ["action", "proto", "dst_port", "content", "nocase"];
        for (n, size) in NAMES.iter().zip(self.sizes()) {
            if size == 0 {
                return Err(GrpoError::EmptyVocabulary((*n).to_string()));
            }
        }
        if self.contents.iter().any(Vec::is_empty) {
            return Err(GrpoError::EmptyVocabulary("content (empty pattern)".into()));
        }
        Ok(())
    }

    /// The rule a set of picks stands for. Always passes rule validation
    /// because every rule carries a non-empty content.
    pub fn rule(&self, picks: &[usize; FACTOR_COUNT]) -> FilterRule {
        FilterRule {
            action: self.actions[picks[0]],
            proto: self.protos[picks[1]],
            src_addr: AddrMatch::Any,
            src_port: PortMatch::Any,
            dst_addr: AddrMatch::Any,
            dst_port: self.dst_ports[picks[2]],
            options: vec![ContentOption {
                pattern: self.contents[picks[3]].clone(),
                nocase: self.nocase[picks[4]],
            }],
            sid: 1,
            msg: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyHead {
    pub context: String,
    pub vocab: RuleVocabulary,
    pub offset: usize,
}

impl PolicyHead {
    fn ranges(&self) -> [std::ops::Range<usize>; FACTOR_COUNT] {
        let mut start = self.offset;
        self.vocab.sizes().map(|n| {
            let r = start..start + n;
            start += n;
            r
        })
    }

    fn len(&self) -> usize {
        self.vocab.sizes().iter().sum()
    }
}

/// One sampled action: the head it came from and a category per factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleChoice {
    pub head: usize,
    pub picks: [usize; FACTOR_COUNT],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    heads: Vec<PolicyHead>,
    pub theta: Vec<f64>,
    /// Logits at the time the current group was collected.
    pub theta_old: Vec<f64>,
}

fn log_softmax_at(z: &[f64], k: usize) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z[k] - max - lse
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

impl PolicyParams {
    /// Uniform policy (all logits zero) over the given contexts.
    pub fn new(heads: Vec<(String, RuleVocabulary)>) -> Result<Self, GrpoError> {
        let mut out = Vec::with_capacity(heads.len());
        let mut offset = 0;
        for (context, vocab) in heads {
            vocab.check()?;
            let head = PolicyHead { context, vocab, offset };
            offset += head.len();
            out.push(head);
        }
        Ok(PolicyParams {
            heads: out,
            theta: vec![0.0; offset],
            theta_old: vec![0.0; offset],
        })
    }

    pub fn heads(&self) -> &[PolicyHead] {
        &self.heads
    }

    pub fn head_index(&self, context: &str) -> Option<usize> {
        self.heads.iter().position(|h| h.context == context)
    }

    pub fn snapshot(&mut self) {
        self.theta_old.clone_from(&self.theta);
    }

    pub fn log_prob(&self, choice: &RuleChoice) -> f64 {
        Self::log_prob_with(&self.heads[choice.head], &self.theta, choice)
    }

    pub fn log_prob_old(&self, choice: &RuleChoice) -> f64 {
        Self::log_prob_with(&self.heads[choice.head], &self.theta_old, choice)
    }

    fn log_prob_with(head: &PolicyHead, theta: &[f64], choice: &RuleChoice) -> f64 {
        head.ranges()
            .iter()
            .zip(choice.picks)
            .map(|(r, k)| log_softmax_at(&theta[r.clone()], k))
            .sum()
    }

    /// Log-probability of `choice` under an arbitrary logit vector.
    pub fn log_prob_at(&self, theta: &[f64], choice: &RuleChoice) -> f64 {
        Self::log_prob_with(&self.heads[choice.head], theta, choice)
    }

    /// Adds `scale * d log pi(choice) / d theta` into `grad`.
    pub fn accumulate_grad_log_prob(&self, choice: &RuleChoice, scale: f64, grad: &mut [f64]) {
        let head = &self.heads[choice.head];
        for (r, k) in head.ranges().into_iter().zip(choice.picks) {
            let p = softmax(&self.theta[r.clone()]);
            for (j, pj) in p.into_iter().enumerate() {
                let indicator = if j == k { 1.0 } else { 0.0 };
                grad[r.start + j] += scale * (indicator - pj);
            }
        }
    }

    /// Probability of each category of each factor for a head.
    pub fn factor_probs(&self, head: usize) -> [Vec<f64>; FACTOR_COUNT] {
        self.heads[head].ranges().map(|r| softmax(&self.theta[r]))
    }

    /// Draws one rule field by field under the current logits.
    pub fn sample(&self, head: usize, rng: &mut impl Rng) -> RuleChoice {
        let h = &self.heads[head];
        let picks = h.ranges().map(|r| {
            let p = softmax(&self.theta[r]);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (j, pj) in p.iter().enumerate() {
                acc += pj;
                if u < acc {
                    return j;
                }
            }
            p.len() - 1
        });
        RuleChoice { head, picks }
    }

    pub fn rule_set(&self, choice: &RuleChoice) -> RuleSet {
        RuleSet::single(self.heads[choice.head].vocab.rule(&choice.picks))
    }
}

/// Samples a rule set for context `x`; returns it with its exact log-probability.
pub fn sample_member(policy: &PolicyParams, x: &str, seed: u64) -> Result<(RuleSet, RuleChoice, f64), GrpoError> {
    let head = policy
        .head_index(x)
        .ok_or_else(|| GrpoError::UnknownContext(x.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let choice = policy.sample(head, &mut rng);
    Ok((policy.rule_set(&choice), choice, policy.log_prob(&choice)))
}
