//! Fuzzing & trimming: a seeded beam search over rule mutations.
//!
//! Mutants are rendered to text and re-parsed before they are scored, so a
//! candidate that fails the grammar or its semantic checks is trimmed
//! without spending budget.

use std::collections::{BTreeSet, HashSet};

use rand::seq::{IndexedMutRandom, IndexedRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pairing::pattern_tokens;
use crate::reward::{count_confusion, reward, AduCorpus, DiffResult, RewardValue};
use crate::rules::{ContentOption, MiddleboxAction, PortMatch, RuleProto, RuleSet};
use crate::vnf::VnfInstance;

pub const BEAM_WIDTH: usize = 8;
/// Rewards closer than this are treated as equal.
const PLATEAU: f64 = 1e-9;
/// Consecutive mutation draws that produce nothing new before giving up.
const STAGNATION_LIMIT: usize = 2048;
const MAX_SUBSTRING: usize = 16;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FuzzError {
    #[error("budget must be at least 1")]
    ZeroBudget,
    #[error("beam width must be at least 1")]
    ZeroBeam,
    #[error("start rule set is invalid: {0}")]
    InvalidStart(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuzzOutcome {
    pub best: RuleSet,
    pub reward: RewardValue,
    pub evaluations: usize,
    /// Canonical text and reward of every evaluated candidate, in order.
    pub evaluated: Vec<(String, f64)>,
}

#[derive(Debug, Clone)]
pub struct FuzzState {
    /// Sorted by reward, descending.
    pub frontier: Vec<(RuleSet, RewardValue)>,
    pub visited: HashSet<String>,
    pub budget_left: usize,
}

/// Material the mutation operators draw from.
struct Material {
    ports: Vec<u16>,
    /// Tokens found in attack payloads but in no benign payload.
    rare_tokens: Vec<Vec<u8>>,
    tokens: Vec<Vec<u8>>,
    payloads: Vec<Vec<u8>>,
}

impl Material {
    fn new(corpus: &AduCorpus, diff: &DiffResult) -> Self {
        let ports: BTreeSet<u16> = diff.attack_adus().map(|a| a.dst.port).collect();
        let payloads: Vec<Vec<u8>> = diff
            .attack_adus()
            .map(|a| a.payload.clone())
            .filter(|p| !p.is_empty())
            .collect();
        let mut tokens: Vec<Vec<u8>> = Vec::new();
        for p in &payloads {
            for t in pattern_tokens(p) {
                if !tokens.contains(&t) {
                    tokens.push(t);
                }
            }
        }
        let benign: Vec<&[u8]> = corpus.benign_adus().map(|(_, a)| a.payload.as_slice()).collect();
        let rare_tokens = tokens
            .iter()
            .filter(|t| !benign.iter().any(|b| memchr::memmem::find(b, t).is_some()))
            .cloned()
            .collect();
        Material {
            ports: ports.into_iter().collect(),
            rare_tokens,
            tokens,
            payloads,
        }
    }

    fn substring(&self, rng: &mut ChaCha8Rng) -> Option<Vec<u8>> {
        let p = self.payloads.choose(rng)?;
        let len = rng.random_range(1..=p.len().min(MAX_SUBSTRING));
        let start = rng.random_range(0..=p.len() - len);
        Some(p[start..start + len].to_vec())
    }

    fn content(&self, rng: &mut ChaCha8Rng) -> Option<Vec<u8>> {
        let pool = if !self.rare_tokens.is_empty() && rng.random_bool(0.5) {
            &self.rare_tokens
        } else {
            &self.tokens
        };
        if !pool.is_empty() && rng.random_bool(0.8) {
            pool.choose(rng).cloned()
        } else {
            self.substring(rng)
        }
    }

    /// Grows `pattern` by one byte on either side, following an attack
    /// payload that contains it.
    fn extend(&self, pattern: &[u8], rng: &mut ChaCha8Rng) -> Option<Vec<u8>> {
        let hits: Vec<(&Vec<u8>, usize)> = self
            .payloads
            .iter()
            .filter_map(|p| memchr::memmem::find(p, pattern).map(|i| (p, i)))
            .collect();
        let &(p, i) = hits.choose(rng)?;
        let left = i > 0;
        let right = i + pattern.len() < p.len();
        match (left, right) {
            (false, false) => None,
            (true, r) if !r || rng.random_bool(0.5) => Some(p[i - 1..i + pattern.len()].to_vec()),
            _ => Some(p[i..i + pattern.len() + 1].to_vec()),
        }
    }
}

fn mutate(rules: &RuleSet, m: &Material, rng: &mut ChaCha8Rng) -> Option<RuleSet> {
    let mut out = rules.clone();
    if out.is_empty() {
        return None;
    }
    let idx = rng.random_range(0..out.len());
    let rule = &mut out.rules_mut()[idx];
    match rng.random_range(0..7) {
        0 => {
            rule.dst_port = match m.ports.choose(rng) {
                Some(&p) if rng.random_bool(0.9) => PortMatch::Port(p),
                _ => PortMatch::Any,
            };
        }
        1 => {
            let c = m.content(rng)?;
            if rule.options.is_empty() {
                rule.options.push(ContentOption::new(c));
            } else {
                let k = rng.random_range(0..rule.options.len());
                rule.options[k].pattern = c;
            }
        }
        2 => {
            let opt = rule.options.choose_mut(rng)?;
            if opt.pattern.len() < 2 {
                return None;
            }
            if rng.random_bool(0.5) {
                opt.pattern.remove(0);
            } else {
                opt.pattern.pop();
            }
        }
        3 => {
            let k = rng.random_range(0..rule.options.len().max(1));
            let opt = rule.options.get_mut(k)?;
            opt.pattern = m.extend(&opt.pattern, rng)?;
        }
        4 => {
            let opt = rule.options.choose_mut(rng)?;
            opt.nocase = !opt.nocase;
        }
        5 => rule.action = *MiddleboxAction::ALL.choose(rng)?,
        _ => rule.proto = *RuleProto::ALL.choose(rng)?,
    }
    Some(out)
}

/// Trimming: keep a mutant only if its text parses back to itself.
fn trim(candidate: RuleSet) -> Option<(String, RuleSet)> {
    let text = candidate.canonical();
    let reparsed = RuleSet::parse(&text).ok()?;
    (reparsed == candidate).then_some((text, reparsed))
}

fn evaluate(rules: &RuleSet, corpus: &AduCorpus, diff: &DiffResult, member: usize) -> RewardValue {
    let mut vnf = VnfInstance::instantiate(rules, member);
    reward(count_confusion(&mut vnf, diff, &corpus.benign))
}

fn plateau_key(r: f64) -> i64 {
    (r / PLATEAU).round() as i64
}

/// Refines `start` by mutation until a perfect rule set is found, the
/// budget is spent, or mutation stops producing unseen candidates.
pub fn fuzz_trim(
    start: &RuleSet,
    corpus: &AduCorpus,
    diff: &DiffResult,
    budget: usize,
    seed: u64,
) -> Result<FuzzOutcome, FuzzError> {
    fuzz_trim_from(std::slice::from_ref(start), corpus, diff, budget, BEAM_WIDTH, seed)
}

/// [`fuzz_trim`] with several starting points and a chosen beam width.
/// Starts are evaluated first, in order, and count against the budget.
pub fn fuzz_trim_from(
    starts: &[RuleSet],
    corpus: &AduCorpus,
    diff: &DiffResult,
    budget: usize,
    beam_width: usize,
    seed: u64,
) -> Result<FuzzOutcome, FuzzError> {
    if budget == 0 {
        return Err(FuzzError::ZeroBudget);
    }
    if beam_width == 0 {
        return Err(FuzzError::ZeroBeam);
    }
    let mut initial: Vec<(String, RuleSet)> = Vec::new();
    for start in starts {
        let (text, rs) = trim(start.clone()).ok_or_else(|| {
            let reason = RuleSet::parse(&start.canonical())
                .err()
                .map_or_else(|| "does not survive a text round trip".to_string(), |e| e.to_string());
            FuzzError::InvalidStart(reason)
        })?;
        if !initial.iter().any(|(t, _)| *t == text) {
            initial.push((text, rs));
        }
    }
    if initial.is_empty() {
        return Err(FuzzError::InvalidStart("no start rule set".into()));
    }
    initial.truncate(budget);
    let material = Material::new(corpus, diff);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let scored: Vec<RewardValue> = initial
        .par_iter()
        .enumerate()
        .map(|(i, (_, rs))| evaluate(rs, corpus, diff, i))
        .collect();
    let mut evaluated = Vec::with_capacity(budget);
    let mut state = FuzzState {
        frontier: Vec::new(),
        visited: HashSet::new(),
        budget_left: budget - initial.len(),
    };
    let mut best: Option<(RuleSet, RewardValue)> = None;
    for ((text, rs), rv) in initial.into_iter().zip(scored) {
        evaluated.push((text.clone(), rv.r));
        state.visited.insert(text);
        if best.as_ref().is_none_or(|b| rv.r > b.1.r) {
            best = Some((rs.clone(), rv));
        }
        state.frontier.push((rs, rv));
    }
    state
        .frontier
        .sort_by_key(|(_, rv)| std::cmp::Reverse(plateau_key(rv.r)));
    state.frontier.truncate(beam_width);
    let mut best = best.expect("at least one start");

    while state.budget_left > 0 && best.1.r < 1.0 {
        let want = beam_width.min(state.budget_left);
        let mut batch: Vec<(String, RuleSet)> = Vec::with_capacity(want);
        let mut misses = 0;
        while batch.len() < want && misses < STAGNATION_LIMIT {
            let parent = &state.frontier[rng.random_range(0..state.frontier.len())].0;
            let fresh = mutate(parent, &material, &mut rng)
                .and_then(trim)
                .filter(|(text, _)| !state.visited.contains(text));
            match fresh {
                Some((text, rs)) => {
                    state.visited.insert(text.clone());
                    batch.push((text, rs));
                    misses = 0;
                }
                None => misses += 1,
            }
        }
        if batch.is_empty() {
            break;
        }
        let scored: Vec<RewardValue> = batch
            .par_iter()
            .enumerate()
            .map(|(i, (_, rs))| evaluate(rs, corpus, diff, i + 1))
            .collect();
        state.budget_left -= batch.len();

        let mut next: Vec<(RuleSet, RewardValue)> = Vec::with_capacity(batch.len() + state.frontier.len());
        for ((text, rs), rv) in batch.into_iter().zip(scored) {
            evaluated.push((text, rv.r));
            if rv.r > best.1.r {
                best = (rs.clone(), rv);
            }
            next.push((rs, rv));
        }
        // New candidates sit ahead of incumbents on a plateau, so the walk
        // keeps moving when every neighbour scores the same.
        next.append(&mut state.frontier);
        next.sort_by_key(|(_, rv)| std::cmp::Reverse(plateau_key(rv.r)));
        next.truncate(beam_width);
        state.frontier = next;
    }

    Ok(FuzzOutcome {
        best: best.0,
        reward: best.1,
        evaluations: evaluated.len(),
        evaluated,
    })
}
