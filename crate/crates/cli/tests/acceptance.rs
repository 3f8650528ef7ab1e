//! Acceptance suite. Each criterion prints one PASS/FAIL line; the
//! process exits non-zero if any criterion fails.

use std::collections::{BTreeSet, HashMap};
use std::net::{Ipv4Addr, SocketAddrV4};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use refn_cli::{commands, Config};
use refn_core::grpo::{
    self, advantage, clip_ratio, clipped_objective, group_relative, GroupMember, GroupSample, HyperParams,
    PolicyParams, RuleChoice, RuleVocabulary, FACTOR_COUNT,
};
use refn_core::pairing::{join_label, DistanceMetric, NgramCosine, PacketContext, PacketRef, SentenceContext};
use refn_core::pcap::{parse_capture, ByteOrder, Capture, Packet, Proto};
use refn_core::reward::{count_confusion, pair_rank, reward, ConfusionCounts, RewardValue};
use refn_core::rules::{
    parse_rule, AddrMatch, ContentOption, FilterRule, MiddleboxAction, PortMatch, RuleProto, RuleSet,
};
use refn_core::validator::{
    fuzz_trim, ntot_bfs, BoxSpec, EdgeSpec, FieldSource, NetSpec, NodeSpec, Outcome, PredicateSpec, TraceStep,
};
use refn_core::{synth, Adu, AduSequence, Endpoint, VnfInstance};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------------
// 1. reward pipeline against a brute-force confusion oracle

const ALPHABET: &[u8] = b"abjx:/ ";

fn random_payload(rng: &mut impl Rng, max: usize) -> Vec<u8> {
    let n = rng.random_range(0..=max);
    (0..n).map(|_| *ALPHABET.choose(rng).unwrap()).collect()
}

fn random_adu(rng: &mut impl Rng) -> Adu {
    Adu {
        src: Endpoint {
            ip: Ipv4Addr::new(10, 0, 0, rng.random_range(1..4)),
            port: *[1000, 2000].choose(rng).unwrap(),
        },
        dst: Endpoint {
            ip: Ipv4Addr::new(10, 0, 1, rng.random_range(1..4)),
            port: *[80, 8080, 53].choose(rng).unwrap(),
        },
        proto: if rng.random_bool(0.8) { Proto::Tcp } else { Proto::Udp },
        payload: random_payload(rng, 12),
        packet_indices: vec![0],
        start_us: 0,
    }
}

fn mutate_adu(rng: &mut impl Rng, adu: &Adu) -> Adu {
    let mut a = adu.clone();
    if !a.payload.is_empty() && rng.random_bool(0.7) {
        let i = rng.random_range(0..a.payload.len());
        a.payload[i] = *ALPHABET.choose(rng).unwrap();
    } else {
        a.payload.push(*ALPHABET.choose(rng).unwrap());
    }
    a
}

fn split_into_sequences(rng: &mut impl Rng, adus: Vec<Adu>, tag: &str) -> Vec<AduSequence> {
    let cut = if adus.is_empty() {
        0
    } else {
        rng.random_range(0..=adus.len())
    };
    let (a, b) = adus.split_at(cut);
    let mut seqs = vec![AduSequence {
        source_id: format!("{tag}0"),
        adus: a.to_vec(),
    }];
    if rng.random_bool(0.5) {
        seqs.push(AduSequence {
            source_id: format!("{tag}1"),
            adus: b.to_vec(),
        });
    } else {
        seqs[0].adus.extend_from_slice(b);
    }
    seqs
}

fn random_rule(rng: &mut impl Rng, material: &[Adu]) -> FilterRule {
    let mut options = Vec::new();
    for _ in 0..rng.random_range(0..=2) {
        let pattern = match material.choose(rng) {
            Some(a) if a.payload.len() >= 2 && rng.random_bool(0.7) => {
                let s = rng.random_range(0..a.payload.len() - 1);
                let e = rng.random_range(s + 1..=a.payload.len().min(s + 4));
                a.payload[s..e].to_vec()
            }
            _ => {
                let mut p = random_payload(rng, 3);
                if p.is_empty() {
                    p.push(b'a');
                }
                p
            }
        };
        let mut pattern = pattern;
        if rng.random_bool(0.2) {
            pattern.make_ascii_uppercase();
        }
        options.push(ContentOption {
            pattern,
            nocase: rng.random_bool(0.3),
        });
    }
    let dst_port = if options.is_empty() || rng.random_bool(0.4) {
        PortMatch::Port(*[80, 8080, 53].choose(rng).unwrap())
    } else {
        PortMatch::Any
    };
    FilterRule {
        action: *MiddleboxAction::ALL.choose(rng).unwrap(),
        proto: *RuleProto::ALL.choose(rng).unwrap(),
        src_addr: if rng.random_bool(0.2) {
            AddrMatch::Net {
                addr: Ipv4Addr::new(10, 0, 0, rng.random_range(1..4)),
                prefix: *[24, 32].choose(rng).unwrap(),
            }
        } else {
            AddrMatch::Any
        },
        src_port: PortMatch::Any,
        dst_addr: AddrMatch::Any,
        dst_port,
        options,
        sid: rng.random_range(1..1000),
        msg: String::new(),
    }
}

fn oracle_grams(payload: &[u8]) -> BTreeSet<Vec<u8>> {
    if payload.len() < 3 {
        return if payload.is_empty() {
            BTreeSet::new()
        } else {
            BTreeSet::from([payload.to_vec()])
        };
    }
    (0..=payload.len() - 3).map(|i| payload[i..i + 3].to_vec()).collect()
}

fn oracle_similarity(a: &Adu, b: &Adu) -> f64 {
    if a.proto != b.proto {
        return 0.0;
    }
    let (x, y) = (oracle_grams(&a.payload), oracle_grams(&b.payload));
    let union = x.union(&y).count();
    if union == 0 {
        return 1.0;
    }
    x.intersection(&y).count() as f64 / union as f64
}

fn naive_contains(hay: &[u8], needle: &[u8]) -> bool {
    needle.is_empty()
        || (needle.len() <= hay.len() && (0..=hay.len() - needle.len()).any(|i| &hay[i..i + needle.len()] == needle))
}

fn oracle_action(rules: &[FilterRule], adu: &Adu) -> MiddleboxAction {
    let mut best = MiddleboxAction::Allow;
    for r in rules {
        let proto = match r.proto {
            RuleProto::Any => true,
            RuleProto::Tcp => adu.proto == Proto::Tcp,
            RuleProto::Udp => adu.proto == Proto::Udp,
        };
        let addr = |m: AddrMatch, ip: Ipv4Addr| match m {
            AddrMatch::Any => true,
            AddrMatch::Net { addr, prefix } => {
                (0..prefix as usize).all(|bit| (u32::from(ip) >> (31 - bit)) & 1 == (u32::from(addr) >> (31 - bit)) & 1)
            }
        };
        let port = |m: PortMatch, p: u16| match m {
            PortMatch::Any => true,
            PortMatch::Port(q) => p == q,
        };
        let contents = r.options.iter().all(|c| {
            if c.nocase {
                naive_contains(&adu.payload.to_ascii_lowercase(), &c.pattern.to_ascii_lowercase())
            } else {
                naive_contains(&adu.payload, &c.pattern)
            }
        });
        let matched = proto
            && addr(r.src_addr, adu.src.ip)
            && addr(r.dst_addr, adu.dst.ip)
            && port(r.src_port, adu.src.port)
            && port(r.dst_port, adu.dst.port)
            && contents;
        if matched {
            let rank = |a: MiddleboxAction| match a {
                MiddleboxAction::Allow => 0,
                MiddleboxAction::Alert => 1,
                MiddleboxAction::Block => 2,
            };
            if rank(r.action) > rank(best) {
                best = r.action;
            }
        }
    }
    best
}

/// Greedy matching by repeated full scans, then a per-ADU confusion
/// table over every malicious and benign ADU.
fn oracle_counts(
    mal: &[AduSequence],
    ben: &[AduSequence],
    tau: f64,
    rules: &[FilterRule],
) -> (Vec<bool>, ConfusionCounts) {
    let m: Vec<&Adu> = mal.iter().flat_map(|s| &s.adus).collect();
    let b: Vec<&Adu> = ben.iter().flat_map(|s| &s.adus).collect();
    let mut m_used = vec![false; m.len()];
    let mut b_used = vec![false; b.len()];
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for (i, ma) in m.iter().enumerate() {
            for (j, ba) in b.iter().enumerate() {
                if m_used[i] || b_used[j] {
                    continue;
                }
                let s = oracle_similarity(ma, ba);
                if s >= tau && best.is_none_or(|(bs, _, _)| s > bs) {
                    best = Some((s, i, j));
                }
            }
        }
        let Some((_, i, j)) = best else { break };
        m_used[i] = true;
        b_used[j] = true;
    }
    // Full table: (is attack, is excluded, detected) for every ADU.
    let mut table = Vec::new();
    for (i, a) in m.iter().enumerate() {
        table.push((true, m_used[i], oracle_action(rules, a) != MiddleboxAction::Allow));
    }
    for a in &b {
        table.push((false, false, oracle_action(rules, a) != MiddleboxAction::Allow));
    }
    let mut c = ConfusionCounts::default();
    let mut tn = 0u64;
    for &(attack, excluded, detected) in &table {
        match (attack, excluded, detected) {
            (true, true, _) => {}
            (true, false, true) => c.tp += 1,
            (true, false, false) => c.fn_ += 1,
            (false, _, true) => c.fp += 1,
            (false, _, false) => tn += 1,
        }
    }
    assert_eq!(
        c.tp + c.fn_ + c.fp + tn + m_used.iter().filter(|u| **u).count() as u64,
        table.len() as u64
    );
    (m_used, c)
}

fn oracle_f1(c: ConfusionCounts) -> (f64, f64, f64) {
    let p = if c.tp + c.fp == 0 {
        0.0
    } else {
        c.tp as f64 / (c.tp + c.fp) as f64
    };
    let r = if c.tp + c.fn_ == 0 {
        0.0
    } else {
        c.tp as f64 / (c.tp + c.fn_) as f64
    };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (f, p, r)
}

fn criterion_1() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0xc1);
    let started = Instant::now();
    let mut excluded_total = 0;
    for case in 0..1000 {
        let benign: Vec<Adu> = (0..rng.random_range(0..=6)).map(|_| random_adu(&mut rng)).collect();
        let mut malicious = Vec::new();
        for _ in 0..rng.random_range(0..=6) {
            let a = match (benign.choose(&mut rng), rng.random_range(0..3)) {
                (Some(b), 0) => b.clone(),
                (Some(b), 1) => mutate_adu(&mut rng, b),
                _ => random_adu(&mut rng),
            };
            malicious.push(a);
        }
        let tau = *[0.5, 0.7, 0.9, 1.0, rng.random_range(0.05..1.0)]
            .choose(&mut rng)
            .unwrap();
        let rules: Vec<FilterRule> = (0..rng.random_range(0..=3))
            .enumerate()
            .map(|(i, _)| FilterRule {
                sid: i as u32 + 1,
                ..random_rule(&mut rng, &[benign.clone(), malicious.clone()].concat())
            })
            .collect();
        let mal = split_into_sequences(&mut rng, malicious, "m");
        let ben = split_into_sequences(&mut rng, benign, "b");
        let rs = RuleSet::new(rules.clone()).map_err(|e| format!("case {case}: {e}"))?;

        let diff = pair_rank(&mal, &ben, tau);
        let mut vnf = VnfInstance::instantiate(&rs, 0);
        let counts = count_confusion(&mut vnf, &diff, &ben);
        let got = reward(counts);

        let (used, want) = oracle_counts(&mal, &ben, tau, &rules);
        excluded_total += diff.excluded.len();
        let flat_excluded: Vec<bool> = {
            let mut v = vec![false; used.len()];
            let offsets: Vec<usize> = mal
                .iter()
                .scan(0, |acc, s| {
                    let o = *acc;
                    *acc += s.adus.len();
                    Some(o)
                })
                .collect();
            for e in &diff.excluded {
                v[offsets[e.malicious.sequence] + e.malicious.adu] = true;
            }
            v
        };
        ensure(flat_excluded == used, || {
            format!("case {case}: excluded set {flat_excluded:?} vs oracle {used:?}")
        })?;
        ensure(counts == want, || {
            format!("case {case}: counts {counts:?} vs oracle {want:?}")
        })?;
        let (f, p, r) = oracle_f1(want);
        let expect = RewardValue {
            r: f,
            precision: p,
            recall: r,
        };
        ensure(got == expect, || {
            format!("case {case}: reward {got:?} vs oracle {expect:?}")
        })?;
        let alt = if want.tp == 0 {
            0.0
        } else {
            2.0 * want.tp as f64 / (2 * want.tp + want.fp + want.fn_) as f64
        };
        ensure((got.r - alt).abs() <= 1e-12, || {
            format!("case {case}: F1 {} vs count form {alt}", got.r)
        })?;
    }
    let elapsed = started.elapsed();
    ensure(elapsed < Duration::from_secs(10), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "1000 corpora exact, {excluded_total} exclusions, {elapsed:.2?}"
    ))
}

// ---------------------------------------------------------------------
// 2. surrogate gradient against central finite differences

fn random_vocab(rng: &mut impl Rng, budget: usize) -> Option<RuleVocabulary> {
    let sizes = [
        rng.random_range(1..=3),
        rng.random_range(1..=3),
        rng.random_range(1..=4),
        rng.random_range(1..=4),
        rng.random_range(1..=2),
    ];
    if sizes.iter().sum::<usize>() > budget {
        return None;
    }
    Some(RuleVocabulary {
        actions: MiddleboxAction::ALL[..sizes[0]].to_vec(),
        protos: RuleProto::ALL[..sizes[1]].to_vec(),
        dst_ports: std::iter::once(PortMatch::Any)
            .chain((1..sizes[2]).map(|p| PortMatch::Port(p as u16 * 100)))
            .collect(),
        contents: (0..sizes[3]).map(|i| format!("tok{i}").into_bytes()).collect(),
        nocase: [false, true][..sizes[4]].to_vec(),
    })
}

fn random_group(rng: &mut impl Rng, policy: &PolicyParams, n: usize) -> GroupSample {
    let choices: Vec<RuleChoice> = (0..n)
        .map(|_| {
            let head = rng.random_range(0..policy.heads().len());
            let sizes = policy.heads()[head].vocab.sizes();
            let mut picks = [0; FACTOR_COUNT];
            for (p, s) in picks.iter_mut().zip(sizes) {
                *p = rng.random_range(0..s);
            }
            RuleChoice { head, picks }
        })
        .collect();
    let rewards: Vec<f64> = (0..n)
        .map(|_| {
            if rng.random_bool(0.3) {
                0.0
            } else {
                rng.random_range(0.0..1.0)
            }
        })
        .collect();
    let rel = group_relative(&rewards);
    let adv = advantage(&rel);
    GroupSample {
        context: "ctx".into(),
        vulns: vec![],
        prompt: String::new(),
        members: choices
            .into_iter()
            .enumerate()
            .map(|(i, choice)| GroupMember {
                rules: policy.rule_set(&choice),
                choice,
                counts: ConfusionCounts::default(),
                reward: RewardValue {
                    r: rewards[i],
                    precision: 0.0,
                    recall: 0.0,
                },
                relative: rel[i],
                advantage: adv[i],
                log_prob_old: policy.log_prob_old(&choice),
            })
            .collect(),
    }
}

fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let scale = numeric
        .iter()
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
        .max(analytic.iter().map(|v| v * v).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn criterion_2() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0xc2);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut done = 0;
    let mut rejected = 0;
    while done < 100 {
        let mut heads = Vec::new();
        let mut budget = 16;
        for k in 0..rng.random_range(1..=2) {
            match random_vocab(&mut rng, budget) {
                Some(v) => {
                    budget -= v.sizes().iter().sum::<usize>();
                    heads.push((format!("h{k}"), v));
                }
                None if heads.is_empty() => continue,
                None => break,
            }
        }
        if heads.is_empty() {
            continue;
        }
        let mut policy = PolicyParams::new(heads).map_err(|e| e.to_string())?;
        let len = policy.theta.len();
        if len > 16 {
            return Err(format!("policy has {len} parameters"));
        }
        policy.theta_old = (0..len).map(|_| rng.random_range(-2.0..2.0)).collect();
        policy.theta = policy
            .theta_old
            .iter()
            .map(|t| t + rng.random_range(-0.3..0.3))
            .collect();
        let hp = HyperParams {
            epsilon: rng.random_range(0.05..0.5),
            lambda: rng.random_range(0.0..0.5),
            ..HyperParams::default()
        };
        let n = rng.random_range(2..=8);
        let group = random_group(&mut rng, &policy, n);
        // Central differences straddle the kink of the clip; skip such points.
        let near_kink = group.members.iter().any(|m| {
            let ratio = (policy.log_prob(&m.choice) - m.log_prob_old).exp();
            (ratio - (1.0 - hp.epsilon)).abs() < 1e-3 || (ratio - (1.0 + hp.epsilon)).abs() < 1e-3
        });
        if near_kink {
            rejected += 1;
            continue;
        }
        let analytic = grpo::surrogate_gradient(&policy, &group, hp.epsilon);
        let reg_analytic: Vec<f64> = analytic
            .iter()
            .zip(policy.theta.iter().zip(&policy.theta_old))
            .map(|(g, (t, o))| g - 2.0 * hp.lambda * (t - o))
            .collect();
        let mut numeric = vec![0.0; len];
        let mut reg_numeric = vec![0.0; len];
        for i in 0..len {
            let mut plus = policy.theta.clone();
            let mut minus = policy.theta.clone();
            plus[i] += h;
            minus[i] -= h;
            numeric[i] = (grpo::surrogate_objective_at(&policy, &plus, &group, hp.epsilon)
                - grpo::surrogate_objective_at(&policy, &minus, &group, hp.epsilon))
                / (2.0 * h);
            reg_numeric[i] = (grpo::regularized_objective_at(&policy, &plus, &group, &hp)
                - grpo::regularized_objective_at(&policy, &minus, &group, &hp))
                / (2.0 * h);
        }
        let e = rel_error(&analytic, &numeric).max(rel_error(&reg_analytic, &reg_numeric));
        ensure(e <= 1e-5, || format!("policy {done}: relative error {e:e}"))?;
        worst = worst.max(e);
        done += 1;
    }
    Ok(format!(
        "100 policies, worst relative error {worst:.2e}, {rejected} near-kink draws skipped"
    ))
}

// ---------------------------------------------------------------------
// 3. group-relative arithmetic

fn criterion_3() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0xc3);
    for g in 0..10_000 {
        let n = rng.random_range(2..=16);
        let all_zero = rng.random_bool(0.05);
        let r: Vec<f64> = (0..n)
            .map(|_| {
                if all_zero || rng.random_bool(0.3) {
                    0.0
                } else {
                    rng.random_range(0.0..=1.0)
                }
            })
            .collect();
        let sum: f64 = r.iter().sum();
        let rel = group_relative(&r);
        let adv = advantage(&rel);
        let rel_sum: f64 = rel.iter().sum();
        let adv_sum: f64 = adv.iter().sum();
        if sum > 0.0 {
            ensure((rel_sum - 1.0).abs() <= 1e-12, || {
                format!("group {g}: sum R = {rel_sum}")
            })?;
            for (ri, v) in r.iter().zip(&rel) {
                ensure(*v == ri / sum, || format!("group {g}: R {v} != {ri}/{sum}"))?;
            }
        } else {
            ensure(rel.iter().all(|v| *v == 1.0 / n as f64), || {
                format!("group {g}: zero-sum R {rel:?}")
            })?;
        }
        ensure(adv_sum.abs() <= 1e-12, || format!("group {g}: sum A = {adv_sum}"))?;
        let eps = rng.random_range(0.01..0.99);
        for (i, a) in adv.iter().enumerate() {
            let ratio = rng.random_range(0.0..3.0);
            let c = clip_ratio(ratio, eps);
            ensure((1.0 - eps..=1.0 + eps).contains(&c), || {
                format!("group {g}: clip({ratio}) = {c}")
            })?;
            ensure(c == ratio || !(1.0 - eps..=1.0 + eps).contains(&ratio), || {
                format!("group {g}: in-range ratio {ratio} moved to {c}")
            })?;
            let obj = clipped_objective(ratio, *a, eps);
            ensure(obj == (ratio * a).min(c * a), || {
                format!("group {g} member {i}: objective {obj}")
            })?;
        }
    }
    Ok("10000 groups exact".into())
}

// ---------------------------------------------------------------------
// 4. synthetic Log4j training

fn criterion_4() -> Check {
    let task = synth::log4j_task();
    let tasks = vec![task];
    let hp = HyperParams::default();
    if hp.group_size != 8 {
        return Err(format!("default group size is {}", hp.group_size));
    }
    let started = Instant::now();
    let policy = grpo::initial_policy(&tasks).map_err(|e| e.to_string())?;
    let mut first = None;
    let outcome = grpo::train(policy, &tasks, &hp, 200, 42, |r| {
        if first.is_none() && r.mean_reward >= 0.95 {
            first = Some(r.iteration);
        }
    })
    .map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    ensure(outcome.history.len() == 200, || {
        format!("{} iterations recorded", outcome.history.len())
    })?;
    ensure(elapsed < Duration::from_secs(300), || format!("took {elapsed:?}"))?;
    match first {
        Some(it) => Ok(format!(
            "mean group reward >= 0.95 first at iteration {it}, {elapsed:.2?}"
        )),
        None => {
            let best = outcome.history.iter().map(|h| h.mean_reward).fold(0.0, f64::max);
            Err(format!("best mean group reward {best}"))
        }
    }
}

// ---------------------------------------------------------------------
// 5. fuzz & trim from the near-correct rule

fn criterion_5() -> Check {
    let task = synth::log4j_task();
    let near = RuleSet::parse(synth::NEAR_CORRECT_RULE).map_err(|e| e.to_string())?;
    let started = Instant::now();
    let out = fuzz_trim(&near, task.corpus(), &task.diff, 500, 42).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    ensure(out.reward.r == 1.0, || {
        format!("reward {} after {} evaluations", out.reward.r, out.evaluations)
    })?;
    ensure(out.evaluations <= 500, || format!("{} evaluations", out.evaluations))?;
    ensure(elapsed < Duration::from_secs(30), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "reward 1 after {} evaluations: {}, {elapsed:.2?}",
        out.evaluations,
        out.best.canonical().trim()
    ))
}

// ---------------------------------------------------------------------
// 6. decision-tree inference against exhaustive path evaluation

fn random_predicate(rng: &mut impl Rng) -> PredicateSpec {
    let mut p = PredicateSpec {
        field: String::new(),
        equals: None,
        contains: None,
        nocase: false,
        in_net: None,
    };
    match rng.random_range(0..6) {
        0 => {
            p.field = "proto".into();
            p.equals = Some((*["tcp", "udp"].choose(rng).unwrap()).into());
        }
        1 => {
            p.field = "src_port".into();
            p.equals = Some((*[1000u16, 2000].choose(rng).unwrap()).into());
        }
        2 => {
            p.field = "dst_port".into();
            p.equals = Some((*[80u16, 8080, 53].choose(rng).unwrap()).into());
        }
        3 => {
            p.field = "payload".into();
            let mut c = random_payload(rng, 2);
            c.push(*b"abjx".choose(rng).unwrap());
            if rng.random_bool(0.3) {
                c.make_ascii_uppercase();
            }
            p.contains = Some(String::from_utf8(c).unwrap());
            p.nocase = rng.random_bool(0.4);
        }
        k => {
            p.field = if k == 4 { "src_ip" } else { "dst_ip" }.into();
            let third = if k == 4 { 0 } else { 1 };
            let prefix = *[0u8, 16, 24, 30, 31, 32].choose(rng).unwrap();
            p.in_net = Some(format!("10.0.{third}.{}/{prefix}", rng.random_range(0..4)));
        }
    }
    p
}

fn random_boxspec(rng: &mut impl Rng) -> BoxSpec {
    let n: usize = rng.random_range(1..=20);
    let id = |i: usize| format!("n{i}");
    let internal: Vec<bool> = (0..n).map(|i| i + 1 < n && (i == 0 || rng.random_bool(0.6))).collect();
    let mut nodes: Vec<NodeSpec> = (0..n)
        .map(|i| {
            if internal[i] {
                let patterns: [&[Outcome]; 6] = [
                    &[Outcome::True, Outcome::False],
                    &[Outcome::False, Outcome::True],
                    &[Outcome::True, Outcome::Default],
                    &[Outcome::False, Outcome::Default],
                    &[Outcome::Default],
                    &[Outcome::True, Outcome::True, Outcome::False, Outcome::Default],
                ];
                let pattern = *patterns.choose(rng).unwrap();
                let edges: Vec<(Outcome, String)> =
                    pattern.iter().map(|o| (*o, id(rng.random_range(i + 1..n)))).collect();
                let edges: Vec<(Outcome, &str)> = edges.iter().map(|(o, t)| (*o, t.as_str())).collect();
                NodeSpec::test(&id(i), random_predicate(rng), &edges)
            } else {
                NodeSpec::leaf(&id(i), *MiddleboxAction::ALL.choose(rng).unwrap())
            }
        })
        .collect();
    for j in 1..n {
        let target = id(j);
        if nodes.iter().any(|nd| nd.edges.iter().any(|e| e.to == target)) {
            continue;
        }
        let parents: Vec<usize> = (0..j).filter(|&i| internal[i]).collect();
        let p = *parents.choose(rng).unwrap();
        nodes[p].edges.push(EdgeSpec {
            outcome: *[Outcome::True, Outcome::False, Outcome::Default].choose(rng).unwrap(),
            to: target,
        });
    }
    if rng.random_bool(0.3) {
        nodes.reverse();
    }
    BoxSpec { root: id(0), nodes }
}

fn oracle_predicate(spec: &PredicateSpec, netsp: &NetSpec, adu: &Adu) -> bool {
    let source = netsp.fields.iter().find(|f| f.name == spec.field).unwrap().source;
    let net = |ip: Ipv4Addr| {
        let text = spec.in_net.as_deref().unwrap();
        let (a, p) = text.split_once('/').unwrap();
        let (a, p): (Ipv4Addr, u32) = (a.parse().unwrap(), p.parse().unwrap());
        let (x, y) = (u64::from(u32::from(ip)), u64::from(u32::from(a)));
        (x >> (32 - p)) == (y >> (32 - p))
    };
    match source {
        FieldSource::Proto => {
            let want = spec.equals.as_ref().unwrap().as_str().unwrap();
            want == match adu.proto {
                Proto::Tcp => "tcp",
                Proto::Udp => "udp",
                Proto::Icmp => "icmp",
                Proto::Other => "other",
            }
        }
        FieldSource::SrcPort => spec.equals.as_ref().unwrap().as_u64() == Some(u64::from(adu.src.port)),
        FieldSource::DstPort => spec.equals.as_ref().unwrap().as_u64() == Some(u64::from(adu.dst.port)),
        FieldSource::Payload => {
            let pat = spec.contains.as_ref().unwrap().as_bytes();
            if spec.nocase {
                naive_contains(&adu.payload.to_ascii_lowercase(), &pat.to_ascii_lowercase())
            } else {
                naive_contains(&adu.payload, pat)
            }
        }
        FieldSource::SrcIp => net(adu.src.ip),
        FieldSource::DstIp => net(adu.dst.ip),
    }
}

/// Shortest satisfied root-to-leaf path, ties broken by the
/// lexicographically smallest sequence of edge positions.
fn oracle_descent(spec: &BoxSpec, netsp: &NetSpec, adu: &Adu) -> (MiddleboxAction, Vec<TraceStep>) {
    let by_id: HashMap<&str, &NodeSpec> = spec.nodes.iter().map(|n| (n.id.as_str(), n)).collect();
    type Best = (usize, Vec<usize>, MiddleboxAction, Vec<TraceStep>);
    fn walk<'a>(
        id: &'a str,
        by_id: &HashMap<&str, &'a NodeSpec>,
        netsp: &NetSpec,
        adu: &Adu,
        memo: &mut HashMap<&'a str, Best>,
    ) -> Best {
        if let Some(b) = memo.get(id) {
            return b.clone();
        }
        let node = by_id[id];
        let best = match node.action {
            Some(a) => (0, vec![], a, vec![]),
            None => {
                let truth = oracle_predicate(node.predicate.as_ref().unwrap(), netsp, adu);
                let want = if truth { Outcome::True } else { Outcome::False };
                let mut taken: Vec<usize> = (0..node.edges.len())
                    .filter(|&e| node.edges[e].outcome == want)
                    .collect();
                if taken.is_empty() {
                    taken = (0..node.edges.len())
                        .filter(|&e| node.edges[e].outcome == Outcome::Default)
                        .collect();
                }
                let mut best: Option<Best> = None;
                for e in taken {
                    let (len, seq, action, trace) = walk(&node.edges[e].to, by_id, netsp, adu, memo);
                    let mut full_seq = vec![e];
                    full_seq.extend(seq);
                    let mut full_trace = vec![TraceStep {
                        node: node.id.clone(),
                        thought: node.edges[e].outcome,
                    }];
                    full_trace.extend(trace);
                    let cand = (len + 1, full_seq, action, full_trace);
                    if best.as_ref().is_none_or(|b| (cand.0, &cand.1) < (b.0, &b.1)) {
                        best = Some(cand);
                    }
                }
                best.expect("covered tree has a satisfied edge")
            }
        };
        memo.insert(id, best.clone());
        best
    }
    let (_, _, action, trace) = walk(&spec.root, &by_id, netsp, adu, &mut HashMap::new());
    (action, trace)
}

fn criterion_6() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0xc6);
    let netsp = NetSpec::standard();
    let mut max_depth = 0;
    for t in 0..50 {
        let spec = random_boxspec(&mut rng);
        let tree = refn_core::validator::build_tree(&netsp, &spec).map_err(|e| format!("tree {t}: {e}"))?;
        let adus = AduSequence {
            source_id: "r".into(),
            adus: (0..100)
                .map(|_| {
                    let mut a = random_adu(&mut rng);
                    a.src.ip = Ipv4Addr::new(10, 0, 0, rng.random_range(0..4));
                    a.dst.ip = Ipv4Addr::new(10, 0, 1, rng.random_range(0..4));
                    if rng.random_bool(0.1) {
                        a.proto = Proto::Icmp;
                    }
                    a
                })
                .collect(),
        };
        let verdicts = ntot_bfs(&adus, &tree).map_err(|e| format!("tree {t}: {e}"))?;
        for (i, (v, adu)) in verdicts.iter().zip(&adus.adus).enumerate() {
            let (action, trace) = oracle_descent(&spec, &netsp, adu);
            ensure(v.adu == i && v.action == action && v.trace == trace, || {
                format!(
                    "tree {t} adu {i}: got {:?} {:?}, oracle {action:?} {trace:?}",
                    v.action, v.trace
                )
            })?;
            max_depth = max_depth.max(trace.len());
        }
    }
    Ok(format!("50 trees x 100 ADUs exact, deepest trace {max_depth}"))
}

// ---------------------------------------------------------------------
// 7. parser fidelity

fn criterion_7() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0xc7);
    let mut packets_checked = 0;
    for c in 0..200 {
        let mut packets = Vec::new();
        let mut ts = rng.random_range(0..2_000_000_000_000u64);
        for _ in 0..rng.random_range(0..12) {
            ts += rng.random_range(0..3_000_000);
            let src = SocketAddrV4::new(Ipv4Addr::from(rng.random::<u32>()), rng.random());
            let dst = SocketAddrV4::new(Ipv4Addr::from(rng.random::<u32>()), rng.random());
            let payload: Vec<u8> = (0..rng.random_range(0..300)).map(|_| rng.random()).collect();
            packets.push(if rng.random_bool(0.6) {
                Packet::tcp(ts, src, dst, rng.random(), rng.random(), &payload)
            } else {
                Packet::udp(ts, src, dst, &payload)
            });
        }
        let mut cap = Capture::from_packets(packets);
        cap.byte_order = if rng.random_bool(0.5) {
            ByteOrder::Little
        } else {
            ByteOrder::Big
        };
        let bytes = cap.to_bytes();
        let parsed = parse_capture(&bytes).map_err(|e| format!("capture {c}: {e}"))?;
        ensure(parsed.packets == cap.packets, || {
            format!("capture {c}: decoded packets differ")
        })?;
        ensure(parsed.to_bytes() == bytes, || {
            format!("capture {c}: re-serialized bytes differ")
        })?;
        packets_checked += parsed.packets.len();
    }

    let seeds = [
        synth::CORRECT_RULE,
        synth::NEAR_CORRECT_RULE,
        r#"block udp 10.0.0.0/8 53 -> any any (msg:"x\;y"; content:"|00 01|abc"; nocase; content:"q"; sid:7;)"#,
        r#"allow any any any -> 192.168.1.1 443 (sid:3;)"#,
    ];
    const PIECES: &[&str] = &[
        "alert",
        "block",
        "allow",
        "drop",
        "tcp",
        "udp",
        "any",
        "->",
        "<>",
        "(",
        ")",
        ";",
        ":",
        "\"",
        "|",
        "\\",
        "sid",
        "content",
        "nocase",
        "msg",
        "80",
        "8080",
        "65536",
        "-1",
        "10.0.0.1",
        "10.0.0.0/33",
        "/",
        " ",
        "\t",
        "é",
        "\0",
    ];
    let (mut ok, mut err) = (0, 0);
    for s in 0..10_000 {
        let text: String = match s % 3 {
            0 => (0..rng.random_range(0..24))
                .map(|_| *PIECES.choose(&mut rng).unwrap())
                .collect::<Vec<_>>()
                .join(if rng.random_bool(0.5) { " " } else { "" }),
            1 => {
                let mut b = seeds.choose(&mut rng).unwrap().as_bytes().to_vec();
                for _ in 0..rng.random_range(1..4) {
                    let i = rng.random_range(0..=b.len());
                    match rng.random_range(0..3) {
                        0 if i < b.len() => {
                            b.remove(i);
                        }
                        1 if i < b.len() => b[i] = rng.random_range(0x20..0x7f),
                        _ => b.insert(i, rng.random_range(0x20..0x7f)),
                    }
                }
                String::from_utf8_lossy(&b).into_owned()
            }
            _ => {
                let b: Vec<u8> = (0..rng.random_range(0..80)).map(|_| rng.random()).collect();
                String::from_utf8_lossy(&b).into_owned()
            }
        };
        let result = catch_unwind(AssertUnwindSafe(|| parse_rule(&text))).map_err(|_| format!("panic on {text:?}"))?;
        match result {
            Ok(rule) => {
                ok += 1;
                let again =
                    parse_rule(&rule.to_string()).map_err(|e| format!("{text:?} -> {rule} fails to reparse: {e}"))?;
                ensure(again == rule, || format!("{text:?} does not round-trip"))?;
            }
            Err(e) => {
                err += 1;
                ensure(e.position() <= text.len(), || {
                    format!("{text:?}: error position {} past end", e.position())
                })?;
            }
        }
    }
    Ok(format!("200 captures ({packets_checked} packets) byte-identical; 10000 rule strings: {ok} rules, {err} positioned errors"))
}

// ---------------------------------------------------------------------
// 8. join_label against brute-force top-k

struct CoarseMetric;

impl DistanceMetric for CoarseMetric {
    fn distance(&self, a: &str, b: &str) -> f64 {
        ((a.len() as f64 - b.len() as f64).abs() / 4.0).floor() / 10.0
    }
}

fn criterion_8() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0xc8);
    const WORDS: &[&str] = &[
        "jndi", "ldap", "lookup", "GET", "http", "log4j", "user", "agent", "dns", "x",
    ];
    let text = |rng: &mut ChaCha8Rng| {
        (0..rng.random_range(1..8))
            .map(|_| *WORDS.choose(rng).unwrap())
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut cases = 0;
    for _ in 0..300 {
        let ns = rng.random_range(0..=20);
        let np = rng.random_range(0..=400_usize.checked_div(ns).unwrap_or(20));
        let vc: Vec<SentenceContext> = (0..ns)
            .map(|i| SentenceContext {
                text: text(&mut rng),
                index: i,
            })
            .collect();
        let nc: Vec<PacketContext> = (0..np)
            .map(|i| PacketContext {
                rendering: format!("TCP 10.0.0.1:1 -> 10.0.0.2:80 {}", text(&mut rng)),
                adu_ref: PacketRef {
                    sequence: 0,
                    adu: i,
                    packet: 0,
                },
                proto: Proto::Tcp,
                dst_port: 80,
                payload: Vec::new(),
            })
            .collect();
        let total = ns * np;
        for k in [10, rng.random_range(0..=total + 3)] {
            let metrics: [&dyn DistanceMetric; 2] = [&NgramCosine, &CoarseMetric];
            for metric in metrics {
                let got = join_label(&vc, &nc, k, metric);
                let mut remaining: Vec<(usize, usize)> = (0..ns).flat_map(|s| (0..np).map(move |p| (s, p))).collect();
                let mut want = Vec::new();
                while want.len() < k && !remaining.is_empty() {
                    let mut bi = 0;
                    for i in 1..remaining.len() {
                        let (s, p) = remaining[i];
                        let (bs, bp) = remaining[bi];
                        let d = metric.distance(&vc[s].text, &nc[p].rendering);
                        let bd = metric.distance(&vc[bs].text, &nc[bp].rendering);
                        if d < bd || (d == bd && (s, p) < (bs, bp)) {
                            bi = i;
                        }
                    }
                    let (s, p) = remaining.remove(bi);
                    want.push((s, p, metric.distance(&vc[s].text, &nc[p].rendering)));
                }
                let got: Vec<(usize, usize, f64)> = got
                    .pairs
                    .iter()
                    .map(|r| (r.sentence.index, r.packet.adu_ref.adu, r.distance))
                    .collect();
                ensure(got == want, || format!("{ns}x{np} k={k}: got {got:?}, want {want:?}"))?;
                cases += 1;
            }
        }
    }
    Ok(format!("{cases} rankings exact"))
}

// ---------------------------------------------------------------------
// 9. training determinism through the command layer

fn criterion_9() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dataset = dir.path().join("dataset");
    synth::write_log4j_dataset(&dataset).map_err(|e| e.to_string())?;
    let run = |name: &str| -> Result<Vec<u8>, String> {
        let mut cfg = Config::default();
        cfg.paths.reports = dir.path().join(name);
        commands::train(&cfg, &dataset, &mut std::io::sink()).map_err(|e| e.to_string())?;
        std::fs::read(cfg.paths.reports.join("history.jsonl")).map_err(|e| e.to_string())
    };
    let a = run("a")?;
    let b = run("b")?;
    ensure(!a.is_empty(), || "empty history".into())?;
    ensure(a == b, || "history files differ".into())?;
    Ok(format!("two runs, {} identical history bytes", a.len()))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("reward oracle equivalence", criterion_1),
        ("surrogate gradient check", criterion_2),
        ("group-relative arithmetic", criterion_3),
        ("synthetic Log4j training", criterion_4),
        ("fuzz & trim convergence", criterion_5),
        ("decision-tree oracle", criterion_6),
        ("parser fidelity", criterion_7),
        ("pair-ranking correctness", criterion_8),
        ("training determinism", criterion_9),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let result = catch_unwind(f).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match result {
            Ok(detail) => println!("criterion {}: PASS {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {}: FAIL {name}: {detail}", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", criteria.len());
        std::process::exit(1);
    }
    println!("all {} criteria passed", criteria.len());
}
