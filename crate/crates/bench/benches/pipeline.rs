use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use refn_core::grpo::{self, HyperParams};
use refn_core::reward::{count_confusion, pair_rank, reward};
use refn_core::validator::{fuzz_trim, ntot_bfs, port_content_spec};
use refn_core::{parse_capture, synth, AduSequence, RuleSet, VnfInstance};

fn ingest(c: &mut Criterion) {
    let bytes = synth::malicious_capture().to_bytes();
    c.bench_function("parse_capture", |b| {
        b.iter(|| parse_capture(black_box(&bytes)).unwrap())
    });
    let task = synth::log4j_task();
    c.bench_function("pair_rank", |b| {
        b.iter(|| pair_rank(black_box(&task.corpus().malicious), &task.corpus().benign, 0.9))
    });
}

fn enforcement(c: &mut Criterion) {
    let task = synth::log4j_task();
    let rules = RuleSet::parse(synth::CORRECT_RULE).unwrap();
    c.bench_function("vnf_reward", |b| {
        b.iter(|| {
            let mut vnf = VnfInstance::instantiate(black_box(&rules), 0);
            reward(count_confusion(&mut vnf, &task.diff, &task.corpus().benign))
        })
    });
    let tree = port_content_spec(8080, "jndi:dns").build().unwrap();
    let attack = AduSequence {
        source_id: "attack".into(),
        adus: task.diff.attack_adus().cloned().collect(),
    };
    c.bench_function("ntot_bfs", |b| b.iter(|| ntot_bfs(black_box(&attack), &tree).unwrap()));
}

fn optimisation(c: &mut Criterion) {
    let tasks = vec![synth::log4j_task()];
    let hp = HyperParams::default();
    let mut policy = grpo::initial_policy(&tasks).unwrap();
    let group = grpo::collect_group(&mut policy, &tasks[0], &hp, 1).unwrap();
    c.bench_function("collect_group", |b| {
        b.iter(|| grpo::collect_group(&mut policy.clone(), &tasks[0], &hp, black_box(1)).unwrap())
    });
    c.bench_function("policy_step", |b| {
        b.iter(|| grpo::policy_step(&mut policy.clone(), black_box(&group), &hp).unwrap())
    });
    let near = RuleSet::parse(synth::NEAR_CORRECT_RULE).unwrap();
    c.bench_function("fuzz_trim_near_correct", |b| {
        b.iter(|| fuzz_trim(black_box(&near), tasks[0].corpus(), &tasks[0].diff, 500, 42).unwrap())
    });
}

criterion_group!(benches, ingest, enforcement, optimisation);
criterion_main!(benches);
