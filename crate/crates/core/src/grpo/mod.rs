//! Group-relative policy optimization driven by enforcement rewards.
//!
//! Every iteration samples a group of `N` candidate rule sets, enforces
//! each one on the task's captures, and turns the F1 rewards into
//! group-relative rewards `R_i = r_i / sum(r)` and advantages
//! `A_i = R_i - mean(R)`. The policy then ascends the clipped surrogate
//! objective with a proximity penalty `||theta - theta_old||^2`.

mod policy;

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use policy::{sample_member, PolicyHead, PolicyParams, RuleChoice, RuleVocabulary, FACTOR_COUNT};

use crate::dataset::{write_distillation, DatasetError, DistillationTuple};
use crate::reward::{count_confusion, reward, ConfusionCounts, RewardValue};
use crate::rules::RuleSet;
use crate::task::Task;
use crate::vnf::VnfInstance;

#[derive(Debug, Error)]
pub enum GrpoError {
    #[error("empty vocabulary for factor {0}")]
    EmptyVocabulary(String),
    #[error("no policy head for context {0:?}")]
    UnknownContext(String),
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperParams(String),
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("no training tasks")]
    NoTasks,
    #[error(transparent)]
    Export(#[from] DatasetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    /// Learning rate.
    pub beta: f64,
    /// Weight of the proximity penalty.
    pub lambda: f64,
    /// Ratio clipping half-width, in (0, 1).
    pub epsilon: f64,
    /// Group size N >= 2.
    pub group_size: usize,
    /// Gradient steps taken on each collected group.
    pub update_steps: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            beta: 2.0,
            lambda: 0.05,
            epsilon: 0.2,
            group_size: 8,
            update_steps: 4,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<(), GrpoError> {
        let bad = |m: &str| Err(GrpoError::InvalidHyperParams(m.to_string()));
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return bad("beta must be a finite value >= 0");
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad("lambda must be a finite value >= 0");
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad("epsilon must lie in (0, 1)");
        }
        if self.group_size < 2 {
            return bad("group size must be at least 2");
        }
        if self.update_steps == 0 {
            return bad("update_steps must be at least 1");
        }
        Ok(())
    }
}

/// `R_i = r_i / sum_j r_j`, or `1/N` for everyone when the sum is zero.
pub fn group_relative(r: &[f64]) -> Vec<f64> {
    let sum: f64 = r.iter().sum();
    if sum > 0.0 {
        r.iter().map(|v| v / sum).collect()
    } else {
        vec![1.0 / r.len() as f64; r.len()]
    }
}

/// Mean-baseline advantage `A_i = R_i - mean(R)`.
pub fn advantage(group_relative: &[f64]) -> Vec<f64> {
    let mean = group_relative.iter().sum::<f64>() / group_relative.len() as f64;
    group_relative.iter().map(|v| v - mean).collect()
}

pub fn clip_ratio(ratio: f64, epsilon: f64) -> f64 {
    ratio.clamp(1.0 - epsilon, 1.0 + epsilon)
}

/// `min(rho * A, clip(rho, 1-eps, 1+eps) * A)`.
pub fn clipped_objective(ratio: f64, advantage: f64, epsilon: f64) -> f64 {
    (ratio * advantage).min(clip_ratio(ratio, epsilon) * advantage)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMember {
    pub rules: RuleSet,
    pub choice: RuleChoice,
    pub counts: ConfusionCounts,
    pub reward: RewardValue,
    /// Group-relative reward.
    pub relative: f64,
    pub advantage: f64,
    pub log_prob_old: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSample {
    pub context: String,
    pub vulns: Vec<String>,
    pub prompt: String,
    pub members: Vec<GroupMember>,
}

impl GroupSample {
    pub fn mean_reward(&self) -> f64 {
        mean(self.members.iter().map(|m| m.reward.r))
    }
}

fn mean(it: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = it.len();
    if n == 0 {
        0.0
    } else {
        it.sum::<f64>() / n as f64
    }
}

/// SplitMix64 step, used to derive independent member seeds.
pub fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z = base
        .wrapping_add(a.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(b.wrapping_mul(0xd1b5_4a32_d192_ed03))
        .wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Reward of one rule set on a task, through a fresh VNF instance.
pub fn score(rules: &RuleSet, task: &Task, member: usize) -> (ConfusionCounts, RewardValue) {
    let mut vnf = VnfInstance::instantiate(rules, member);
    let counts = count_confusion(&mut vnf, &task.diff, &task.corpus().benign);
    (counts, reward(counts))
}

/// Snapshots `theta_old`, samples the group, and scores every member.
pub fn collect_group(
    policy: &mut PolicyParams,
    task: &Task,
    hp: &HyperParams,
    seed: u64,
) -> Result<GroupSample, GrpoError> {
    hp.validate()?;
    policy.snapshot();
    let policy = &*policy;
    let sampled: Vec<(RuleSet, RuleChoice, f64)> = (0..hp.group_size)
        .map(|i| sample_member(policy, &task.name, derive_seed(seed, i as u64, 0)))
        .collect::<Result<_, _>>()?;
    let scored: Vec<(ConfusionCounts, RewardValue)> = sampled
        .par_iter()
        .enumerate()
        .map(|(i, (rules, _, _))| score(rules, task, i))
        .collect();
    let rewards: Vec<f64> = scored.iter().map(|(_, r)| r.r).collect();
    let relative = group_relative(&rewards);
    let adv = advantage(&relative);
    let members = sampled
        .into_iter()
        .zip(scored)
        .enumerate()
        .map(|(i, ((rules, choice, lp), (counts, rv)))| GroupMember {
            rules,
            choice,
            counts,
            reward: rv,
            relative: relative[i],
            advantage: adv[i],
            log_prob_old: lp,
        })
        .collect();
    Ok(GroupSample {
        context: task.name.clone(),
        vulns: task.vulns.clone(),
        prompt: task.trajectory.x.clone(),
        members,
    })
}

/// Mean clipped surrogate over the group at logits `theta`.
pub fn surrogate_objective_at(policy: &PolicyParams, theta: &[f64], group: &GroupSample, epsilon: f64) -> f64 {
    mean(group.members.iter().map(|m| {
        let ratio = (policy.log_prob_at(theta, &m.choice) - m.log_prob_old).exp();
        clipped_objective(ratio, m.advantage, epsilon)
    }))
}

pub fn surrogate_objective(policy: &PolicyParams, group: &GroupSample, epsilon: f64) -> f64 {
    surrogate_objective_at(policy, &policy.theta, group, epsilon)
}

/// Analytic gradient of [`surrogate_objective`]. A member contributes
/// `A * rho * grad log pi` while the unclipped term is the active minimum
/// and nothing once its ratio has been clipped.
pub fn surrogate_gradient(policy: &PolicyParams, group: &GroupSample, epsilon: f64) -> Vec<f64> {
    let mut grad = vec![0.0; policy.theta.len()];
    let n = group.members.len();
    if n == 0 {
        return grad;
    }
    for m in &group.members {
        let ratio = (policy.log_prob(&m.choice) - m.log_prob_old).exp();
        let a = m.advantage;
        if a == 0.0 || ratio * a > clip_ratio(ratio, epsilon) * a {
            continue;
        }
        policy.accumulate_grad_log_prob(&m.choice, a * ratio / n as f64, &mut grad);
    }
    grad
}

/// Surrogate minus `lambda * ||theta - theta_old||^2`.
pub fn regularized_objective_at(policy: &PolicyParams, theta: &[f64], group: &GroupSample, hp: &HyperParams) -> f64 {
    let penalty: f64 = theta
        .iter()
        .zip(&policy.theta_old)
        .map(|(t, o)| (t - o) * (t - o))
        .sum();
    surrogate_objective_at(policy, theta, group, hp.epsilon) - hp.lambda * penalty
}

/// One update: `theta += beta * grad L - lambda * grad penalty`.
pub fn policy_step(policy: &mut PolicyParams, group: &GroupSample, hp: &HyperParams) -> Result<(), GrpoError> {
    let g = surrogate_gradient(policy, group, hp.epsilon);
    let step: Vec<f64> = g
        .iter()
        .zip(policy.theta.iter().zip(&policy.theta_old))
        .map(|(gi, (t, o))| hp.beta * gi - hp.lambda * 2.0 * (t - o))
        .collect();
    if step.iter().any(|s| !s.is_finite()) {
        return Err(GrpoError::NonFiniteGradient);
    }
    for (t, s) in policy.theta.iter_mut().zip(step) {
        *t += s;
    }
    Ok(())
}

/// One line of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub task: String,
    pub mean_reward: f64,
    pub mean_relative: f64,
    pub loss: f64,
    pub theta_norm: f64,
    pub best_reward: f64,
    pub best_rule: String,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: PolicyParams,
    pub history: Vec<IterationReport>,
    /// Group collected in the final iteration, if any.
    pub last_group: Option<GroupSample>,
}

/// A uniform policy with one head per task.
pub fn initial_policy(tasks: &[Task]) -> Result<PolicyParams, GrpoError> {
    PolicyParams::new(tasks.iter().map(|t| (t.name.clone(), t.vocab.clone())).collect())
}

/// Runs `iters` iterations, cycling through `tasks`. Deterministic for a
/// given seed.
pub fn train(
    mut policy: PolicyParams,
    tasks: &[Task],
    hp: &HyperParams,
    iters: usize,
    seed: u64,
    mut on_iteration: impl FnMut(&IterationReport),
) -> Result<TrainOutcome, GrpoError> {
    hp.validate()?;
    if tasks.is_empty() {
        return Err(GrpoError::NoTasks);
    }
    let mut history = Vec::with_capacity(iters);
    let mut last_group = None;
    for it in 0..iters {
        let task = &tasks[it % tasks.len()];
        let group = collect_group(&mut policy, task, hp, derive_seed(seed, it as u64, 1))?;
        for _ in 0..hp.update_steps {
            policy_step(&mut policy, &group, hp)?;
        }
        let best = group
            .members
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.reward.r.total_cmp(&b.1.reward.r).then(b.0.cmp(&a.0)))
            .map(|(_, m)| m)
            .expect("group is non-empty");
        let report = IterationReport {
            iteration: it,
            task: task.name.clone(),
            mean_reward: group.mean_reward(),
            mean_relative: mean(group.members.iter().map(|m| m.relative)),
            loss: -surrogate_objective(&policy, &group, hp.epsilon),
            theta_norm: policy.theta.iter().map(|t| t * t).sum::<f64>().sqrt(),
            best_reward: best.reward.r,
            best_rule: best.rules.rules()[0].to_string(),
        };
        on_iteration(&report);
        history.push(report);
        last_group = Some(group);
    }
    Ok(TrainOutcome {
        policy,
        history,
        last_group,
    })
}

/// One distillation tuple per group member.
pub fn group_tuples(group: &GroupSample) -> Vec<DistillationTuple> {
    group
        .members
        .iter()
        .map(|m| DistillationTuple {
            vulns: group.vulns.clone(),
            prompt: group.prompt.clone(),
            filters: m.rules.rules().iter().map(ToString::to_string).collect(),
            rewards: Some(vec![m.reward.r; m.rules.len()]),
            extra: Default::default(),
        })
        .collect()
}

pub fn export_training_records(group: &GroupSample, path: &Path) -> Result<(), GrpoError> {
    write_distillation(&group_tuples(group), path)?;
    Ok(())
}

/// Writes the history as JSON lines.
pub fn write_history(history: &[IterationReport], mut out: impl Write) -> std::io::Result<()> {
    for h in history {
        serde_json::to_writer(&mut out, h)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
