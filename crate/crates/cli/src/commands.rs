use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use refn_core::dataset::{load_record, record_paths, write_distillation, DistillationTuple, VulnRecord};
use refn_core::grpo::{self, IterationReport};
use refn_core::reward::{ConfusionCounts, RewardValue};
use refn_core::validator::{
    feedback, fuzz_trim_from, ntot_bfs, vnf_pentest, DecisionTree, NtotSpec, NtotVerdict, PentestReport,
};
use refn_core::{AduSequence, MiddleboxAction, RuleSet, Task};
use serde::{Deserialize, Serialize};

use crate::generation::{fetch_candidates, DroppedCandidate, GenerationError, GenerationRequest};
use crate::{CliError, Config};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("report types serialize");
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn out_line(out: &mut dyn Write, line: &str) -> Result<(), CliError> {
    writeln!(out, "{line}").map_err(io_err(Path::new("<stdout>")))
}

pub struct LoadedTask {
    pub path: PathBuf,
    pub record: VulnRecord,
    pub task: Task,
}

/// Loads every record of `dataset` and builds its task.
pub fn load_tasks(cfg: &Config, dataset: &Path) -> Result<Vec<LoadedTask>, CliError> {
    let mut out: Vec<LoadedTask> = Vec::new();
    for path in record_paths(dataset)? {
        let record = load_record(&path)?;
        if out.iter().any(|t| t.record.name == record.name) {
            return Err(CliError::DuplicateRecord(record.name));
        }
        let task = Task::from_record(&record, &cfg.task_config())?;
        out.push(LoadedTask { path, record, task });
    }
    Ok(out)
}

pub fn read_rules(path: &Path) -> Result<RuleSet, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    RuleSet::parse(&text).map_err(|error| CliError::Rules {
        path: path.to_path_buf(),
        error,
    })
}

pub fn read_ntot_spec(path: &Path) -> Result<DecisionTree, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let spec_err = |error| CliError::Spec {
        path: path.to_path_buf(),
        error,
    };
    NtotSpec::from_json(&text).and_then(|s| s.build()).map_err(spec_err)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordSummary {
    pub name: String,
    pub file: PathBuf,
    pub malicious_adus: usize,
    pub benign_adus: usize,
    pub attack_adus: usize,
    pub excluded_adus: usize,
    pub ranked_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub records: Vec<RecordSummary>,
}

pub fn ingest(cfg: &Config, dataset: &Path, out: &mut dyn Write) -> Result<IngestReport, CliError> {
    let tasks = load_tasks(cfg, dataset)?;
    let count = |seqs: &[AduSequence]| seqs.iter().map(AduSequence::len).sum();
    let records: Vec<RecordSummary> = tasks
        .iter()
        .map(|t| RecordSummary {
            name: t.record.name.clone(),
            file: t.path.clone(),
            malicious_adus: count(&t.task.corpus().malicious),
            benign_adus: count(&t.task.corpus().benign),
            attack_adus: t.task.diff.attack.len(),
            excluded_adus: t.task.diff.excluded.len(),
            ranked_pairs: t.task.pairs.pairs.len(),
        })
        .collect();
    out_line(out, &format!("{} records", records.len()))?;
    for r in &records {
        out_line(
            out,
            &format!(
                "{}: malicious {} ADUs, benign {} ADUs, attack {} ADUs, excluded {}",
                r.name, r.malicious_adus, r.benign_adus, r.attack_adus, r.excluded_adus
            ),
        )?;
    }
    let report = IngestReport { records };
    write_json(&cfg.paths.reports.join("ingest.json"), &report)?;
    Ok(report)
}

/// What the generation service contributed for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum GenerationStatus {
    /// No endpoint configured.
    Skipped,
    Ok {
        candidates: Vec<ScoredCandidate>,
        dropped: Vec<DroppedCandidate>,
    },
    /// The service failed; the command went on without it.
    Fallback { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub rules: String,
    pub reward: RewardValue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskGeneration {
    pub task: String,
    #[serde(flatten)]
    pub status: GenerationStatus,
}

fn generate(cfg: &Config, task: &Task) -> (GenerationStatus, Vec<RuleSet>) {
    let Some(endpoint) = cfg.generation.endpoint.as_deref() else {
        return (GenerationStatus::Skipped, Vec::new());
    };
    let request = GenerationRequest {
        prompt: task.trajectory.x.clone(),
        max_candidates: cfg.generation.max_candidates,
    };
    match fetch_candidates(endpoint, Duration::from_millis(cfg.generation.timeout_ms), &request) {
        Ok(c) => {
            let candidates = c
                .accepted
                .iter()
                .map(|rs| ScoredCandidate {
                    rules: rs.canonical(),
                    reward: feedback(&vnf_pentest(rs, task.corpus(), &task.diff)),
                })
                .collect();
            (
                GenerationStatus::Ok {
                    candidates,
                    dropped: c.dropped,
                },
                c.accepted,
            )
        }
        Err(e) => {
            log::warn!(
                "generation service unavailable for {}: {e}; using the built-in policy",
                task.name
            );
            let reason = match e {
                GenerationError::Timeout => "timeout".to_string(),
                GenerationError::BadResponse(m) => format!("bad response: {m}"),
            };
            (GenerationStatus::Fallback { reason }, Vec::new())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub iterations: usize,
    pub final_mean_reward: Option<f64>,
    pub best: Vec<(String, String, f64)>,
}

/// Runs VNF-GRPO over every record and writes `history.jsonl`,
/// `reward.csv`, `policy.json`, `training_records.jsonl` and
/// `generation.json` under the report directory.
pub fn train(cfg: &Config, dataset: &Path, out: &mut dyn Write) -> Result<TrainSummary, CliError> {
    let loaded = load_tasks(cfg, dataset)?;
    let tasks: Vec<Task> = loaded.into_iter().map(|t| t.task).collect();
    let reports = &cfg.paths.reports;

    let generation: Vec<TaskGeneration> = tasks
        .iter()
        .map(|t| TaskGeneration {
            task: t.name.clone(),
            status: generate(cfg, t).0,
        })
        .collect();
    write_json(&reports.join("generation.json"), &generation)?;

    let policy = grpo::initial_policy(&tasks)?;
    let outcome = grpo::train(policy, &tasks, &cfg.grpo, cfg.iters, cfg.seed, |r: &IterationReport| {
        log::info!("iter {} {} mean reward {:.4}", r.iteration, r.task, r.mean_reward);
    })?;

    let mut history = Vec::new();
    grpo::write_history(&outcome.history, &mut history).map_err(io_err(reports))?;
    write_file(&reports.join("history.jsonl"), &history)?;

    let mut csv = String::from("iteration,task,mean_reward,best_reward\n");
    for h in &outcome.history {
        writeln!(
            csv,
            "{},{},{:.6},{:.6}",
            h.iteration, h.task, h.mean_reward, h.best_reward
        )
        .expect("string write");
    }
    write_file(&reports.join("reward.csv"), csv.as_bytes())?;
    write_json(&reports.join("policy.json"), &outcome.policy)?;

    let tuples: Vec<DistillationTuple> = outcome.last_group.iter().flat_map(grpo::group_tuples).collect();
    write_distillation(&tuples, &reports.join("training_records.jsonl"))?;

    let mut best = Vec::new();
    for t in &tasks {
        if let Some(h) = outcome.history.iter().filter(|h| h.task == t.name).max_by(|a, b| {
            a.best_reward
                .total_cmp(&b.best_reward)
                .then(b.iteration.cmp(&a.iteration))
        }) {
            best.push((t.name.clone(), h.best_rule.clone(), h.best_reward));
        }
    }
    let summary = TrainSummary {
        iterations: outcome.history.len(),
        final_mean_reward: outcome.history.last().map(|h| h.mean_reward),
        best,
    };
    out_line(out, &format!("{} iterations", summary.iterations))?;
    if let Some(r) = summary.final_mean_reward {
        out_line(out, &format!("final mean reward {r:.6}"))?;
    }
    for (task, rule, r) in &summary.best {
        out_line(out, &format!("{task}: best reward {r:.6}: {rule}"))?;
    }
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NtotSummary {
    /// The tree's inferred actions scored as if it were the enforcing VNF.
    pub counts: ConfusionCounts,
    /// ADUs where the tree and the VNF agree on detection.
    pub agreement: usize,
    pub total: usize,
    pub attack: Vec<NtotVerdict>,
    pub benign: Vec<Vec<NtotVerdict>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordValidation {
    pub name: String,
    pub reward: RewardValue,
    pub pentest: PentestReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ntot: Option<NtotSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidateReport {
    pub rules: String,
    pub records: Vec<RecordValidation>,
    pub passed: bool,
}

fn ntot_summary(task: &Task, report: &PentestReport, tree: &DecisionTree) -> NtotSummary {
    let attack_seq = AduSequence {
        source_id: "attack".into(),
        adus: task.diff.attack.iter().map(|a| a.adu.clone()).collect(),
    };
    // Trees are validated on load, so every descent ends at a leaf.
    let attack = ntot_bfs(&attack_seq, tree).expect("validated tree");
    let benign: Vec<Vec<NtotVerdict>> = task
        .corpus()
        .benign
        .iter()
        .map(|s| ntot_bfs(s, tree).expect("validated tree"))
        .collect();
    let mut counts = ConfusionCounts::default();
    for v in &attack {
        if v.action.is_detection() {
            counts.tp += 1;
        } else {
            counts.fn_ += 1;
        }
    }
    let flat_benign: Vec<&NtotVerdict> = benign.iter().flatten().collect();
    counts.fp = flat_benign.iter().filter(|v| v.action.is_detection()).count() as u64;
    let tree_actions: Vec<MiddleboxAction> = attack
        .iter()
        .chain(flat_benign.iter().copied())
        .map(|v| v.action)
        .collect();
    let agreement = tree_actions
        .iter()
        .zip(&report.records)
        .filter(|(t, r)| t.is_detection() == r.observed.is_detection())
        .count();
    NtotSummary {
        counts,
        agreement,
        total: report.records.len(),
        attack,
        benign,
    }
}

/// Pentests `rules` against every record; `passed` only if all pass.
pub fn validate(
    cfg: &Config,
    rules_path: &Path,
    dataset: &Path,
    ntot_spec: Option<&Path>,
    out: &mut dyn Write,
) -> Result<ValidateReport, CliError> {
    let rules = read_rules(rules_path)?;
    let tree = ntot_spec.map(read_ntot_spec).transpose()?;
    let tasks = load_tasks(cfg, dataset)?;
    if tasks.is_empty() {
        return Err(CliError::NoRecords(dataset.to_path_buf()));
    }
    let mut records = Vec::new();
    for t in &tasks {
        let pentest = vnf_pentest(&rules, t.task.corpus(), &t.task.diff);
        let reward = feedback(&pentest);
        let ntot = tree.as_ref().map(|tree| ntot_summary(&t.task, &pentest, tree));
        let c = pentest.counts;
        let mut line = format!(
            "{}: tp={} fn={} fp={} reward={:.6} {}",
            t.record.name,
            c.tp,
            c.fn_,
            c.fp,
            reward.r,
            if pentest.passed { "PASS" } else { "FAIL" }
        );
        if let Some(n) = &ntot {
            write!(line, " ntot agreement {}/{}", n.agreement, n.total).expect("string write");
        }
        out_line(out, &line)?;
        records.push(RecordValidation {
            name: t.record.name.clone(),
            reward,
            pentest,
            ntot,
        });
    }
    let report = ValidateReport {
        rules: rules.canonical(),
        passed: records.iter().all(|r| r.pentest.passed),
        records,
    };
    write_json(&cfg.paths.reports.join("validate.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuzzResult {
    pub task: String,
    pub rules_file: PathBuf,
    pub best: String,
    pub reward: RewardValue,
    pub evaluations: usize,
    pub generation: GenerationStatus,
}

/// Refines `rules` per record and writes `<reports>/fuzz/<name>.rules`.
pub fn fuzz(cfg: &Config, rules_path: &Path, dataset: &Path, out: &mut dyn Write) -> Result<Vec<FuzzResult>, CliError> {
    let start = read_rules(rules_path)?;
    let tasks = load_tasks(cfg, dataset)?;
    if tasks.is_empty() {
        return Err(CliError::NoRecords(dataset.to_path_buf()));
    }
    let mut results = Vec::new();
    for t in &tasks {
        let (generation, extra) = generate(cfg, &t.task);
        let mut starts = vec![start.clone()];
        starts.extend(extra);
        let o = fuzz_trim_from(
            &starts,
            t.task.corpus(),
            &t.task.diff,
            cfg.fuzz.budget,
            cfg.fuzz.beam,
            cfg.seed,
        )?;
        let rules_file = cfg.paths.reports.join("fuzz").join(format!("{}.rules", t.record.name));
        let text = format!(
            "# reward {:.6} after {} evaluations\n{}",
            o.reward.r,
            o.evaluations,
            o.best.canonical()
        );
        write_file(&rules_file, text.as_bytes())?;
        out_line(
            out,
            &format!(
                "{}: reward {:.6} after {} evaluations -> {}",
                t.record.name,
                o.reward.r,
                o.evaluations,
                rules_file.display()
            ),
        )?;
        results.push(FuzzResult {
            task: t.record.name.clone(),
            rules_file,
            best: o.best.canonical(),
            reward: o.reward,
            evaluations: o.evaluations,
            generation,
        });
    }
    write_json(&cfg.paths.reports.join("fuzz.json"), &results)?;
    Ok(results)
}

/// Writes distillation tuples `({v}, p, {f})` for every record: the
/// record's distilled rules, rules from `extra_rules`, and any generated
/// candidates, each scored on its own.
pub fn export(
    cfg: &Config,
    dataset: &Path,
    extra_rules: Option<&Path>,
    out_path: &Path,
    out: &mut dyn Write,
) -> Result<Vec<DistillationTuple>, CliError> {
    let extra = extra_rules.map(read_rules).transpose()?;
    let tasks = load_tasks(cfg, dataset)?;
    let mut tuples = Vec::new();
    for t in &tasks {
        let mut filters: Vec<String> = t.record.distilled.clone().unwrap_or_default();
        if let Some(rs) = &extra {
            filters.extend(rs.rules().iter().map(ToString::to_string));
        }
        let (_, generated) = generate(cfg, &t.task);
        for rs in &generated {
            filters.extend(rs.rules().iter().map(ToString::to_string));
        }
        let mut seen = std::collections::HashSet::new();
        filters.retain(|f| seen.insert(f.clone()));
        if filters.is_empty() {
            log::warn!("{}: no filters to export", t.record.name);
            continue;
        }
        let mut rewards = Vec::with_capacity(filters.len());
        for f in &filters {
            let rs = RuleSet::parse(f).map_err(|error| CliError::Rules {
                path: t.path.clone(),
                error,
            })?;
            rewards.push(feedback(&vnf_pentest(&rs, t.task.corpus(), &t.task.diff)).r);
        }
        tuples.push(DistillationTuple {
            vulns: t.task.vulns.clone(),
            prompt: t.task.trajectory.x.clone(),
            filters,
            rewards: Some(rewards),
            extra: Default::default(),
        });
    }
    write_distillation(&tuples, out_path)?;
    out_line(out, &format!("{} tuples -> {}", tuples.len(), out_path.display()))?;
    Ok(tuples)
}
