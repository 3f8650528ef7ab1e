//! Turning a vulnerability record and its captures into a training task.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adu::{assemble_adus, AduSequence, DEFAULT_ADU_GAP};
use crate::dataset::VulnRecord;
use crate::grpo::RuleVocabulary;
use crate::pairing::{
    join_label, segment_description, DistanceMetric, NgramCosine, PacketContext, PacketRef, RankedPairs, DEFAULT_TOP_K,
};
use crate::pcap::{parse_capture, Capture, PcapError};
use crate::reward::{pair_rank, AduCorpus, DiffResult, DEFAULT_PAIR_THRESHOLD};

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Capture {
        path: PathBuf,
        #[source]
        source: PcapError,
    },
    #[error("task {0} needs both benign and malicious captures")]
    OneSidedCorpus(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub adu_gap: Duration,
    pub pair_threshold: f64,
    pub top_k: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            adu_gap: DEFAULT_ADU_GAP,
            pair_threshold: DEFAULT_PAIR_THRESHOLD,
            top_k: DEFAULT_TOP_K,
        }
    }
}

/// One group member's conditioning: prompt `x`, rationale `e`, and the
/// packets `p` the generated rules are enforced on. There is no reference
/// answer; the reward comes from enforcement alone.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub x: String,
    pub e: String,
    pub p: Arc<AduCorpus>,
}

#[derive(Debug, Clone)]
pub struct Task {
    pub name: String,
    pub vulns: Vec<String>,
    pub trajectory: Trajectory,
    pub diff: DiffResult,
    pub pairs: RankedPairs,
    pub vocab: RuleVocabulary,
}

impl Task {
    pub fn corpus(&self) -> &AduCorpus {
        &self.trajectory.p
    }

    pub fn from_record(record: &VulnRecord, cfg: &TaskConfig) -> Result<Task, TaskError> {
        let load = |paths: Vec<PathBuf>| -> Result<Vec<(String, Capture)>, TaskError> {
            paths
                .into_iter()
                .map(|p| load_capture(&p).map(|c| (p.display().to_string(), c)))
                .collect()
        };
        let malicious = load(record.positive_captures().collect())?;
        let benign = load(record.negative_captures().collect())?;
        Task::from_captures(record, &malicious, &benign, cfg)
    }

    /// Like [`Task::from_record`] with the captures already in memory.
    pub fn from_captures(
        record: &VulnRecord,
        malicious: &[(String, Capture)],
        benign: &[(String, Capture)],
        cfg: &TaskConfig,
    ) -> Result<Task, TaskError> {
        let vulns = if record.cve.is_empty() {
            vec![record.name.clone()]
        } else {
            record.cve.clone()
        };
        let header = format!(
            "Vulnerability: {} ({})\nProtocol: {}\nDevices: {}",
            record.name,
            record.cve.join(", "),
            record.proto,
            record.devices.join(", ")
        );
        Task::build(
            &record.name,
            vulns,
            &header,
            &record.vd,
            malicious,
            benign,
            cfg,
            &NgramCosine,
        )
    }

    /// Assembles ADUs, isolates attack traffic, ranks sentence/packet pairs
    /// and derives the rule vocabulary.
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        name: &str,
        vulns: Vec<String>,
        header: &str,
        vd: &str,
        malicious: &[(String, Capture)],
        benign: &[(String, Capture)],
        cfg: &TaskConfig,
        metric: &dyn DistanceMetric,
    ) -> Result<Task, TaskError> {
        if malicious.is_empty() || benign.is_empty() {
            return Err(TaskError::OneSidedCorpus(name.to_string()));
        }
        let seqs = |caps: &[(String, Capture)]| -> Vec<AduSequence> {
            caps.iter()
                .map(|(id, c)| assemble_adus(id.clone(), &c.packets, cfg.adu_gap))
                .collect()
        };
        let corpus = AduCorpus {
            malicious: seqs(malicious),
            benign: seqs(benign),
        };
        let diff = pair_rank(&corpus.malicious, &corpus.benign, cfg.pair_threshold);

        let mut nc = Vec::new();
        for (s, ((_, cap), seq)) in malicious.iter().zip(&corpus.malicious).enumerate() {
            let owner: HashMap<usize, usize> = seq
                .adus
                .iter()
                .enumerate()
                .flat_map(|(a, adu)| adu.packet_indices.iter().map(move |&i| (i, a)))
                .collect();
            for (i, pkt) in cap.packets.iter().enumerate() {
                if let Some(&adu) = owner.get(&i) {
                    nc.push(PacketContext::from_packet(
                        pkt,
                        PacketRef {
                            sequence: s,
                            adu,
                            packet: i,
                        },
                    ));
                }
            }
        }
        let vc = segment_description(vd);
        let pairs = join_label(&vc, &nc, cfg.top_k, metric);
        let vocab = RuleVocabulary::from_pairs(&pairs);

        let mut x = format!("{header}\nDescription: {vd}\nCorrelated evidence:\n");
        for p in &pairs.pairs {
            x.push_str(&format!("- {} || {}\n", p.sentence.text, p.packet.rendering));
        }
        x.push_str("Write a filter rule that blocks the exploit traffic and allows benign traffic.");

        Ok(Task {
            name: name.to_string(),
            vulns,
            trajectory: Trajectory {
                x,
                e: String::new(),
                p: Arc::new(corpus),
            },
            diff,
            pairs,
            vocab,
        })
    }
}

pub fn load_capture(path: &Path) -> Result<Capture, TaskError> {
    let bytes = std::fs::read(path).map_err(|source| TaskError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_capture(&bytes).map_err(|source| TaskError::Capture {
        path: path.to_path_buf(),
        source,
    })
}
