//! Reinforcement learning of network filter rules from enforcement
//! feedback.
//!
//! Captures are cut into application data units (ADUs), candidate rules
//! are enforced by a simulated middlebox, and the ADU-level F1 score of
//! that enforcement drives a group-relative policy optimizer. A validator
//! replays rules, repairs near misses by mutation search, and infers
//! middlebox actions with a protocol decision tree.

pub mod adu;
pub mod dataset;
pub mod grpo;
pub mod pairing;
pub mod pcap;
pub mod reward;
pub mod rules;
pub mod synth;
pub mod task;
pub mod validator;
pub mod vnf;

pub use adu::{assemble_adus, Adu, AduSequence, Endpoint, DEFAULT_ADU_GAP};
pub use dataset::{DatasetError, DistillationTuple, VulnRecord};
pub use grpo::{GrpoError, HyperParams, PolicyParams, RuleVocabulary};
pub use pcap::{parse_capture, Capture, Packet, PcapError, Proto};
pub use reward::{pair_rank, reward, AduCorpus, AduRef, ConfusionCounts, DiffResult, RewardValue};
pub use rules::{parse_rule, FilterRule, MiddleboxAction, RuleError, RuleSet, RuleSetError};
pub use task::{Task, TaskConfig, TaskError};
pub use vnf::VnfInstance;
