//! Online validation of candidate rules: pentest replay, fuzz & trim
//! refinement, and decision-tree action inference.

mod fuzz;
mod ntot;
mod pentest;

pub use fuzz::{fuzz_trim, fuzz_trim_from, FuzzError, FuzzOutcome, FuzzState, BEAM_WIDTH};
pub use ntot::{
    build_tree, infer, infer_with, ntot_bfs, port_content_spec, BoxSpec, DecisionTree, Edge, EdgeSpec, FieldSource,
    FieldSpec, NetSpec, NodeKind, NodeSpec, NtotError, NtotSpec, NtotState, NtotVerdict, Outcome, Predicate,
    PredicateEvaluator, PredicateSpec, SpecError, SpecThoughts, StateEvaluator, ThoughtGenerator, TraceStep, TreeEdit,
    TreeNode,
};
pub use pentest::{feedback, vnf_pentest, PentestRecord, PentestReport, TrafficSide};
