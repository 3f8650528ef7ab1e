//! Decision-tree inference of middlebox actions (network tree-of-thought).
//!
//! A tree is built from two declarative tables: `netsp` names the ADU
//! fields predicates may test, and `boxspec` lists the nodes. Internal
//! nodes hold one boolean predicate and outcome-labelled edges; leaves hold
//! a middlebox action.

use std::collections::{HashMap, HashSet, VecDeque};
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adu::{Adu, AduSequence};
use crate::pcap::Proto;
use crate::rules::MiddleboxAction;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SpecError {
    #[error("spec is not valid JSON: {0}")]
    Json(String),
    #[error("duplicate node id {0:?}")]
    DuplicateNode(String),
    #[error("duplicate field name {0:?}")]
    DuplicateField(String),
    #[error("root {0:?} is not a node")]
    UnknownRoot(String),
    #[error("node {from:?} links to unknown node {to:?}")]
    UnknownNode { from: String, to: String },
    #[error("node {node:?} tests unknown field {field:?}")]
    UnknownField { node: String, field: String },
    #[error("node {node:?}: {message}")]
    BadPredicate { node: String, message: String },
    #[error("node {node:?}: {message}")]
    MalformedNode { node: String, message: String },
    #[error("node {node:?} has no edge for outcome {outcome} and no default edge")]
    UncoveredOutcome { node: String, outcome: Outcome },
    #[error("cycle through node {0:?}")]
    Cycle(String),
    #[error("node {0:?} is unreachable from the root")]
    Unreachable(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NtotError {
    #[error("no leaf reached for ADU {0}")]
    NoLeafReached(usize),
}

/// ADU attribute a netsp field reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldSource {
    Proto,
    SrcPort,
    DstPort,
    SrcIp,
    DstIp,
    Payload,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSpec {
    pub name: String,
    pub source: FieldSource,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSpec {
    pub fields: Vec<FieldSpec>,
}

impl NetSpec {
    /// One field per ADU attribute, named after it.
    pub fn standard() -> Self {
        use FieldSource::*;
        let f = |name: &str, source| FieldSpec {
            name: name.to_string(),
            source,
        };
        NetSpec {
            fields: vec![
                f("proto", Proto),
                f("src_port", SrcPort),
                f("dst_port", DstPort),
                f("src_ip", SrcIp),
                f("dst_ip", DstIp),
                f("payload", Payload),
            ],
        }
    }
}

/// Exactly one of `equals`, `contains` and `in_net` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredicateSpec {
    pub field: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub equals: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub nocase: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_net: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    True,
    False,
    /// Taken only when no labelled edge of the node is satisfied.
    Default,
}

impl std::fmt::Display for Outcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Outcome::True => "true",
            Outcome::False => "false",
            Outcome::Default => "default",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeSpec {
    pub outcome: Outcome,
    pub to: String,
}

/// A node is a leaf when `action` is set, otherwise it needs a predicate
/// and at least one edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicate: Option<PredicateSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub edges: Vec<EdgeSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<MiddleboxAction>,
}

impl NodeSpec {
    pub fn leaf(id: &str, action: MiddleboxAction) -> Self {
        NodeSpec {
            id: id.to_string(),
            predicate: None,
            edges: Vec::new(),
            action: Some(action),
        }
    }

    pub fn test(id: &str, predicate: PredicateSpec, edges: &[(Outcome, &str)]) -> Self {
        NodeSpec {
            id: id.to_string(),
            predicate: Some(predicate),
            edges: edges
                .iter()
                .map(|(o, to)| EdgeSpec {
                    outcome: *o,
                    to: to.to_string(),
                })
                .collect(),
            action: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSpec {
    pub root: String,
    pub nodes: Vec<NodeSpec>,
}

/// Structural edits; apply them to a spec and rebuild the tree.
#[derive(Debug, Clone, PartialEq)]
pub enum TreeEdit {
    AddNode(NodeSpec),
    /// Removes the node and every edge pointing at it.
    RemoveNode(String),
    ReplaceNode(NodeSpec),
    AddEdge {
        from: String,
        edge: EdgeSpec,
    },
    RemoveEdge {
        from: String,
        index: usize,
    },
    SetRoot(String),
}

impl BoxSpec {
    pub fn node_mut(&mut self, id: &str) -> Option<&mut NodeSpec> {
        self.nodes.iter_mut().find(|n| n.id == id)
    }

    /// Applies one edit. Returns false when its target does not exist.
    pub fn apply(&mut self, edit: TreeEdit) -> bool {
        match edit {
            TreeEdit::AddNode(n) => {
                self.nodes.push(n);
                true
            }
            TreeEdit::RemoveNode(id) => {
                let before = self.nodes.len();
                self.nodes.retain(|n| n.id != id);
                for n in &mut self.nodes {
                    n.edges.retain(|e| e.to != id);
                }
                self.nodes.len() != before
            }
            TreeEdit::ReplaceNode(new) => match self.node_mut(&new.id) {
                Some(n) => {
                    *n = new;
                    true
                }
                None => false,
            },
            TreeEdit::AddEdge { from, edge } => match self.node_mut(&from) {
                Some(n) => {
                    n.edges.push(edge);
                    true
                }
                None => false,
            },
            TreeEdit::RemoveEdge { from, index } => match self.node_mut(&from) {
                Some(n) if index < n.edges.len() => {
                    n.edges.remove(index);
                    true
                }
                _ => false,
            },
            TreeEdit::SetRoot(id) => {
                self.root = id;
                true
            }
        }
    }
}

/// The combined spec file accepted by the command line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NtotSpec {
    pub netsp: NetSpec,
    pub boxspec: BoxSpec,
}

impl NtotSpec {
    pub fn from_json(text: &str) -> Result<Self, SpecError> {
        serde_json::from_str(text).map_err(|e| SpecError::Json(e.to_string()))
    }

    pub fn build(&self) -> Result<DecisionTree, SpecError> {
        build_tree(&self.netsp, &self.boxspec)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Predicate {
    ProtoEquals(Proto),
    SrcPortEquals(u16),
    DstPortEquals(u16),
    PayloadContains { pattern: Vec<u8>, nocase: bool },
    SrcInNet { addr: Ipv4Addr, prefix: u8 },
    DstInNet { addr: Ipv4Addr, prefix: u8 },
}

fn in_net(ip: Ipv4Addr, addr: Ipv4Addr, prefix: u8) -> bool {
    let mask = if prefix == 0 { 0 } else { u32::MAX << (32 - prefix) };
    u32::from(ip) & mask == u32::from(addr) & mask
}

impl Predicate {
    pub fn eval(&self, adu: &Adu) -> bool {
        match self {
            Predicate::ProtoEquals(p) => adu.proto == *p,
            Predicate::SrcPortEquals(p) => adu.src.port == *p,
            Predicate::DstPortEquals(p) => adu.dst.port == *p,
            Predicate::PayloadContains { pattern, nocase: false } => {
                memchr::memmem::find(&adu.payload, pattern).is_some()
            }
            Predicate::PayloadContains { pattern, nocase: true } => {
                memchr::memmem::find(&adu.payload.to_ascii_lowercase(), &pattern.to_ascii_lowercase()).is_some()
            }
            Predicate::SrcInNet { addr, prefix } => in_net(adu.src.ip, *addr, *prefix),
            Predicate::DstInNet { addr, prefix } => in_net(adu.dst.ip, *addr, *prefix),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub outcome: Outcome,
    pub to: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeKind {
    Test { predicate: Predicate, edges: Vec<Edge> },
    Leaf(MiddleboxAction),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeNode {
    pub id: String,
    pub kind: NodeKind,
}

/// A validated tree: acyclic, every outcome covered, every node reachable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionTree {
    nodes: Vec<TreeNode>,
    root: usize,
}

impl DecisionTree {
    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn node(&self, i: usize) -> &TreeNode {
        &self.nodes[i]
    }
}

fn compile_predicate(
    node: &str,
    spec: &PredicateSpec,
    fields: &HashMap<&str, FieldSource>,
) -> Result<Predicate, SpecError> {
    let source = *fields.get(spec.field.as_str()).ok_or_else(|| SpecError::UnknownField {
        node: node.to_string(),
        field: spec.field.clone(),
    })?;
    let bad = |message: String| SpecError::BadPredicate {
        node: node.to_string(),
        message,
    };
    let set = [spec.equals.is_some(), spec.contains.is_some(), spec.in_net.is_some()];
    if set.iter().filter(|s| **s).count() != 1 {
        return Err(bad("exactly one of equals, contains, in_net is required".into()));
    }
    if spec.nocase && spec.contains.is_none() {
        return Err(bad("nocase applies only to contains".into()));
    }
    let port = |v: &serde_json::Value| {
        v.as_u64()
            .and_then(|p| u16::try_from(p).ok())
            .ok_or_else(|| bad(format!("{v} is not a port number")))
    };
    let net = |text: &str| -> Result<(Ipv4Addr, u8), SpecError> {
        let (a, p) = text.split_once('/').unwrap_or((text, "32"));
        let addr: Ipv4Addr = a.parse().map_err(|_| bad(format!("{text:?} is not an IPv4 network")))?;
        let prefix: u8 = p
            .parse()
            .ok()
            .filter(|p| *p <= 32)
            .ok_or_else(|| bad(format!("{text:?} has a bad prefix length")))?;
        Ok((addr, prefix))
    };
    match (source, spec) {
        (FieldSource::Proto, PredicateSpec { equals: Some(v), .. }) => {
            let p: Proto = serde_json::from_value(v.clone()).map_err(|_| bad(format!("{v} is not a protocol")))?;
            Ok(Predicate::ProtoEquals(p))
        }
        (FieldSource::SrcPort, PredicateSpec { equals: Some(v), .. }) => Ok(Predicate::SrcPortEquals(port(v)?)),
        (FieldSource::DstPort, PredicateSpec { equals: Some(v), .. }) => Ok(Predicate::DstPortEquals(port(v)?)),
        (
            FieldSource::Payload,
            PredicateSpec {
                contains: Some(c),
                nocase,
                ..
            },
        ) => {
            if c.is_empty() {
                return Err(bad("empty payload pattern".into()));
            }
            Ok(Predicate::PayloadContains {
                pattern: c.as_bytes().to_vec(),
                nocase: *nocase,
            })
        }
        (FieldSource::SrcIp | FieldSource::DstIp, PredicateSpec { in_net, equals, .. }) => {
            let text = match (in_net, equals) {
                (Some(n), _) => n.clone(),
                (None, Some(serde_json::Value::String(s))) if !s.contains('/') => s.clone(),
                (None, Some(v)) => return Err(bad(format!("{v} is not an IPv4 address"))),
                (None, None) => unreachable!("checked above"),
            };
            let (addr, prefix) = net(&text)?;
            Ok(if source == FieldSource::SrcIp {
                Predicate::SrcInNet { addr, prefix }
            } else {
                Predicate::DstInNet { addr, prefix }
            })
        }
        (s, _) => Err(bad(format!("operator not supported on a {s:?} field"))),
    }
}

/// Validates the specs and compiles them into a [`DecisionTree`].
pub fn build_tree(netsp: &NetSpec, boxspec: &BoxSpec) -> Result<DecisionTree, SpecError> {
    let mut fields = HashMap::new();
    for f in &netsp.fields {
        if fields.insert(f.name.as_str(), f.source).is_some() {
            return Err(SpecError::DuplicateField(f.name.clone()));
        }
    }
    let mut index = HashMap::new();
    for (i, n) in boxspec.nodes.iter().enumerate() {
        if index.insert(n.id.as_str(), i).is_some() {
            return Err(SpecError::DuplicateNode(n.id.clone()));
        }
    }
    let root = *index
        .get(boxspec.root.as_str())
        .ok_or_else(|| SpecError::UnknownRoot(boxspec.root.clone()))?;

    let mut nodes = Vec::with_capacity(boxspec.nodes.len());
    for n in &boxspec.nodes {
        let malformed = |message: &str| SpecError::MalformedNode {
            node: n.id.clone(),
            message: message.to_string(),
        };
        let kind = match (&n.action, &n.predicate) {
            (Some(_), Some(_)) => return Err(malformed("a node has either an action or a predicate")),
            (Some(a), None) if n.edges.is_empty() => NodeKind::Leaf(*a),
            (Some(_), None) => return Err(malformed("a leaf has no edges")),
            (None, None) => return Err(malformed("needs an action or a predicate")),
            (None, Some(p)) => {
                let predicate = compile_predicate(&n.id, p, &fields)?;
                let mut edges = Vec::with_capacity(n.edges.len());
                for e in &n.edges {
                    let to = *index.get(e.to.as_str()).ok_or_else(|| SpecError::UnknownNode {
                        from: n.id.clone(),
                        to: e.to.clone(),
                    })?;
                    edges.push(Edge { outcome: e.outcome, to });
                }
                let has = |o| edges.iter().any(|e| e.outcome == o);
                if !has(Outcome::Default) {
                    for o in [Outcome::True, Outcome::False] {
                        if !has(o) {
                            return Err(SpecError::UncoveredOutcome {
                                node: n.id.clone(),
                                outcome: o,
                            });
                        }
                    }
                }
                NodeKind::Test { predicate, edges }
            }
        };
        nodes.push(TreeNode { id: n.id.clone(), kind });
    }

    // Depth-first colouring finds cycles and reachability together.
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Open,
        Done,
    }
    let mut mark = vec![Mark::New; nodes.len()];
    let mut stack = vec![(root, 0usize)];
    mark[root] = Mark::Open;
    while let Some(&mut (n, ref mut next)) = stack.last_mut() {
        let edges: &[Edge] = match &nodes[n].kind {
            NodeKind::Test { edges, .. } => edges,
            NodeKind::Leaf(_) => &[],
        };
        if let Some(e) = edges.get(*next) {
            *next += 1;
            match mark[e.to] {
                Mark::Open => return Err(SpecError::Cycle(nodes[e.to].id.clone())),
                Mark::New => {
                    mark[e.to] = Mark::Open;
                    stack.push((e.to, 0));
                }
                Mark::Done => {}
            }
        } else {
            mark[n] = Mark::Done;
            stack.pop();
        }
    }
    if let Some(i) = mark.iter().position(|m| *m == Mark::New) {
        return Err(SpecError::Unreachable(nodes[i].id.clone()));
    }
    Ok(DecisionTree { nodes, root })
}

/// Where a descent currently stands.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NtotState {
    pub node: usize,
    pub trace: Vec<TraceStep>,
}

/// One internal node visited and the outcome taken there.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceStep {
    pub node: String,
    pub thought: Outcome,
}

/// Proposes the candidate edges (thoughts) at the current node.
pub trait ThoughtGenerator {
    fn propose(&self, tree: &DecisionTree, state: &NtotState) -> Vec<usize>;
}

/// Selects, among proposed edges, those the ADU satisfies, in priority order.
pub trait StateEvaluator {
    fn select(&self, adu: &Adu, tree: &DecisionTree, state: &NtotState, proposed: &[usize]) -> Vec<usize>;
}

/// Proposes every outgoing edge in declaration order.
#[derive(Debug, Clone, Copy, Default)]
pub struct SpecThoughts;

impl ThoughtGenerator for SpecThoughts {
    fn propose(&self, tree: &DecisionTree, state: &NtotState) -> Vec<usize> {
        match &tree.node(state.node).kind {
            NodeKind::Test { edges, .. } => (0..edges.len()).collect(),
            NodeKind::Leaf(_) => Vec::new(),
        }
    }
}

/// Evaluates the node predicate; default edges count only when no
/// labelled edge matches.
#[derive(Debug, Clone, Copy, Default)]
pub struct PredicateEvaluator;

impl StateEvaluator for PredicateEvaluator {
    fn select(&self, adu: &Adu, tree: &DecisionTree, state: &NtotState, proposed: &[usize]) -> Vec<usize> {
        let NodeKind::Test { predicate, edges } = &tree.node(state.node).kind else {
            return Vec::new();
        };
        let outcome = if predicate.eval(adu) {
            Outcome::True
        } else {
            Outcome::False
        };
        let labelled: Vec<usize> = proposed
            .iter()
            .copied()
            .filter(|&e| edges[e].outcome == outcome)
            .collect();
        if !labelled.is_empty() {
            return labelled;
        }
        proposed
            .iter()
            .copied()
            .filter(|&e| edges[e].outcome == Outcome::Default)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NtotVerdict {
    /// Index of the ADU in its sequence.
    pub adu: usize,
    pub action: MiddleboxAction,
    pub trace: Vec<TraceStep>,
}

/// Descends from the root breadth-first over satisfied edges and stops at
/// the first leaf dequeued, so the shallowest leaf wins and ties go to the
/// earliest-declared branch.
pub fn infer_with(
    adu: &Adu,
    tree: &DecisionTree,
    g: &dyn ThoughtGenerator,
    v: &dyn StateEvaluator,
) -> Option<(MiddleboxAction, Vec<TraceStep>)> {
    let mut queue = VecDeque::from([NtotState {
        node: tree.root(),
        trace: Vec::new(),
    }]);
    let mut seen = HashSet::from([tree.root()]);
    while let Some(state) = queue.pop_front() {
        let (predicate_edges, action) = match &tree.node(state.node).kind {
            NodeKind::Leaf(a) => (None, Some(*a)),
            NodeKind::Test { edges, .. } => (Some(edges), None),
        };
        if let Some(a) = action {
            return Some((a, state.trace));
        }
        let edges = predicate_edges.expect("test node");
        let proposed = g.propose(tree, &state);
        for e in v.select(adu, tree, &state, &proposed) {
            let edge = edges[e];
            if !seen.insert(edge.to) {
                continue;
            }
            let mut trace = state.trace.clone();
            trace.push(TraceStep {
                node: tree.node(state.node).id.clone(),
                thought: edge.outcome,
            });
            queue.push_back(NtotState { node: edge.to, trace });
        }
    }
    None
}

pub fn infer(adu: &Adu, tree: &DecisionTree) -> Option<(MiddleboxAction, Vec<TraceStep>)> {
    infer_with(adu, tree, &SpecThoughts, &PredicateEvaluator)
}

/// Infers an action for every ADU of `adus`.
pub fn ntot_bfs(adus: &AduSequence, tree: &DecisionTree) -> Result<Vec<NtotVerdict>, NtotError> {
    adus.adus
        .iter()
        .enumerate()
        .map(|(i, adu)| {
            let (action, trace) = infer(adu, tree).ok_or(NtotError::NoLeafReached(i))?;
            Ok(NtotVerdict { adu: i, action, trace })
        })
        .collect()
}

/// The tree used by `validate --ntot` when no spec is given: BLOCK
/// traffic to `port` whose payload contains `pattern`, allow the rest.
pub fn port_content_spec(port: u16, pattern: &str) -> NtotSpec {
    NtotSpec {
        netsp: NetSpec::standard(),
        boxspec: BoxSpec {
            root: "port".into(),
            nodes: vec![
                NodeSpec::test(
                    "port",
                    PredicateSpec {
                        field: "dst_port".into(),
                        equals: Some(port.into()),
                        contains: None,
                        nocase: false,
                        in_net: None,
                    },
                    &[(Outcome::True, "content"), (Outcome::Default, "allow")],
                ),
                NodeSpec::test(
                    "content",
                    PredicateSpec {
                        field: "payload".into(),
                        equals: None,
                        contains: Some(pattern.into()),
                        nocase: false,
                        in_net: None,
                    },
                    &[(Outcome::True, "block"), (Outcome::False, "allow")],
                ),
                NodeSpec::leaf("block", MiddleboxAction::Block),
                NodeSpec::leaf("allow", MiddleboxAction::Allow),
            ],
        },
    }
}
