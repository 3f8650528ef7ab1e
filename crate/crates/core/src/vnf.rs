//! A rule set compiled into a simulated network function.

use memchr::memmem;

use crate::adu::Adu;
use crate::rules::{FilterRule, MiddleboxAction, RuleSet};

#[derive(Debug, Clone)]
struct CompiledContent {
    /// Lower-cased when `nocase` is set.
    needle: Vec<u8>,
    nocase: bool,
}

#[derive(Debug, Clone)]
struct CompiledRule {
    rule: FilterRule,
    contents: Vec<CompiledContent>,
}

impl CompiledRule {
    fn matches(&self, adu: &Adu, folded: &mut Option<Vec<u8>>) -> bool {
        if !self.rule.header_matches(adu) {
            return false;
        }
        self.contents.iter().all(|c| {
            if c.nocase {
                let hay = folded.get_or_insert_with(|| adu.payload.to_ascii_lowercase());
                memmem::find(hay, &c.needle).is_some()
            } else {
                memmem::find(&adu.payload, &c.needle).is_some()
            }
        })
    }
}

/// One enforcement instance per group member.
#[derive(Debug, Clone)]
pub struct VnfInstance {
    id: usize,
    rules: Vec<CompiledRule>,
    counters: Vec<u64>,
}

impl VnfInstance {
    pub fn instantiate(rules: &RuleSet, member: usize) -> Self {
        let compiled: Vec<CompiledRule> = rules
            .rules()
            .iter()
            .map(|r| CompiledRule {
                rule: r.clone(),
                contents: r
                    .options
                    .iter()
                    .map(|c| CompiledContent {
                        needle: if c.nocase {
                            c.pattern.to_ascii_lowercase()
                        } else {
                            c.pattern.clone()
                        },
                        nocase: c.nocase,
                    })
                    .collect(),
            })
            .collect();
        VnfInstance {
            id: member,
            counters: vec![0; compiled.len()],
            rules: compiled,
        }
    }

    pub fn id(&self) -> usize {
        self.id
    }

    /// Per-rule match counts, in rule order.
    pub fn counters(&self) -> &[u64] {
        &self.counters
    }

    pub fn rules(&self) -> impl Iterator<Item = &FilterRule> {
        self.rules.iter().map(|c| &c.rule)
    }

    /// Highest-precedence action among matching rules; `Allow` when none
    /// match. Counters of all matching rules are incremented.
    pub fn evaluate(&mut self, adu: &Adu) -> MiddleboxAction {
        let mut folded = None;
        let mut action = MiddleboxAction::Allow;
        for (rule, counter) in self.rules.iter().zip(self.counters.iter_mut()) {
            if rule.matches(adu, &mut folded) {
                *counter += 1;
                action = action.max(rule.rule.action);
            }
        }
        action
    }

    /// Same decision as [`evaluate`](Self::evaluate) without touching counters.
    pub fn decide(&self, adu: &Adu) -> MiddleboxAction {
        let mut folded = None;
        self.rules
            .iter()
            .filter(|r| r.matches(adu, &mut folded))
            .map(|r| r.rule.action)
            .max()
            .unwrap_or(MiddleboxAction::Allow)
    }
}
