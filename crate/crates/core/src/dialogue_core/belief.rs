use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

/// Accumulated slot constraints: domain → (slot → value).
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BeliefState {
    pub domains: BTreeMap<String, BTreeMap<String, String>>,
}

/// Result of a tolerant parse: the recovered state plus one warning per
/// dropped token.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParsedBelief {
    pub belief: BeliefState,
    pub warnings: usize,
}

impl BeliefState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }

    /// Inserts a domain without constraints.
    pub fn touch(&mut self, domain: &str) {
        self.domains.entry(domain.to_string()).or_default();
    }

    pub fn set(&mut self, domain: &str, slot: &str, value: &str) {
        self.domains
            .entry(domain.to_string())
            .or_default()
            .insert(slot.to_string(), value.to_string());
    }

    /// The domain whose constraints drive database lookup (the first one).
    pub fn active_domain(&self) -> Option<(&str, &BTreeMap<String, String>)> {
        self.domains.iter().next().map(|(d, s)| (d.as_str(), s))
    }

    /// `[domain] slot1=value1 ; slot2=value2 | [domain2] ...`
    pub fn serialize(&self) -> String {
        self.tokens().join(" ")
    }

    pub fn tokens(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, (domain, slots)) in self.domains.iter().enumerate() {
            if i > 0 {
                out.push("|".to_string());
            }
            out.push(alloc::format!("[{domain}]"));
            for (j, (slot, value)) in slots.iter().enumerate() {
                if j > 0 {
                    out.push(";".to_string());
                }
                out.push(alloc::format!("{slot}={value}"));
            }
        }
        out
    }

    /// Drops domains not in `known`; returns how many were dropped.
    pub fn restrict_to<S: AsRef<str>>(&mut self, known: &[S]) -> usize {
        let before = self.domains.len();
        self.domains
            .retain(|d, _| known.iter().any(|k| k.as_ref() == d.as_str()));
        before - self.domains.len()
    }

    pub fn parse(text: &str) -> ParsedBelief {
        let toks: Vec<&str> = text.split_whitespace().collect();
        Self::parse_tokens(&toks)
    }

    /// Tolerant parse: tokens that fit nowhere are dropped and counted.
    pub fn parse_tokens<S: AsRef<str>>(tokens: &[S]) -> ParsedBelief {
        let mut belief = BeliefState::new();
        let mut warnings = 0;
        let mut current: Option<String> = None;
        for tok in tokens {
            let tok = tok.as_ref();
            if let Some(domain) = domain_token(tok) {
                belief.touch(domain);
                current = Some(domain.to_string());
            } else if tok == ";" {
                if current.is_none() {
                    warnings += 1;
                }
            } else if tok == "|" {
                current = None;
            } else if let (Some(d), Some((slot, value))) = (&current, slot_value(tok)) {
                belief.set(d, slot, value);
            } else {
                warnings += 1;
            }
        }
        ParsedBelief { belief, warnings }
    }
}

fn domain_token(tok: &str) -> Option<&str> {
    let inner = tok.strip_prefix('[')?.strip_suffix(']')?;
    let ok = !inner.is_empty()
        && !inner.starts_with("db_")
        && inner.chars().all(|c| c.is_ascii_lowercase() || c == '_');
    ok.then_some(inner)
}

fn slot_value(tok: &str) -> Option<(&str, &str)> {
    let (s, v) = tok.split_once('=')?;
    (!s.is_empty() && !v.is_empty() && !v.contains('=')).then_some((s, v))
}
