//! Wire protocol: newline-delimited JSON messages between clients and the
//! coordinator.
//!
//! A callsite travels as a list of `[label, callee]` frames with the
//! `main` sentinel omitted (the root is the empty list). Partitions carry
//! the full call tree plus the decision set.

use serde::{Deserialize, Serialize};

use crate::ir::{
    CallTree, Decision, DecisionKind, DynamicCallsite, Partition, StaticCallsite,
};
use crate::si::{Trace, TraceStep};
use crate::Verdict;

pub type ClientId = u64;

/// Site on the wire: frames above the implied main sentinel.
pub type WireSite = Vec<(String, String)>;

pub fn site_to_wire(c: &DynamicCallsite) -> WireSite {
    c.frames()[1..]
        .iter()
        .map(|f| (f.label.clone(), f.callee.clone()))
        .collect()
}

pub fn site_from_wire(w: &WireSite) -> DynamicCallsite {
    let mut c = DynamicCallsite::root();
    for (label, callee) in w {
        c = c.push(StaticCallsite::new(label.clone(), callee.clone()));
    }
    c
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct WireDecision {
    pub kind: String,
    pub site: WireSite,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct WirePartition {
    pub tree: Vec<WireSite>,
    pub decisions: Vec<WireDecision>,
}

impl From<&Partition> for WirePartition {
    fn from(p: &Partition) -> Self {
        WirePartition {
            tree: p.tree.iter().map(site_to_wire).collect(),
            decisions: p
                .decisions
                .iter()
                .map(|d| WireDecision {
                    kind: match d.kind {
                        DecisionKind::Avoid => "avoid".into(),
                        DecisionKind::MustReach => "mustreach".into(),
                    },
                    site: site_to_wire(&d.site),
                })
                .collect(),
        }
    }
}

impl WirePartition {
    pub fn to_partition(&self) -> Result<Partition, String> {
        let tree = CallTree::from_sites(self.tree.iter().map(site_from_wire));
        let mut decisions = std::collections::BTreeSet::new();
        for d in &self.decisions {
            let kind = match d.kind.as_str() {
                "avoid" => DecisionKind::Avoid,
                "mustreach" => DecisionKind::MustReach,
                other => return Err(format!("unknown decision kind `{other}`")),
            };
            decisions.insert(Decision {
                kind,
                site: site_from_wire(&d.site),
            });
        }
        let p = Partition { tree, decisions };
        if !p.is_well_formed() {
            return Err("partition decisions must sit on call-tree members".into());
        }
        Ok(p)
    }
}

/// Trace step on the wire: `[site, label]`.
pub type WireTraceStep = (WireSite, String);

pub fn trace_to_wire(t: &Trace) -> Vec<WireTraceStep> {
    t.steps
        .iter()
        .map(|s| (site_to_wire(&s.site), s.block.clone()))
        .collect()
}

pub fn trace_from_wire(w: &[WireTraceStep]) -> Trace {
    Trace {
        steps: w
            .iter()
            .map(|(site, block)| TraceStep {
                site: site_from_wire(site),
                block: block.clone(),
            })
            .collect(),
    }
}

/// Per-partition statistics piggybacked on an outcome report.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct WireStats {
    pub inlined: Vec<WireSite>,
    pub splits: u64,
    pub steps: u64,
}

/// Messages sent by clients.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "t")]
pub enum ClientMsg {
    #[serde(rename = "HELLO")]
    Hello { id: ClientId },
    #[serde(rename = "GET_PARTITION")]
    GetPartition { id: ClientId },
    #[serde(rename = "SEND_PARTITION")]
    SendPartition {
        id: ClientId,
        partition: WirePartition,
    },
    #[serde(rename = "POP")]
    Pop { id: ClientId },
    #[serde(rename = "OUTCOME")]
    Outcome {
        id: ClientId,
        verdict: String,
        trace: Vec<WireTraceStep>,
        #[serde(skip_serializing_if = "Option::is_none")]
        reason: Option<String>,
        #[serde(skip_serializing_if = "Option::is_none")]
        stats: Option<WireStats>,
    },
}

/// Messages sent by the server.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "t")]
pub enum ServerMsg {
    #[serde(rename = "GRANT")]
    Grant { partition: WirePartition },
    #[serde(rename = "ACK")]
    Ack { delta: f64 },
    #[serde(rename = "POP_REPLY")]
    PopReply { yes: bool },
    #[serde(rename = "KILL")]
    Kill,
}

pub fn outcome_msg(
    id: ClientId,
    verdict: &Verdict,
    stats: Option<WireStats>,
) -> ClientMsg {
    let (v, trace, reason) = match verdict {
        Verdict::Safe => ("safe".to_string(), Vec::new(), None),
        Verdict::Unsafe(t) => ("unsafe".to_string(), trace_to_wire(t), None),
        Verdict::Inconclusive(r) => ("inconclusive".to_string(), Vec::new(), Some(r.clone())),
    };
    ClientMsg::Outcome {
        id,
        verdict: v,
        trace,
        reason,
        stats,
    }
}
