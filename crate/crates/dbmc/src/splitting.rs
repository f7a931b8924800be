//! Splitting strategies and the adaptive split-rate policy.
//!
//! The proof-guided strategy picks the unsat-core callsite with the most
//! core members in its subtree, so the split lands where the current
//! safety argument concentrates. The randomized strategy (the baseline it
//! is measured against) picks uniformly among inlined callsites.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ir::{CallTree, DynamicCallsite};

/// Default split interval constant, seconds.
pub const DELTA_C_DEFAULT: f64 = 0.5;
/// Slow-down factor applied when no client is idle.
pub const K_DEFAULT: f64 = 20.0;
/// Interval floor; an empty queue must not produce a zero interval.
pub const DELTA_MIN: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StrategyKind {
    ProofGuided,
    Random,
}

impl std::str::FromStr for StrategyKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "proof-guided" => Ok(StrategyKind::ProofGuided),
            "random" => Ok(StrategyKind::Random),
            other => Err(format!("unknown strategy `{other}`")),
        }
    }
}

/// Splitting-site selection strategy. The random variant is fully
/// reproducible from its seed.
#[derive(Debug, Clone)]
pub enum Strategy {
    ProofGuided,
    Random(Box<ChaCha8Rng>),
}

impl Strategy {
    pub fn new(kind: StrategyKind, seed: u64) -> Strategy {
        match kind {
            StrategyKind::ProofGuided => Strategy::ProofGuided,
            StrategyKind::Random => Strategy::Random(Box::new(ChaCha8Rng::seed_from_u64(seed))),
        }
    }

    pub fn kind(&self) -> StrategyKind {
        match self {
            Strategy::ProofGuided => StrategyKind::ProofGuided,
            Strategy::Random(_) => StrategyKind::Random,
        }
    }
}

/// Number of unsat-core members (inlined or open) in the subtree of `c`.
pub fn subtree_score(uc: &BTreeSet<DynamicCallsite>, c: &DynamicCallsite) -> usize {
    uc.iter().filter(|m| c.is_prefix_of(m)).count()
}

/// Picks a callsite to split on, or none if no candidate exists.
///
/// Proof-guided candidates are the inlined unsat-core callsites; the root
/// is excluded (a trivial split) and so are sites in `already_decided`,
/// since a client must not hold two decisions on one site. Ties go to the
/// canonically least candidate.
pub fn choose_split(
    tree: &CallTree,
    uc: &BTreeSet<DynamicCallsite>,
    already_decided: &BTreeSet<DynamicCallsite>,
    strategy: &mut Strategy,
) -> Option<DynamicCallsite> {
    match strategy {
        Strategy::ProofGuided => {
            let mut best: Option<(usize, &DynamicCallsite)> = None;
            for c in uc {
                if c.is_root() || !tree.contains(c) || already_decided.contains(c) {
                    continue;
                }
                let score = subtree_score(uc, c);
                match best {
                    Some((s, _)) if s >= score => {}
                    _ => best = Some((score, c)),
                }
            }
            best.map(|(_, c)| c.clone())
        }
        Strategy::Random(rng) => {
            let candidates: Vec<&DynamicCallsite> = tree
                .iter()
                .filter(|c| !c.is_root() && !already_decided.contains(*c))
                .collect();
            if candidates.is_empty() {
                return None;
            }
            let i = rng.gen_range(0..candidates.len());
            Some(candidates[i].clone())
        }
    }
}

/// Split interval state of one client. Time is a caller-supplied
/// monotone clock in seconds (real or virtual).
#[derive(Debug, Clone)]
pub struct SplitPolicy {
    pub delta: f64,
    pub delta_c: f64,
    pub k: f64,
    pub last_split_at: f64,
}

impl SplitPolicy {
    pub fn new(delta_c: f64, k: f64) -> SplitPolicy {
        SplitPolicy {
            delta: delta_c,
            delta_c,
            k,
            last_split_at: 0.0,
        }
    }

    /// True iff at least `delta` seconds elapsed since the last split.
    /// The boundary is inclusive.
    pub fn time_to_split(&self, now: f64) -> bool {
        now - self.last_split_at >= self.delta
    }

    /// Called on an actual split.
    pub fn mark_split(&mut self, now: f64) {
        self.last_split_at = now;
    }

    /// Applies a server-computed interval.
    pub fn set_delta(&mut self, delta: f64) {
        self.delta = delta;
    }
}

/// Server-side interval computation for one client: proportional to that
/// client's queue length, inversely proportional to the number of idle
/// clients; with nobody idle, splitting slows by a factor of `k`. The
/// division case is floored at [`DELTA_MIN`].
pub fn compute_delta(queue_len: usize, idle_count: usize, delta_c: f64, k: f64) -> f64 {
    if idle_count == 0 {
        k * delta_c
    } else {
        ((queue_len as f64 / idle_count as f64) * delta_c).max(DELTA_MIN)
    }
}
