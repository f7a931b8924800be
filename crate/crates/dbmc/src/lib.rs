//! Distributed bounded model checker for a small passified imperative
//! language.
//!
//! The pipeline: a Boogie-like surface program is parsed and lowered into a
//! passified core IR ([`frontend`]), verification conditions are built
//! lazily per procedure instance ([`vcgen`]) and discharged through an
//! external SMT solver ([`solver`]). The sequential engine ([`si`])
//! alternates under- and over-approximate checks, inlining callees on
//! demand. On top of that, [`client`] and [`server`] coordinate many
//! solver-backed workers that carve the search into disjoint partitions
//! ([`splitting`]), while [`sim`] runs the whole cluster deterministically
//! in one process for testing.

pub mod client;
pub mod frontend;
pub mod harness;
pub mod ir;
pub mod net;
pub mod proto;
pub mod server;
pub mod si;
pub mod sim;
pub mod solver;
pub mod splitting;
pub mod vcgen;

/// Final answer for a verification task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Safe,
    Unsafe(si::Trace),
    Inconclusive(String),
}

impl Verdict {
    /// Process exit code: 0 safe, 1 unsafe, 2 inconclusive.
    pub fn exit_code(&self) -> i32 {
        match self {
            Verdict::Safe => 0,
            Verdict::Unsafe(_) => 1,
            Verdict::Inconclusive(_) => 2,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Verdict::Safe => "safe",
            Verdict::Unsafe(_) => "unsafe",
            Verdict::Inconclusive(_) => "inconclusive",
        }
    }

    /// Equality on the verdict kind, ignoring trace/reason payloads.
    pub fn same_kind(&self, other: &Verdict) -> bool {
        self.label() == other.label()
    }
}
