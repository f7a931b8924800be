//! Core intermediate representation: passified multi-procedure programs,
//! callsites, call trees and search partitions.
//!
//! A core program has no assignments. Each procedure is a set of labelled
//! basic blocks holding `assume` and `call` statements, terminated by a
//! `goto` over successor labels or a `return`. Both the intra-procedural
//! CFG and the call graph are acyclic, so the program is bounded.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use indexmap::IndexMap;
use thiserror::Error;

pub type Label = String;

/// Sorts of the expression language.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Sort {
    Int,
    Bool,
}

impl fmt::Display for Sort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Sort::Int => write!(f, "int"),
            Sort::Bool => write!(f, "bool"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TypedVar {
    pub name: String,
    pub sort: Sort,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UnOp {
    Not,
    Neg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    And,
    Or,
}

impl BinOp {
    pub fn result_sort(self) -> Sort {
        match self {
            BinOp::Add | BinOp::Sub | BinOp::Mul => Sort::Int,
            _ => Sort::Bool,
        }
    }
}

/// Expression over program variables; sorts are {int, bool}.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Expr {
    Var(String),
    Int(i64),
    Bool(bool),
    Unary(UnOp, Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    Ite(Box<Expr>, Box<Expr>, Box<Expr>),
}

impl Expr {
    #[allow(clippy::should_implement_trait)] // constructor, not an operator impl
    pub fn not(e: Expr) -> Expr {
        Expr::Unary(UnOp::Not, Box::new(e))
    }

    pub fn bin(op: BinOp, a: Expr, b: Expr) -> Expr {
        Expr::Binary(op, Box::new(a), Box::new(b))
    }

    /// All variable names referenced by this expression.
    pub fn vars(&self, out: &mut BTreeSet<String>) {
        match self {
            Expr::Var(v) => {
                out.insert(v.clone());
            }
            Expr::Int(_) | Expr::Bool(_) => {}
            Expr::Unary(_, a) => a.vars(out),
            Expr::Binary(_, a, b) => {
                a.vars(out);
                b.vars(out);
            }
            Expr::Ite(c, a, b) => {
                c.vars(out);
                a.vars(out);
                b.vars(out);
            }
        }
    }
}

/// Statement of a core block. At most one `Call` per block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Stmt {
    Assume(Expr),
    Call { callee: String, actuals: Vec<Expr> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Terminator {
    Goto(Vec<Label>),
    Return,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub label: Label,
    pub stmts: Vec<Stmt>,
    pub term: Terminator,
}

impl Block {
    /// The single call of this block, if any.
    pub fn call(&self) -> Option<(&String, &Vec<Expr>)> {
        self.stmts.iter().find_map(|s| match s {
            Stmt::Call { callee, actuals } => Some((callee, actuals)),
            Stmt::Assume(_) => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Procedure {
    pub name: String,
    pub formals: Vec<TypedVar>,
    pub locals: Vec<TypedVar>,
    pub blocks: IndexMap<Label, Block>,
    pub entry: Label,
}

impl Procedure {
    pub fn sort_of(&self, var: &str) -> Option<Sort> {
        self.formals
            .iter()
            .chain(self.locals.iter())
            .find(|v| v.name == var)
            .map(|v| v.sort)
    }

    /// Predecessor map over block labels.
    pub fn predecessors(&self) -> HashMap<&Label, Vec<&Label>> {
        let mut preds: HashMap<&Label, Vec<&Label>> = HashMap::new();
        for b in self.blocks.values() {
            if let Terminator::Goto(succs) = &b.term {
                for s in succs {
                    preds.entry(s).or_default().push(&b.label);
                }
            }
        }
        preds
    }

    /// Block labels in a topological order of the CFG; `None` if cyclic.
    pub fn topo_order(&self) -> Option<Vec<&Label>> {
        let mut indeg: HashMap<&Label, usize> = self.blocks.keys().map(|l| (l, 0)).collect();
        for b in self.blocks.values() {
            if let Terminator::Goto(succs) = &b.term {
                for s in succs {
                    if let Some(d) = indeg.get_mut(s) {
                        *d += 1;
                    }
                }
            }
        }
        let mut queue: Vec<&Label> = self
            .blocks
            .keys()
            .filter(|l| indeg[*l] == 0)
            .collect();
        let mut order = Vec::with_capacity(self.blocks.len());
        while let Some(l) = queue.pop() {
            order.push(l);
            if let Terminator::Goto(succs) = &self.blocks[l].term {
                for s in succs {
                    let d = indeg.get_mut(s).unwrap();
                    *d -= 1;
                    if *d == 0 {
                        queue.push(self.blocks.get_key_value(s).unwrap().0);
                    }
                }
            }
        }
        (order.len() == self.blocks.len()).then_some(order)
    }
}

/// A whole passified program. `main` is the designated entry procedure.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoreProgram {
    pub procedures: IndexMap<String, Procedure>,
}

pub const MAIN: &str = "main";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IrError {
    #[error("procedure `{0}` is missing")]
    MissingProcedure(String),
    #[error("procedure `{proc}`: goto target `{label}` does not exist")]
    BadGotoTarget { proc: String, label: Label },
    #[error("procedure `{proc}`: entry label `{label}` does not exist")]
    BadEntry { proc: String, label: Label },
    #[error("procedure `{proc}`: block `{label}` has more than one call")]
    MultipleCalls { proc: String, label: Label },
    #[error("procedure `{proc}`: control-flow graph is cyclic")]
    CyclicCfg { proc: String },
    #[error("call graph is cyclic (involving `{0}`)")]
    CyclicCallGraph(String),
    #[error("procedure `{proc}`: call to undeclared procedure `{callee}`")]
    UndeclaredCallee { proc: String, callee: String },
    #[error("procedure `{proc}`: call to `{callee}` has {got} actuals, expected {want}")]
    ArityMismatch {
        proc: String,
        callee: String,
        got: usize,
        want: usize,
    },
    #[error("`main` must not take formals")]
    MainHasFormals,
}

impl CoreProgram {
    pub fn main(&self) -> &Procedure {
        &self.procedures[MAIN]
    }

    pub fn get(&self, name: &str) -> Option<&Procedure> {
        self.procedures.get(name)
    }

    /// Checks every structural invariant of the core IR.
    pub fn validate(&self) -> Result<(), IrError> {
        let main = self
            .procedures
            .get(MAIN)
            .ok_or_else(|| IrError::MissingProcedure(MAIN.into()))?;
        if !main.formals.is_empty() {
            return Err(IrError::MainHasFormals);
        }
        for p in self.procedures.values() {
            if !p.blocks.contains_key(&p.entry) {
                return Err(IrError::BadEntry {
                    proc: p.name.clone(),
                    label: p.entry.clone(),
                });
            }
            for b in p.blocks.values() {
                let calls = b
                    .stmts
                    .iter()
                    .filter(|s| matches!(s, Stmt::Call { .. }))
                    .count();
                if calls > 1 {
                    return Err(IrError::MultipleCalls {
                        proc: p.name.clone(),
                        label: b.label.clone(),
                    });
                }
                if let Some((callee, actuals)) = b.call() {
                    let q = self.procedures.get(callee).ok_or_else(|| {
                        IrError::UndeclaredCallee {
                            proc: p.name.clone(),
                            callee: callee.clone(),
                        }
                    })?;
                    if q.formals.len() != actuals.len() {
                        return Err(IrError::ArityMismatch {
                            proc: p.name.clone(),
                            callee: callee.clone(),
                            got: actuals.len(),
                            want: q.formals.len(),
                        });
                    }
                }
                if let Terminator::Goto(succs) = &b.term {
                    for s in succs {
                        if !p.blocks.contains_key(s) {
                            return Err(IrError::BadGotoTarget {
                                proc: p.name.clone(),
                                label: s.clone(),
                            });
                        }
                    }
                }
            }
            if p.topo_order().is_none() {
                return Err(IrError::CyclicCfg {
                    proc: p.name.clone(),
                });
            }
        }
        self.check_call_graph_acyclic()?;
        Ok(())
    }

    fn check_call_graph_acyclic(&self) -> Result<(), IrError> {
        #[derive(Clone, Copy, PartialEq)]
        enum Mark {
            Open,
            Done,
        }
        let mut marks: HashMap<&str, Mark> = HashMap::new();
        let mut stack: Vec<(&str, usize)> = Vec::new();
        for start in self.procedures.keys() {
            if marks.contains_key(start.as_str()) {
                continue;
            }
            stack.push((start, 0));
            marks.insert(start, Mark::Open);
            while let Some((name, idx)) = stack.pop() {
                let callees: Vec<&str> = self.procedures[name]
                    .blocks
                    .values()
                    .filter_map(|b| b.call().map(|(c, _)| c.as_str()))
                    .collect();
                if idx < callees.len() {
                    stack.push((name, idx + 1));
                    let next = callees[idx];
                    match marks.get(next) {
                        Some(Mark::Open) => {
                            return Err(IrError::CyclicCallGraph(next.into()));
                        }
                        Some(Mark::Done) => {}
                        None => {
                            if self.procedures.contains_key(next) {
                                marks.insert(next, Mark::Open);
                                stack.push((next, 0));
                            }
                        }
                    }
                } else {
                    marks.insert(name, Mark::Done);
                }
            }
        }
        Ok(())
    }
}

/// The `(label, callee)` pair identifying the single call in a block.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StaticCallsite {
    pub label: Label,
    pub callee: String,
}

impl StaticCallsite {
    pub fn new(label: impl Into<Label>, callee: impl Into<String>) -> Self {
        StaticCallsite {
            label: label.into(),
            callee: callee.into(),
        }
    }
}

impl fmt::Display for StaticCallsite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.label, self.callee)
    }
}

/// All static callsites of a procedure, in block order.
pub fn callsites_of(p: &Procedure) -> Vec<StaticCallsite> {
    p.blocks
        .values()
        .filter_map(|b| {
            b.call()
                .map(|(callee, _)| StaticCallsite::new(b.label.clone(), callee.clone()))
        })
        .collect()
}

/// Reserved frame that keeps `main` at the bottom of every stack.
pub fn main_sentinel() -> StaticCallsite {
    StaticCallsite::new("<entry>", MAIN)
}

/// A runtime stack of static callsites identifying one inlining instance.
///
/// `frames[0]` is always the `main` sentinel. Ordering is lexicographic
/// over frames, which is the canonical tie-break order.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DynamicCallsite {
    frames: Vec<StaticCallsite>,
}

impl DynamicCallsite {
    /// The `[main]` stack.
    pub fn root() -> Self {
        DynamicCallsite {
            frames: vec![main_sentinel()],
        }
    }

    pub fn from_frames(frames: Vec<StaticCallsite>) -> Self {
        debug_assert!(!frames.is_empty() && frames[0] == main_sentinel());
        DynamicCallsite { frames }
    }

    /// Child stack with `site` pushed on top.
    pub fn push(&self, site: StaticCallsite) -> Self {
        let mut frames = self.frames.clone();
        frames.push(site);
        DynamicCallsite { frames }
    }

    pub fn is_root(&self) -> bool {
        self.frames.len() == 1
    }

    pub fn parent(&self) -> Option<DynamicCallsite> {
        if self.is_root() {
            None
        } else {
            Some(DynamicCallsite {
                frames: self.frames[..self.frames.len() - 1].to_vec(),
            })
        }
    }

    /// Topmost frame; `None` for the root.
    pub fn top(&self) -> Option<&StaticCallsite> {
        if self.is_root() {
            None
        } else {
            self.frames.last()
        }
    }

    pub fn frames(&self) -> &[StaticCallsite] {
        &self.frames
    }

    pub fn depth(&self) -> usize {
        self.frames.len()
    }

    /// Name of the procedure this instance executes.
    pub fn proc_name(&self) -> &str {
        match self.top() {
            None => MAIN,
            Some(s) => &s.callee,
        }
    }

    /// Label of the calling block in the parent instance.
    pub fn calling_label(&self) -> Option<&Label> {
        self.top().map(|s| &s.label)
    }

    pub fn is_prefix_of(&self, other: &DynamicCallsite) -> bool {
        other.frames.len() >= self.frames.len()
            && other.frames[..self.frames.len()] == self.frames[..]
    }

    /// Canonical path string, used for assertion naming.
    pub fn path_string(&self) -> String {
        let mut s = String::new();
        for (i, f) in self.frames.iter().enumerate() {
            if i > 0 {
                s.push('|');
            }
            s.push_str(&f.label);
            s.push(',');
            s.push_str(&f.callee);
        }
        s
    }
}

impl fmt::Display for DynamicCallsite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[main")?;
        for frame in &self.frames[1..] {
            write!(f, ",{}", frame)?;
        }
        write!(f, "]")
    }
}

/// Prefix-closed set of dynamic callsites; always contains the root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CallTree {
    nodes: BTreeSet<DynamicCallsite>,
}

impl Default for CallTree {
    fn default() -> Self {
        Self::new()
    }
}

impl CallTree {
    pub fn new() -> Self {
        let mut nodes = BTreeSet::new();
        nodes.insert(DynamicCallsite::root());
        CallTree { nodes }
    }

    pub fn from_sites<I: IntoIterator<Item = DynamicCallsite>>(sites: I) -> Self {
        let mut t = CallTree::new();
        for s in sites {
            t.nodes.insert(s);
        }
        t
    }

    pub fn insert(&mut self, site: DynamicCallsite) {
        debug_assert!(
            site.parent().is_none_or(|p| self.nodes.contains(&p)),
            "call tree insertion must keep the set prefix-closed"
        );
        self.nodes.insert(site);
    }

    pub fn contains(&self, site: &DynamicCallsite) -> bool {
        self.nodes.contains(site)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false // always holds the root
    }

    pub fn iter(&self) -> impl Iterator<Item = &DynamicCallsite> {
        self.nodes.iter()
    }

    pub fn is_prefix_closed(&self) -> bool {
        self.nodes
            .iter()
            .all(|c| c.parent().is_none_or(|p| self.nodes.contains(&p)))
    }

    /// Sites ordered parents-first (by stack depth, then canonically).
    pub fn prefix_order(&self) -> Vec<DynamicCallsite> {
        let mut v: Vec<_> = self.nodes.iter().cloned().collect();
        v.sort_by(|a, b| a.depth().cmp(&b.depth()).then_with(|| a.cmp(b)));
        v
    }

    /// Open frontier: children of tree members that are not members.
    pub fn frontier(&self, program: &CoreProgram) -> BTreeSet<DynamicCallsite> {
        let mut open = BTreeSet::new();
        for c in &self.nodes {
            let Some(p) = program.get(c.proc_name()) else {
                continue;
            };
            for s in callsites_of(p) {
                let child = c.push(s);
                if !self.nodes.contains(&child) {
                    open.insert(child);
                }
            }
        }
        open
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DecisionKind {
    Avoid,
    MustReach,
}

/// A splitting decision: block a callsite or force execution through it.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Decision {
    pub kind: DecisionKind,
    pub site: DynamicCallsite,
}

impl Decision {
    pub fn avoid(site: DynamicCallsite) -> Self {
        Decision {
            kind: DecisionKind::Avoid,
            site,
        }
    }

    pub fn must_reach(site: DynamicCallsite) -> Self {
        Decision {
            kind: DecisionKind::MustReach,
            site,
        }
    }
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            DecisionKind::Avoid => write!(f, "avoid{}", self.site),
            DecisionKind::MustReach => write!(f, "mustreach{}", self.site),
        }
    }
}

/// A disjoint slice of the search: a call tree plus a set of decisions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub tree: CallTree,
    pub decisions: BTreeSet<Decision>,
}

impl Default for Partition {
    fn default() -> Self {
        Self::root()
    }
}

impl Partition {
    /// The bootstrap partition: the whole program, no decisions.
    pub fn root() -> Self {
        Partition {
            tree: CallTree::new(),
            decisions: BTreeSet::new(),
        }
    }

    pub fn with_decision(&self, d: Decision) -> Self {
        let mut p = self.clone();
        p.decisions.insert(d);
        p
    }

    /// Decisions must sit on tree members; at most one per (kind, site).
    pub fn is_well_formed(&self) -> bool {
        self.tree.is_prefix_closed() && self.decisions.iter().all(|d| self.tree.contains(&d.site))
    }

    pub fn decided_sites(&self) -> BTreeSet<DynamicCallsite> {
        self.decisions.iter().map(|d| d.site.clone()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf_proc(name: &str) -> Procedure {
        let block = Block {
            label: "B0".into(),
            stmts: vec![],
            term: Terminator::Return,
        };
        Procedure {
            name: name.into(),
            formals: vec![],
            locals: vec![],
            blocks: IndexMap::from([("B0".into(), block)]),
            entry: "B0".into(),
        }
    }

    fn caller_proc(name: &str, callee: &str) -> Procedure {
        let b0 = Block {
            label: "B0".into(),
            stmts: vec![Stmt::Call {
                callee: callee.into(),
                actuals: vec![],
            }],
            term: Terminator::Goto(vec!["B1".into()]),
        };
        let b1 = Block {
            label: "B1".into(),
            stmts: vec![],
            term: Terminator::Return,
        };
        Procedure {
            name: name.into(),
            formals: vec![],
            locals: vec![],
            blocks: IndexMap::from([("B0".into(), b0), ("B1".into(), b1)]),
            entry: "B0".into(),
        }
    }

    #[test]
    fn validate_accepts_simple_program() {
        let prog = CoreProgram {
            procedures: IndexMap::from([
                (MAIN.into(), caller_proc(MAIN, "leaf")),
                ("leaf".into(), leaf_proc("leaf")),
            ]),
        };
        assert_eq!(prog.validate(), Ok(()));
    }

    #[test]
    fn validate_rejects_cyclic_call_graph() {
        let prog = CoreProgram {
            procedures: IndexMap::from([
                (MAIN.into(), caller_proc(MAIN, "a")),
                ("a".into(), caller_proc("a", "a")),
            ]),
        };
        assert!(matches!(
            prog.validate(),
            Err(IrError::CyclicCallGraph(_))
        ));
    }

    #[test]
    fn validate_rejects_undeclared_callee() {
        let prog = CoreProgram {
            procedures: IndexMap::from([(MAIN.into(), caller_proc(MAIN, "ghost"))]),
        };
        assert!(matches!(
            prog.validate(),
            Err(IrError::UndeclaredCallee { .. })
        ));
    }

    #[test]
    fn dynamic_callsite_ordering_is_lexicographic() {
        let root = DynamicCallsite::root();
        let a = root.push(StaticCallsite::new("L1", "foo"));
        let b = root.push(StaticCallsite::new("L2", "bar"));
        let deep = a.push(StaticCallsite::new("L1", "baz"));
        assert!(root < a);
        assert!(a < b);
        assert!(a < deep);
        assert!(deep < b);
        assert!(a.is_prefix_of(&deep));
        assert!(!b.is_prefix_of(&deep));
    }

    #[test]
    fn call_tree_frontier_opens_children() {
        let prog = CoreProgram {
            procedures: IndexMap::from([
                (MAIN.into(), caller_proc(MAIN, "mid")),
                ("mid".into(), caller_proc("mid", "leaf")),
                ("leaf".into(), leaf_proc("leaf")),
            ]),
        };
        let tree = CallTree::new();
        let open = tree.frontier(&prog);
        assert_eq!(open.len(), 1);
        let mid_site = DynamicCallsite::root().push(StaticCallsite::new("B0", "mid"));
        assert!(open.contains(&mid_site));

        let mut tree = tree;
        tree.insert(mid_site.clone());
        let open = tree.frontier(&prog);
        assert_eq!(open.len(), 1);
        assert!(open.contains(&mid_site.push(StaticCallsite::new("B0", "leaf"))));
    }

    #[test]
    fn partition_well_formedness() {
        let root = Partition::root();
        assert!(root.is_well_formed());
        let stray = DynamicCallsite::root().push(StaticCallsite::new("L9", "nope"));
        let bad = root.with_decision(Decision::avoid(stray));
        assert!(!bad.is_well_formed());
    }
}
