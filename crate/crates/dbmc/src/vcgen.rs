//! Verification-condition construction for procedure instances.
//!
//! Owns the symbol vocabulary: per instance and block, a control variable
//! `b!<i>!<l>` (control reaches block `l`), a must-reach variable
//! `r!<i>!<l>`, and a globally unique integer block identifier. A single
//! uninterpreted control-flow function `f : Int -> Int` records, for each
//! block, the identifier of the successor chosen by a model.
//!
//! The partial VC of a procedure instance is the conjunction of the entry
//! control variable and, per block `l`,
//! `b_l => e_l /\ \/_{s in succ(l)} (b_s /\ i_s == f(i_l))`, with return
//! blocks contributing `b_l => e_l`. Calls contribute nothing (they read
//! as `assume true` until inlined). Must-reach constraints chain the
//! reverse direction: a reached block forces one of its predecessors to be
//! reached, with `f` tying the two encodings together.

use std::collections::HashMap;
use std::fmt;

use indexmap::IndexMap;
use thiserror::Error;

use crate::ir::{
    BinOp, Block, CoreProgram, Decision, DynamicCallsite, Expr, Label, Procedure, Sort, Stmt,
    Terminator, UnOp,
};

/// Name of the control-flow function symbol.
pub const CTRL_FN: &str = "f";

#[derive(Debug, Error, PartialEq)]
pub enum VcError {
    #[error("instance {0} is not registered")]
    UnknownInstance(String),
    #[error("block ids for {site} / `{label}` were never allocated")]
    MissingBlockId { site: String, label: Label },
    #[error("call to `{callee}` passes {got} actuals, expected {want}")]
    ArityMismatch {
        callee: String,
        got: usize,
        want: usize,
    },
    #[error("unknown procedure `{0}`")]
    UnknownProcedure(String),
    #[error("interface variables for {0} were never recorded")]
    MissingInterface(String),
    #[error("{0} has no parent instance")]
    RootHasNoParent(String),
}

/// Sorted term over {bool, int} with one uninterpreted function.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Term {
    Var(String, Sort),
    Int(i64),
    Bool(bool),
    Not(Box<Term>),
    And(Vec<Term>),
    Or(Vec<Term>),
    Implies(Box<Term>, Box<Term>),
    Eq(Box<Term>, Box<Term>),
    Cmp(CmpOp, Box<Term>, Box<Term>),
    Arith(ArithOp, Box<Term>, Box<Term>),
    Neg(Box<Term>),
    Ite(Box<Term>, Box<Term>, Box<Term>),
    /// Application of the control-flow function.
    CtrlApp(Box<Term>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CmpOp {
    Lt,
    Le,
    Gt,
    Ge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ArithOp {
    Add,
    Sub,
    Mul,
}

impl Term {
    pub fn var(name: impl Into<String>, sort: Sort) -> Term {
        Term::Var(name.into(), sort)
    }

    #[allow(clippy::should_implement_trait)] // constructor, not an operator impl
    pub fn not(t: Term) -> Term {
        Term::Not(Box::new(t))
    }

    pub fn implies(a: Term, b: Term) -> Term {
        Term::Implies(Box::new(a), Box::new(b))
    }

    pub fn eq(a: Term, b: Term) -> Term {
        Term::Eq(Box::new(a), Box::new(b))
    }

    pub fn and(ts: Vec<Term>) -> Term {
        match ts.len() {
            0 => Term::Bool(true),
            1 => ts.into_iter().next().unwrap(),
            _ => Term::And(ts),
        }
    }

    pub fn or(ts: Vec<Term>) -> Term {
        match ts.len() {
            0 => Term::Bool(false),
            1 => ts.into_iter().next().unwrap(),
            _ => Term::Or(ts),
        }
    }

    pub fn ctrl_app(id: i64) -> Term {
        Term::CtrlApp(Box::new(Term::Int(id)))
    }

    /// Free variables with their sorts.
    pub fn free_vars(&self, out: &mut HashMap<String, Sort>) {
        match self {
            Term::Var(n, s) => {
                out.insert(n.clone(), *s);
            }
            Term::Int(_) | Term::Bool(_) => {}
            Term::Not(a) | Term::Neg(a) | Term::CtrlApp(a) => a.free_vars(out),
            Term::And(ts) | Term::Or(ts) => {
                for t in ts {
                    t.free_vars(out);
                }
            }
            Term::Implies(a, b) | Term::Eq(a, b) => {
                a.free_vars(out);
                b.free_vars(out);
            }
            Term::Cmp(_, a, b) | Term::Arith(_, a, b) => {
                a.free_vars(out);
                b.free_vars(out);
            }
            Term::Ite(c, a, b) => {
                c.free_vars(out);
                a.free_vars(out);
                b.free_vars(out);
            }
        }
    }

    /// Renders the term as an SMT-LIB2 s-expression.
    pub fn to_smt(&self) -> String {
        let mut s = String::new();
        self.write_smt(&mut s);
        s
    }

    fn write_smt(&self, out: &mut String) {
        match self {
            Term::Var(n, _) => out.push_str(n),
            Term::Int(n) => {
                if *n < 0 {
                    out.push_str(&format!("(- {})", -(*n as i128)));
                } else {
                    out.push_str(&n.to_string());
                }
            }
            Term::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
            Term::Not(a) => {
                out.push_str("(not ");
                a.write_smt(out);
                out.push(')');
            }
            Term::And(ts) => write_nary(out, "and", ts),
            Term::Or(ts) => write_nary(out, "or", ts),
            Term::Implies(a, b) => write_binary(out, "=>", a, b),
            Term::Eq(a, b) => write_binary(out, "=", a, b),
            Term::Cmp(op, a, b) => {
                let sym = match op {
                    CmpOp::Lt => "<",
                    CmpOp::Le => "<=",
                    CmpOp::Gt => ">",
                    CmpOp::Ge => ">=",
                };
                write_binary(out, sym, a, b);
            }
            Term::Arith(op, a, b) => {
                let sym = match op {
                    ArithOp::Add => "+",
                    ArithOp::Sub => "-",
                    ArithOp::Mul => "*",
                };
                write_binary(out, sym, a, b);
            }
            Term::Neg(a) => {
                out.push_str("(- ");
                a.write_smt(out);
                out.push(')');
            }
            Term::Ite(c, a, b) => {
                out.push_str("(ite ");
                c.write_smt(out);
                out.push(' ');
                a.write_smt(out);
                out.push(' ');
                b.write_smt(out);
                out.push(')');
            }
            Term::CtrlApp(a) => {
                out.push('(');
                out.push_str(CTRL_FN);
                out.push(' ');
                a.write_smt(out);
                out.push(')');
            }
        }
    }
}

fn write_nary(out: &mut String, op: &str, ts: &[Term]) {
    out.push('(');
    out.push_str(op);
    for t in ts {
        out.push(' ');
        t.write_smt(out);
    }
    out.push(')');
}

fn write_binary(out: &mut String, op: &str, a: &Term, b: &Term) {
    out.push('(');
    out.push_str(op);
    out.push(' ');
    a.write_smt(out);
    out.push(' ');
    b.write_smt(out);
    out.push(')');
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_smt())
    }
}

/// What an assertion stands for, recoverable from its name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AssertionOrigin {
    InlinedSite(DynamicCallsite),
    BlockedSite(DynamicCallsite),
    DecisionOrigin(Decision),
    Root,
}

/// A term plus the unique solver-level label it is asserted under.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedAssertion {
    pub name: String,
    pub term: Term,
    pub origin: AssertionOrigin,
}

struct Instance {
    iid: usize,
    proc_name: String,
    block_ids: IndexMap<Label, i64>,
}

/// Per-run symbol factory and bookkeeping for inlined instances.
///
/// One context per client; block identifiers come from a single
/// monotonically increasing counter, so they are pairwise distinct across
/// the whole run.
pub struct VCContext {
    instances: IndexMap<DynamicCallsite, Instance>,
    next_block_id: i64,
    site_hashes: HashMap<u64, DynamicCallsite>,
    interface_vars: HashMap<DynamicCallsite, Vec<Term>>,
    decision_names: Vec<Decision>,
}

impl Default for VCContext {
    fn default() -> Self {
        Self::new()
    }
}

impl VCContext {
    pub fn new() -> Self {
        VCContext {
            instances: IndexMap::new(),
            next_block_id: 1,
            site_hashes: HashMap::new(),
            interface_vars: HashMap::new(),
            decision_names: Vec::new(),
        }
    }

    /// Registers an instance (idempotent) and allocates its block ids.
    /// Re-registering after a solver pop reuses the original symbols and
    /// ids, keeping re-asserted formulas identical.
    fn register(&mut self, site: &DynamicCallsite, p: &Procedure) -> &Instance {
        if let Some(existing) = self.instances.get(site) {
            assert_eq!(
                existing.proc_name, p.name,
                "one dynamic callsite cannot name two procedures"
            );
        }
        if !self.instances.contains_key(site) {
            let iid = self.instances.len();
            let mut block_ids = IndexMap::new();
            for label in p.blocks.keys() {
                block_ids.insert(label.clone(), self.next_block_id);
                self.next_block_id += 1;
            }
            self.instances.insert(
                site.clone(),
                Instance {
                    iid,
                    proc_name: p.name.clone(),
                    block_ids,
                },
            );
        }
        &self.instances[site]
    }

    fn instance(&self, site: &DynamicCallsite) -> Result<&Instance, VcError> {
        self.instances
            .get(site)
            .ok_or_else(|| VcError::UnknownInstance(site.to_string()))
    }

    pub fn is_registered(&self, site: &DynamicCallsite) -> bool {
        self.instances.contains_key(site)
    }

    /// The `b_l` control variable of a block in an instance.
    pub fn control_var(&self, site: &DynamicCallsite, label: &str) -> Result<Term, VcError> {
        let inst = self.instance(site)?;
        Ok(Term::var(format!("b!{}!{label}", inst.iid), Sort::Bool))
    }

    /// The `r_l` must-reach variable of a block in an instance.
    pub fn must_reach_var(&self, site: &DynamicCallsite, label: &str) -> Result<Term, VcError> {
        let inst = self.instance(site)?;
        Ok(Term::var(format!("r!{}!{label}", inst.iid), Sort::Bool))
    }

    /// The globally unique integer id of a block in an instance.
    pub fn block_id(&self, site: &DynamicCallsite, label: &str) -> Result<i64, VcError> {
        let inst = self.instance(site)?;
        inst.block_ids
            .get(label)
            .copied()
            .ok_or_else(|| VcError::MissingBlockId {
                site: site.to_string(),
                label: label.to_string(),
            })
    }

    /// All block ids of an instance, in block order.
    pub fn block_ids_of(
        &self,
        site: &DynamicCallsite,
    ) -> Result<Vec<(Label, i64)>, VcError> {
        let inst = self.instance(site)?;
        Ok(inst
            .block_ids
            .iter()
            .map(|(l, id)| (l.clone(), *id))
            .collect())
    }

    /// Control variable of the block calling `site` (its parent's block).
    pub fn cvar(&self, site: &DynamicCallsite) -> Result<Term, VcError> {
        let parent = site
            .parent()
            .ok_or_else(|| VcError::RootHasNoParent(site.to_string()))?;
        let label = site.calling_label().unwrap().clone();
        self.control_var(&parent, &label)
    }

    /// Actual-argument terms recorded when the parent was inlined.
    pub fn interface_vars(&self, site: &DynamicCallsite) -> Result<&Vec<Term>, VcError> {
        self.interface_vars
            .get(site)
            .ok_or_else(|| VcError::MissingInterface(site.to_string()))
    }

    fn local_var(&self, iid: usize, name: &str, sort: Sort) -> Term {
        Term::var(format!("v!{iid}!{name}"), sort)
    }

    /// `inl!<hash>` / `blk!<hash>` style names; the hash is invertible
    /// through the context's table.
    pub fn site_assertion_name(&mut self, prefix: &str, site: &DynamicCallsite) -> String {
        let h = fnv1a(site.path_string().as_bytes());
        if let Some(prev) = self.site_hashes.get(&h) {
            assert_eq!(
                prev, site,
                "callsite path hash collision; naming scheme needs widening"
            );
        } else {
            self.site_hashes.insert(h, site.clone());
        }
        format!("{prefix}!{h:016x}")
    }

    /// Fresh `dec!<n>` name for a decision assertion.
    pub fn decision_assertion_name(&mut self, d: &Decision) -> String {
        let n = self.decision_names.len();
        self.decision_names.push(d.clone());
        format!("dec!{n}")
    }

    /// Maps an assertion name back to the callsite it stands for.
    /// Decision names map to their decision's site; unknown names yield
    /// `None`.
    pub fn site_of_assertion_name(&self, name: &str) -> Option<(AssertionOrigin, DynamicCallsite)> {
        if let Some(hex) = name.strip_prefix("inl!") {
            let h = u64::from_str_radix(hex, 16).ok()?;
            let site = self.site_hashes.get(&h)?.clone();
            return Some((AssertionOrigin::InlinedSite(site.clone()), site));
        }
        if let Some(hex) = name.strip_prefix("blk!") {
            let h = u64::from_str_radix(hex, 16).ok()?;
            let site = self.site_hashes.get(&h)?.clone();
            return Some((AssertionOrigin::BlockedSite(site.clone()), site));
        }
        if let Some(n) = name.strip_prefix("dec!") {
            let idx: usize = n.parse().ok()?;
            let d = self.decision_names.get(idx)?.clone();
            let site = d.site.clone();
            return Some((AssertionOrigin::DecisionOrigin(d), site));
        }
        None
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Translates a core expression under a substitution: formals map to
/// actual terms, everything else to instance-local symbols.
fn translate_expr(
    e: &Expr,
    subst: &HashMap<String, Term>,
    iid: usize,
    proc: &Procedure,
    ctx: &VCContext,
) -> Term {
    match e {
        Expr::Var(v) => {
            if let Some(t) = subst.get(v) {
                t.clone()
            } else {
                let sort = proc.sort_of(v).unwrap_or(Sort::Int);
                ctx.local_var(iid, v, sort)
            }
        }
        Expr::Int(n) => Term::Int(*n),
        Expr::Bool(b) => Term::Bool(*b),
        Expr::Unary(UnOp::Not, a) => Term::not(translate_expr(a, subst, iid, proc, ctx)),
        Expr::Unary(UnOp::Neg, a) => {
            Term::Neg(Box::new(translate_expr(a, subst, iid, proc, ctx)))
        }
        Expr::Binary(op, a, b) => {
            let ta = translate_expr(a, subst, iid, proc, ctx);
            let tb = translate_expr(b, subst, iid, proc, ctx);
            match op {
                BinOp::Add => Term::Arith(ArithOp::Add, Box::new(ta), Box::new(tb)),
                BinOp::Sub => Term::Arith(ArithOp::Sub, Box::new(ta), Box::new(tb)),
                BinOp::Mul => Term::Arith(ArithOp::Mul, Box::new(ta), Box::new(tb)),
                BinOp::Eq => Term::eq(ta, tb),
                BinOp::Ne => Term::not(Term::eq(ta, tb)),
                BinOp::Lt => Term::Cmp(CmpOp::Lt, Box::new(ta), Box::new(tb)),
                BinOp::Le => Term::Cmp(CmpOp::Le, Box::new(ta), Box::new(tb)),
                BinOp::Gt => Term::Cmp(CmpOp::Gt, Box::new(ta), Box::new(tb)),
                BinOp::Ge => Term::Cmp(CmpOp::Ge, Box::new(ta), Box::new(tb)),
                BinOp::And => Term::And(vec![ta, tb]),
                BinOp::Or => Term::Or(vec![ta, tb]),
            }
        }
        Expr::Ite(c, a, b) => Term::Ite(
            Box::new(translate_expr(c, subst, iid, proc, ctx)),
            Box::new(translate_expr(a, subst, iid, proc, ctx)),
            Box::new(translate_expr(b, subst, iid, proc, ctx)),
        ),
    }
}

/// Conjunction of a block's assumed expressions (`true` if none).
fn block_constraint(
    b: &Block,
    subst: &HashMap<String, Term>,
    iid: usize,
    proc: &Procedure,
    ctx: &VCContext,
) -> Term {
    let assumes: Vec<Term> = b
        .stmts
        .iter()
        .filter_map(|s| match s {
            Stmt::Assume(e) => Some(translate_expr(e, subst, iid, proc, ctx)),
            Stmt::Call { .. } => None, // reads as assume true until inlined
        })
        .collect();
    Term::and(assumes)
}

/// Builds the partial VC of procedure `p` at instance `c`, substituting
/// `actuals` for the formals. Returns the conjuncts: the entry control
/// variable first, then one constraint per block in block order. As a side
/// effect, records the actual-argument terms of every callsite in `p` so
/// that children can be inlined later.
pub fn pvc(
    program: &CoreProgram,
    p: &Procedure,
    c: &DynamicCallsite,
    actuals: &[Term],
    ctx: &mut VCContext,
) -> Result<Vec<Term>, VcError> {
    if actuals.len() != p.formals.len() {
        return Err(VcError::ArityMismatch {
            callee: p.name.clone(),
            got: actuals.len(),
            want: p.formals.len(),
        });
    }
    ctx.register(c, p);
    let iid = ctx.instance(c)?.iid;

    let subst: HashMap<String, Term> = p
        .formals
        .iter()
        .zip(actuals)
        .map(|(f, a)| (f.name.clone(), a.clone()))
        .collect();

    let mut conjuncts = Vec::with_capacity(p.blocks.len() + 1);
    conjuncts.push(ctx.control_var(c, &p.entry)?);

    for b in p.blocks.values() {
        let e_l = block_constraint(b, &subst, iid, p, ctx);
        let b_l = ctx.control_var(c, &b.label)?;
        let phi = match &b.term {
            Terminator::Return => Term::implies(b_l, e_l),
            Terminator::Goto(succs) => {
                let i_l = ctx.block_id(c, &b.label)?;
                let mut disjuncts = Vec::with_capacity(succs.len());
                for s in succs {
                    let b_s = ctx.control_var(c, s)?;
                    let i_s = ctx.block_id(c, s)?;
                    disjuncts.push(Term::And(vec![
                        b_s,
                        Term::eq(Term::Int(i_s), Term::ctrl_app(i_l)),
                    ]));
                }
                Term::implies(b_l, Term::and(vec![e_l, Term::or(disjuncts)]))
            }
        };
        conjuncts.push(phi);

        // Record interface terms for the child instance at this block.
        if let Some((callee, call_actuals)) = b.call() {
            let child = c.push(crate::ir::StaticCallsite::new(
                b.label.clone(),
                callee.clone(),
            ));
            let q = program
                .get(callee)
                .ok_or_else(|| VcError::UnknownProcedure(callee.clone()))?;
            if q.formals.len() != call_actuals.len() {
                return Err(VcError::ArityMismatch {
                    callee: callee.clone(),
                    got: call_actuals.len(),
                    want: q.formals.len(),
                });
            }
            let terms: Vec<Term> = call_actuals
                .iter()
                .map(|a| translate_expr(a, &subst, iid, p, ctx))
                .collect();
            ctx.interface_vars.insert(child, terms);
        }
    }
    Ok(conjuncts)
}

/// Must-reach constraint of a procedure instance: per block, if it must
/// be reached then some predecessor must be reached and must have chosen
/// it. The entry block is trivially reachable.
///
/// The control-flow function is applied to the predecessor's id
/// (`f(i_n) == i_l`): the successor chosen at `n` is `l`. That keeps the
/// orientation consistent with the partial VC.
pub fn mr_proc(p: &Procedure, c: &DynamicCallsite, ctx: &VCContext) -> Result<Term, VcError> {
    let preds = p.predecessors();
    let mut conjuncts = Vec::with_capacity(p.blocks.len());
    for b in p.blocks.values() {
        let r_l = ctx.must_reach_var(c, &b.label)?;
        let rhs = if b.label == p.entry {
            Term::Bool(true)
        } else {
            let mut disjuncts = Vec::new();
            if let Some(ns) = preds.get(&b.label) {
                let i_l = ctx.block_id(c, &b.label)?;
                for n in ns {
                    let r_n = ctx.must_reach_var(c, n)?;
                    let i_n = ctx.block_id(c, n)?;
                    disjuncts.push(Term::And(vec![
                        r_n,
                        Term::eq(Term::ctrl_app(i_n), Term::Int(i_l)),
                    ]));
                }
            }
            Term::or(disjuncts)
        };
        conjuncts.push(Term::implies(r_l, rhs));
    }
    Ok(Term::and(conjuncts))
}

/// Must-reach constraint chain for a dynamic callsite, built inductively
/// over the stack: the root contributes `true`; each frame anchors the
/// must-reach variable of its calling block and the caller's must-reach
/// constraint.
pub fn mr_chain(
    program: &CoreProgram,
    c: &DynamicCallsite,
    ctx: &VCContext,
) -> Result<Term, VcError> {
    let mut levels = Vec::new();
    let mut cur = c.clone();
    while let Some(parent) = cur.parent() {
        let label = cur.calling_label().unwrap().clone();
        let r_anchor = ctx.must_reach_var(&parent, &label)?;
        let caller = program
            .get(parent.proc_name())
            .ok_or_else(|| VcError::UnknownProcedure(parent.proc_name().to_string()))?;
        levels.push((r_anchor, mr_proc(caller, &parent, ctx)?));
        cur = parent;
    }
    if levels.is_empty() {
        return Ok(Term::Bool(true));
    }
    levels.reverse(); // outermost caller first
    let mut conjuncts = Vec::with_capacity(levels.len() * 2);
    for (anchor, mr) in levels {
        conjuncts.push(anchor);
        conjuncts.push(mr);
    }
    Ok(Term::and(conjuncts))
}

/// Blocking constraint for a callsite: the calling block is never reached.
pub fn avoid_constraint(c: &DynamicCallsite, ctx: &VCContext) -> Result<Term, VcError> {
    Ok(Term::not(ctx.cvar(c)?))
}
