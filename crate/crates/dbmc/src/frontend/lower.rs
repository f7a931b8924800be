//! Lowering from the surface language to the passified core IR.
//!
//! The pipeline: unroll loops to the given depth (remaining iterations are
//! cut with `assume false`), unroll recursion by cloning procedures along
//! call chains, rewrite assertions into reachability of a distinguished
//! exit block, passify assignments by variable versioning, and build the
//! block-structured CFG with at most one call per block.
//!
//! Assertion lowering makes `main`'s return reachable iff some assertion
//! can fail: a failing assertion branches to the exit block, and the
//! all-asserts-pass end of `main` is sealed with `assume false`. An
//! assertion inside a callee cannot jump to `main`'s exit directly, so
//! may-fail procedures get one extra boolean formal that their violating
//! paths constrain to true; callers branch to their own failure path right
//! after the call. Only paths on which an assertion actually failed can
//! reach `main`'s return.

use std::collections::{BTreeSet, HashMap, HashSet};

use indexmap::IndexMap;

use crate::ir::{
    Block, BinOp, CoreProgram, Expr, Procedure, Sort, Stmt, Terminator, TypedVar, MAIN,
};

use super::{FrontendError, Guard, LabeledStmt, SurfaceProc, SurfaceProgram, SurfaceStmt};

/// Reserved names; `$` keeps them out of the surface namespace.
const ERR_FORMAL: &str = "$err";
const EXIT_LABEL: &str = "$exit";

/// Lowers a sort-checked surface program to a core program, unrolling
/// loops and recursion `unroll_depth` times.
pub fn lower(sp: &SurfaceProgram, unroll_depth: u32) -> Result<CoreProgram, FrontendError> {
    if unroll_depth == 0 {
        return Err(FrontendError::BadUnrollDepth);
    }

    // Loop unrolling is per-procedure.
    let mut procs: Vec<SurfaceProc> = sp
        .procedures
        .iter()
        .map(|p| SurfaceProc {
            body: unroll_stmts(&p.body, unroll_depth),
            ..p.clone()
        })
        .collect();

    if is_cyclic(&procs) {
        procs = unroll_recursion(&procs, unroll_depth);
    }

    let may_fail = may_fail_set(&procs);

    let mut procedures = IndexMap::new();
    for p in &procs {
        let lowered = lower_proc(p, &may_fail)?;
        procedures.insert(lowered.name.clone(), lowered);
    }
    let prog = CoreProgram { procedures };
    prog.validate().map_err(|e| FrontendError::Syntax {
        pos: super::Pos { line: 0, col: 0 },
        msg: format!("internal lowering error: {e}"),
    })?;
    Ok(prog)
}

/// Convenience: parse then lower.
pub(crate) fn _lower_source(text: &str, depth: u32) -> Result<CoreProgram, FrontendError> {
    lower(&super::parse(text)?, depth)
}

// ---------------------------------------------------------------------
// Pass 1: loop unrolling.

fn unroll_stmts(stmts: &[LabeledStmt], depth: u32) -> Vec<LabeledStmt> {
    stmts
        .iter()
        .map(|ls| LabeledStmt {
            label: ls.label.clone(),
            pos: ls.pos,
            stmt: unroll_stmt(&ls.stmt, depth),
        })
        .collect()
}

fn unroll_stmt(stmt: &SurfaceStmt, depth: u32) -> SurfaceStmt {
    match stmt {
        SurfaceStmt::If(g, t, e) => SurfaceStmt::If(
            g.clone(),
            unroll_stmts(t, depth),
            unroll_stmts(e, depth),
        ),
        SurfaceStmt::While(g, body) => {
            let body = unroll_stmts(body, depth);
            unroll_while(g, &body, depth, 0)
        }
        other => other.clone(),
    }
}

/// `while (g) body` becomes `depth` nested guarded copies of the body;
/// executions that would iterate further are cut with an assume.
fn unroll_while(g: &Guard, body: &[LabeledStmt], remaining: u32, iteration: u32) -> SurfaceStmt {
    if remaining == 0 {
        // Cut: continuing past the last unrolled iteration is infeasible.
        let cut = match g {
            Some(e) => Expr::not(e.clone()),
            None => Expr::Bool(false),
        };
        return SurfaceStmt::Assume(cut);
    }
    let mut then_body = relabel_iteration(body, iteration);
    then_body.push(LabeledStmt {
        label: None,
        stmt: unroll_while(g, body, remaining - 1, iteration + 1),
        pos: super::Pos { line: 0, col: 0 },
    });
    SurfaceStmt::If(g.clone(), then_body, Vec::new())
}

/// Copies of a loop body after the first get suffixed labels so block
/// names stay unique.
fn relabel_iteration(body: &[LabeledStmt], iteration: u32) -> Vec<LabeledStmt> {
    if iteration == 0 {
        return body.to_vec();
    }
    body.iter()
        .map(|ls| LabeledStmt {
            label: ls.label.as_ref().map(|l| format!("{l}@{iteration}")),
            pos: ls.pos,
            stmt: match &ls.stmt {
                SurfaceStmt::If(g, t, e) => SurfaceStmt::If(
                    g.clone(),
                    relabel_iteration(t, iteration),
                    relabel_iteration(e, iteration),
                ),
                other => other.clone(),
            },
        })
        .collect()
}

// ---------------------------------------------------------------------
// Pass 2: recursion unrolling by procedure cloning.

fn call_targets(stmts: &[LabeledStmt], out: &mut Vec<String>) {
    for ls in stmts {
        match &ls.stmt {
            SurfaceStmt::Call { callee, .. } => out.push(callee.clone()),
            SurfaceStmt::If(_, t, e) => {
                call_targets(t, out);
                call_targets(e, out);
            }
            SurfaceStmt::While(_, b) => call_targets(b, out),
            _ => {}
        }
    }
}

fn is_cyclic(procs: &[SurfaceProc]) -> bool {
    let index: HashMap<&str, usize> = procs
        .iter()
        .enumerate()
        .map(|(i, p)| (p.name.as_str(), i))
        .collect();
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        Open,
        Done,
    }
    let mut marks: HashMap<usize, Mark> = HashMap::new();
    fn dfs(
        i: usize,
        procs: &[SurfaceProc],
        index: &HashMap<&str, usize>,
        marks: &mut HashMap<usize, Mark>,
    ) -> bool {
        marks.insert(i, Mark::Open);
        let mut callees = Vec::new();
        call_targets(&procs[i].body, &mut callees);
        for c in callees {
            if let Some(&j) = index.get(c.as_str()) {
                match marks.get(&j) {
                    Some(Mark::Open) => return true,
                    Some(Mark::Done) => {}
                    None => {
                        if dfs(j, procs, index, marks) {
                            return true;
                        }
                    }
                }
            }
        }
        marks.insert(i, Mark::Done);
        false
    }
    (0..procs.len()).any(|i| !marks.contains_key(&i) && dfs(i, procs, &index, &mut marks))
}

/// Clones procedures per call depth so the call graph becomes acyclic.
/// A call at the deepest level is cut with `assume false`.
fn unroll_recursion(procs: &[SurfaceProc], depth: u32) -> Vec<SurfaceProc> {
    let by_name: HashMap<&str, &SurfaceProc> =
        procs.iter().map(|p| (p.name.as_str(), p)).collect();
    let mut out = Vec::new();
    let mut queue = vec![(MAIN.to_string(), 0u32)];
    let mut seen = HashSet::new();
    while let Some((name, d)) = queue.pop() {
        if !seen.insert((name.clone(), d)) {
            continue;
        }
        let Some(orig) = by_name.get(name.as_str()) else {
            continue;
        };
        let inst_name = instance_name(&name, d);
        let body = rewrite_calls(&orig.body, d, depth, &mut |callee| {
            queue.push((callee.to_string(), d + 1));
        });
        out.push(SurfaceProc {
            name: inst_name,
            formals: orig.formals.clone(),
            locals: orig.locals.clone(),
            body,
            pos: orig.pos,
        });
    }
    out.sort_by(|a, b| a.name.cmp(&b.name));
    out
}

fn instance_name(name: &str, depth: u32) -> String {
    if depth == 0 {
        name.to_string()
    } else {
        format!("{name}@{depth}")
    }
}

fn rewrite_calls(
    stmts: &[LabeledStmt],
    d: u32,
    max: u32,
    visit: &mut impl FnMut(&str),
) -> Vec<LabeledStmt> {
    stmts
        .iter()
        .map(|ls| LabeledStmt {
            label: ls.label.clone(),
            pos: ls.pos,
            stmt: match &ls.stmt {
                SurfaceStmt::Call { callee, actuals } => {
                    if d + 1 > max {
                        SurfaceStmt::Assume(Expr::Bool(false))
                    } else {
                        visit(callee);
                        SurfaceStmt::Call {
                            callee: instance_name(callee, d + 1),
                            actuals: actuals.clone(),
                        }
                    }
                }
                SurfaceStmt::If(g, t, e) => SurfaceStmt::If(
                    g.clone(),
                    rewrite_calls(t, d, max, visit),
                    rewrite_calls(e, d, max, visit),
                ),
                SurfaceStmt::While(..) => unreachable!("loops unrolled before recursion pass"),
                other => other.clone(),
            },
        })
        .collect()
}

// ---------------------------------------------------------------------
// Pass 3: may-fail analysis.

/// Procedures that contain an assertion, directly or through calls.
fn may_fail_set(procs: &[SurfaceProc]) -> HashSet<String> {
    fn has_assert(stmts: &[LabeledStmt]) -> bool {
        stmts.iter().any(|ls| match &ls.stmt {
            SurfaceStmt::Assert(_) => true,
            SurfaceStmt::If(_, t, e) => has_assert(t) || has_assert(e),
            SurfaceStmt::While(_, b) => has_assert(b),
            _ => false,
        })
    }
    let mut set: HashSet<String> = procs
        .iter()
        .filter(|p| has_assert(&p.body))
        .map(|p| p.name.clone())
        .collect();
    loop {
        let mut changed = false;
        for p in procs {
            if set.contains(&p.name) {
                continue;
            }
            let mut callees = Vec::new();
            call_targets(&p.body, &mut callees);
            if callees.iter().any(|c| set.contains(c)) {
                set.insert(p.name.clone());
                changed = true;
            }
        }
        if !changed {
            return set;
        }
    }
}

// ---------------------------------------------------------------------
// Pass 4: per-procedure CFG construction and passification.

/// Statement shape after assertion rewriting; `FailJump` transfers to the
/// procedure's failure exit.
enum HStmt {
    Assign(String, Expr),
    Assume(Expr),
    Call { callee: String, actuals: Vec<Expr> },
    If(Guard, Vec<HLabeled>, Vec<HLabeled>),
    FailJump,
}

struct HLabeled {
    label: Option<String>,
    stmt: HStmt,
}

fn unlabeled(stmt: HStmt) -> HLabeled {
    HLabeled { label: None, stmt }
}

/// Rewrites asserts and may-fail calls into explicit failure branches.
fn thread_failures(
    stmts: &[LabeledStmt],
    in_main: bool,
    may_fail: &HashSet<String>,
    flag_counter: &mut u32,
    extra_locals: &mut Vec<TypedVar>,
) -> Vec<HLabeled> {
    let mut out = Vec::new();
    for ls in stmts {
        match &ls.stmt {
            SurfaceStmt::Assign(v, e) => out.push(HLabeled {
                label: ls.label.clone(),
                stmt: HStmt::Assign(v.clone(), e.clone()),
            }),
            SurfaceStmt::Assume(e) => out.push(HLabeled {
                label: ls.label.clone(),
                stmt: HStmt::Assume(e.clone()),
            }),
            SurfaceStmt::Assert(e) => {
                let mut fail = Vec::new();
                if !in_main {
                    fail.push(unlabeled(HStmt::Assume(Expr::Var(ERR_FORMAL.into()))));
                }
                fail.push(unlabeled(HStmt::FailJump));
                out.push(HLabeled {
                    label: ls.label.clone(),
                    stmt: HStmt::If(Some(Expr::not(e.clone())), fail, Vec::new()),
                });
            }
            SurfaceStmt::Call { callee, actuals } => {
                if may_fail.contains(callee) {
                    let flag = format!("t${flag_counter}");
                    *flag_counter += 1;
                    extra_locals.push(TypedVar {
                        name: flag.clone(),
                        sort: Sort::Bool,
                    });
                    let mut actuals = actuals.clone();
                    actuals.push(Expr::Var(flag.clone()));
                    out.push(HLabeled {
                        label: ls.label.clone(),
                        stmt: HStmt::Call {
                            callee: callee.clone(),
                            actuals,
                        },
                    });
                    let mut fail = Vec::new();
                    if !in_main {
                        fail.push(unlabeled(HStmt::Assume(Expr::Var(ERR_FORMAL.into()))));
                    }
                    fail.push(unlabeled(HStmt::FailJump));
                    out.push(unlabeled(HStmt::If(
                        Some(Expr::Var(flag)),
                        fail,
                        Vec::new(),
                    )));
                } else {
                    out.push(HLabeled {
                        label: ls.label.clone(),
                        stmt: HStmt::Call {
                            callee: callee.clone(),
                            actuals: actuals.clone(),
                        },
                    });
                }
            }
            SurfaceStmt::If(g, t, e) => {
                let t = thread_failures(t, in_main, may_fail, flag_counter, extra_locals);
                let e = thread_failures(e, in_main, may_fail, flag_counter, extra_locals);
                out.push(HLabeled {
                    label: ls.label.clone(),
                    stmt: HStmt::If(g.clone(), t, e),
                });
            }
            SurfaceStmt::While(..) => unreachable!("loops unrolled before failure threading"),
        }
    }
    out
}

struct Builder {
    blocks: IndexMap<String, Block>,
    current_label: String,
    current_stmts: Vec<Stmt>,
    /// Entry may still be renamed by a leading label.
    virgin_entry: bool,
    entry: String,
    next_label: u32,
    used_labels: HashSet<String>,
    // passification state
    env: HashMap<String, u32>,
    next_ver: HashMap<String, u32>,
    sorts: HashMap<String, Sort>,
    locals: Vec<TypedVar>,
    exit_label: String,
}

impl Builder {
    fn fresh_label(&mut self) -> String {
        loop {
            let l = format!("$b{}", self.next_label);
            self.next_label += 1;
            if self.used_labels.insert(l.clone()) {
                return l;
            }
        }
    }

    fn close(&mut self, term: Terminator) {
        let label = std::mem::take(&mut self.current_label);
        let stmts = std::mem::take(&mut self.current_stmts);
        self.blocks.insert(
            label.clone(),
            Block {
                label,
                stmts,
                term,
            },
        );
        self.virgin_entry = false;
    }

    fn open(&mut self, label: String) {
        self.current_label = label;
        self.current_stmts = Vec::new();
    }

    fn emit(&mut self, s: Stmt) {
        self.current_stmts.push(s);
        self.virgin_entry = false;
    }

    fn versioned(&self, base: &str) -> String {
        match self.env.get(base) {
            Some(0) | None => base.to_string(),
            Some(n) => format!("{base}@{n}"),
        }
    }

    fn rename(&self, e: &Expr) -> Expr {
        match e {
            Expr::Var(v) => Expr::Var(self.versioned(v)),
            Expr::Int(_) | Expr::Bool(_) => e.clone(),
            Expr::Unary(op, a) => Expr::Unary(*op, Box::new(self.rename(a))),
            Expr::Binary(op, a, b) => {
                Expr::Binary(*op, Box::new(self.rename(a)), Box::new(self.rename(b)))
            }
            Expr::Ite(c, a, b) => Expr::Ite(
                Box::new(self.rename(c)),
                Box::new(self.rename(a)),
                Box::new(self.rename(b)),
            ),
        }
    }

    /// Allocates a fresh version of `base` and registers it as a local.
    fn fresh_version(&mut self, base: &str) -> String {
        let next = self.next_ver.entry(base.to_string()).or_insert(0);
        *next += 1;
        let v = *next;
        self.env.insert(base.to_string(), v);
        let name = format!("{base}@{v}");
        self.locals.push(TypedVar {
            name: name.clone(),
            sort: self.sorts[base],
        });
        name
    }

    fn start_labeled_block(&mut self, label: &str) -> Result<(), FrontendError> {
        if !self.used_labels.insert(label.to_string()) {
            return Err(FrontendError::Duplicate {
                pos: super::Pos { line: 0, col: 0 },
                name: label.to_string(),
            });
        }
        if self.virgin_entry && self.current_stmts.is_empty() {
            // Nothing references the auto entry label yet; take the name.
            self.current_label = label.to_string();
            self.entry = label.to_string();
        } else {
            self.close(Terminator::Goto(vec![label.to_string()]));
            self.open(label.to_string());
        }
        Ok(())
    }

    /// Walks a statement list; returns whether the end is reachable.
    fn walk(&mut self, stmts: &[HLabeled]) -> Result<bool, FrontendError> {
        let mut live = true;
        for hl in stmts {
            if let Some(l) = &hl.label {
                self.start_labeled_block(l)?;
            }
            match &hl.stmt {
                HStmt::Assign(v, e) => {
                    let rhs = self.rename(e);
                    let lhs = self.fresh_version(v);
                    self.emit(Stmt::Assume(Expr::bin(BinOp::Eq, Expr::Var(lhs), rhs)));
                }
                HStmt::Assume(e) => {
                    let e = self.rename(e);
                    self.emit(Stmt::Assume(e));
                }
                HStmt::Call { callee, actuals } => {
                    let actuals = actuals.iter().map(|a| self.rename(a)).collect();
                    self.emit(Stmt::Call {
                        callee: callee.clone(),
                        actuals,
                    });
                    // one call per block: split immediately after
                    let next = self.fresh_label();
                    self.close(Terminator::Goto(vec![next.clone()]));
                    self.open(next);
                }
                HStmt::FailJump => {
                    let exit = self.exit_label.clone();
                    self.close(Terminator::Goto(vec![exit]));
                    // unreachable continuation; pruned later
                    let dead = self.fresh_label();
                    self.open(dead);
                    live = false;
                }
                HStmt::If(g, t, e) => {
                    let then_label = self.fresh_label();
                    let else_label = self.fresh_label();
                    self.close(Terminator::Goto(vec![
                        then_label.clone(),
                        else_label.clone(),
                    ]));

                    let guard = g.as_ref().map(|c| self.rename(c));
                    let pre_env = self.env.clone();

                    self.open(then_label);
                    if let Some(c) = &guard {
                        self.emit(Stmt::Assume(c.clone()));
                    }
                    let live_t = self.walk(t)?;
                    let env_t = self.env.clone();
                    let tail_t = (self.current_label.clone(), std::mem::take(&mut self.current_stmts));

                    self.env = pre_env.clone();
                    self.open(else_label);
                    if let Some(c) = &guard {
                        self.emit(Stmt::Assume(Expr::not(c.clone())));
                    }
                    let live_e = self.walk(e)?;
                    let env_e = self.env.clone();
                    let tail_e = (self.current_label.clone(), std::mem::take(&mut self.current_stmts));

                    let join = self.fresh_label();
                    let merged = self.merge_envs(live_t.then_some(&env_t), live_e.then_some(&env_e));
                    // Merge assumes go at the end of each live branch tail.
                    for (liveness, (label, mut stmts), env) in [
                        (live_t, tail_t, &env_t),
                        (live_e, tail_e, &env_e),
                    ] {
                        if liveness {
                            for (base, target_ver) in &merged {
                                let from = version_name(base, env[base]);
                                let to = version_name(base, *target_ver);
                                if from != to {
                                    stmts.push(Stmt::Assume(Expr::bin(
                                        BinOp::Eq,
                                        Expr::Var(to),
                                        Expr::Var(from),
                                    )));
                                }
                            }
                        }
                        self.blocks.insert(
                            label.clone(),
                            Block {
                                label,
                                stmts,
                                term: Terminator::Goto(vec![join.clone()]),
                            },
                        );
                    }
                    self.virgin_entry = false;
                    self.open(join);
                    live = live_t || live_e;
                    if !live {
                        // keep walking into dead code; blocks get pruned
                        continue;
                    }
                }
            }
        }
        Ok(live)
    }

    /// Reconciles versions after a branch; returns base -> merged version.
    fn merge_envs(
        &mut self,
        a: Option<&HashMap<String, u32>>,
        b: Option<&HashMap<String, u32>>,
    ) -> Vec<(String, u32)> {
        match (a, b) {
            (Some(a), Some(b)) => {
                let mut out = Vec::new();
                let keys: BTreeSet<&String> = a.keys().chain(b.keys()).collect();
                for base in keys {
                    let va = a.get(base).copied().unwrap_or(0);
                    let vb = b.get(base).copied().unwrap_or(0);
                    if va != vb {
                        let merged = self.fresh_version_num(base);
                        out.push((base.clone(), merged));
                    } else {
                        self.env.insert(base.clone(), va);
                    }
                }
                out
            }
            (Some(a), None) => {
                self.env = a.clone();
                Vec::new()
            }
            (None, Some(b)) => {
                self.env = b.clone();
                Vec::new()
            }
            (None, None) => Vec::new(),
        }
    }

    fn fresh_version_num(&mut self, base: &str) -> u32 {
        let name = self.fresh_version(base);
        let _ = name;
        self.env[base]
    }
}

fn version_name(base: &str, ver: u32) -> String {
    if ver == 0 {
        base.to_string()
    } else {
        format!("{base}@{ver}")
    }
}

fn lower_proc(p: &SurfaceProc, may_fail: &HashSet<String>) -> Result<Procedure, FrontendError> {
    let in_main = p.name == MAIN;
    let threads_err = !in_main && may_fail.contains(&p.name);

    let mut flag_counter = 0;
    let mut extra_locals = Vec::new();
    let hstmts = thread_failures(&p.body, in_main, may_fail, &mut flag_counter, &mut extra_locals);

    let mut formals: Vec<TypedVar> = p
        .formals
        .iter()
        .map(|(n, s)| TypedVar {
            name: n.clone(),
            sort: *s,
        })
        .collect();
    if threads_err {
        formals.push(TypedVar {
            name: ERR_FORMAL.into(),
            sort: Sort::Bool,
        });
    }

    let mut sorts: HashMap<String, Sort> = HashMap::new();
    for v in &formals {
        sorts.insert(v.name.clone(), v.sort);
    }
    let mut locals: Vec<TypedVar> = p
        .locals
        .iter()
        .map(|(n, s)| TypedVar {
            name: n.clone(),
            sort: *s,
        })
        .collect();
    locals.extend(extra_locals);
    for v in &locals {
        sorts.insert(v.name.clone(), v.sort);
    }

    let mut b = Builder {
        blocks: IndexMap::new(),
        current_label: String::new(),
        current_stmts: Vec::new(),
        virgin_entry: true,
        entry: String::new(),
        next_label: 0,
        used_labels: HashSet::new(),
        env: sorts.keys().map(|k| (k.clone(), 0)).collect(),
        next_ver: HashMap::new(),
        sorts,
        locals,
        exit_label: EXIT_LABEL.into(),
    };
    let entry = b.fresh_label();
    b.entry = entry.clone();
    b.open(entry);
    b.virgin_entry = true;

    let needs_exit = in_main || threads_err;
    let live = b.walk(&hstmts)?;

    if needs_exit {
        // Seal the fall-through end, route everything to one return block.
        if live || !in_main {
            if in_main {
                b.emit(Stmt::Assume(Expr::Bool(false)));
            } else {
                b.emit(Stmt::Assume(Expr::not(Expr::Var(ERR_FORMAL.into()))));
            }
        }
        b.close(Terminator::Goto(vec![EXIT_LABEL.into()]));
        b.used_labels.insert(EXIT_LABEL.into());
        b.open(EXIT_LABEL.into());
        b.close(Terminator::Return);
    } else {
        b.close(Terminator::Return);
    }

    let mut proc = Procedure {
        name: p.name.clone(),
        formals,
        locals: b.locals,
        blocks: b.blocks,
        entry: b.entry,
    };
    prune_unreachable(&mut proc);
    Ok(proc)
}

/// Drops blocks not reachable from the entry along goto edges.
fn prune_unreachable(p: &mut Procedure) {
    let mut reach: HashSet<String> = HashSet::new();
    let mut stack = vec![p.entry.clone()];
    while let Some(l) = stack.pop() {
        if !reach.insert(l.clone()) {
            continue;
        }
        if let Some(Block {
            term: Terminator::Goto(succs),
            ..
        }) = p.blocks.get(&l)
        {
            for s in succs {
                if !reach.contains(s) {
                    stack.push(s.clone());
                }
            }
        }
    }
    p.blocks.retain(|l, _| reach.contains(l));
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::parse;
    use crate::ir::callsites_of;

    fn lower_src(src: &str, depth: u32) -> CoreProgram {
        lower(&parse(src).unwrap(), depth).unwrap()
    }

    #[test]
    fn rejects_zero_depth() {
        let sp = parse("procedure main() { }").unwrap();
        assert!(matches!(lower(&sp, 0), Err(FrontendError::BadUnrollDepth)));
    }

    #[test]
    fn passifies_assignments_into_version_assumes() {
        let prog = lower_src(
            "procedure main() { var x: int; x := 0; x := x + 1; assert x == 1; }",
            3,
        );
        let main = prog.main();
        let assumes: Vec<&Expr> = main
            .blocks
            .values()
            .flat_map(|b| &b.stmts)
            .filter_map(|s| match s {
                Stmt::Assume(e) => Some(e),
                _ => None,
            })
            .collect();
        // x@2 == x@1 + 1 must appear somewhere
        let incr = Expr::bin(
            BinOp::Eq,
            Expr::Var("x@2".into()),
            Expr::bin(BinOp::Add, Expr::Var("x@1".into()), Expr::Int(1)),
        );
        assert!(assumes.iter().any(|e| **e == incr), "got {assumes:?}");
        // the violation branch assumes the negated assertion over x@2
        let viol = Expr::not(Expr::bin(
            BinOp::Eq,
            Expr::Var("x@2".into()),
            Expr::Int(1),
        ));
        assert!(assumes.iter().any(|e| **e == viol), "got {assumes:?}");
        // locals are never assigned in the core program
        assert!(main
            .blocks
            .values()
            .flat_map(|b| &b.stmts)
            .all(|s| matches!(s, Stmt::Assume(_) | Stmt::Call { .. })));
    }

    #[test]
    fn straight_line_main_is_sealed() {
        let prog = lower_src("procedure main() { var x: int; x := 4; }", 3);
        let main = prog.main();
        // some return block exists, and the only path into it runs through
        // an assume false seal
        let sealed = main.blocks.values().any(|b| {
            b.stmts
                .iter()
                .any(|s| matches!(s, Stmt::Assume(Expr::Bool(false))))
        });
        assert!(sealed);
    }

    #[test]
    fn while_true_unrolls_to_depth_copies() {
        let prog = lower_src(
            "procedure main() { var x: int; while (true) { x := x + 1; } }",
            3,
        );
        let main = prog.main();
        // exactly three copies of the loop body: three increment assumes
        // (merge assumes equate plain versions and do not count)
        let increments = main
            .blocks
            .values()
            .flat_map(|b| &b.stmts)
            .filter(|s| {
                matches!(s, Stmt::Assume(Expr::Binary(BinOp::Eq, _, rhs))
                    if matches!(&**rhs, Expr::Binary(BinOp::Add, _, _)))
            })
            .count();
        assert_eq!(increments, 3);
        // the cut seals the deepest copy: some block assumes the negated
        // guard of a fourth iteration
        let cut = Expr::not(Expr::Bool(true));
        assert!(main
            .blocks
            .values()
            .flat_map(|b| &b.stmts)
            .any(|s| matches!(s, Stmt::Assume(e) if *e == cut)));
    }

    #[test]
    fn recursion_is_unrolled_by_cloning() {
        let prog = lower_src(
            "procedure main() { call f(2); } procedure f(n: int) { if (n > 0) { call f(n - 1); } }",
            3,
        );
        assert!(prog.get("f@1").is_some());
        assert!(prog.get("f@3").is_some());
        assert!(prog.get("f@4").is_none());
        prog.validate().unwrap();
    }

    #[test]
    fn lowering_is_deterministic() {
        let src = r#"
            procedure main() {
                var x: int; var y: int;
                x := 0;
                while (x < 3) { x := x + 1; if (*) { y := y + x; } }
                call helper(y);
                assert y >= 0 || y < 0;
            }
            procedure helper(v: int) { assert v != 11; }
        "#;
        let a = lower_src(src, 4);
        let b = lower_src(src, 4);
        assert_eq!(a, b);
    }

    #[test]
    fn one_call_per_block_by_construction() {
        let prog = lower_src(
            r#"
            procedure main() { var a: int; call p(a); call p(a); call p(a); }
            procedure p(x: int) { assume x > 0; }
            "#,
            3,
        );
        prog.validate().unwrap();
        assert_eq!(callsites_of(prog.main()).len(), 3);
    }

    #[test]
    fn labels_pin_down_callsite_blocks() {
        let prog = lower_src(
            r#"
            procedure main() {
                var x: int;
                if (*) { L1: call foo(x); }
                L3: call baz(x);
            }
            procedure foo(a: int) { assume a > 0; }
            procedure baz(a: int) { assume a == 3; }
            "#,
            3,
        );
        let sites = callsites_of(prog.main());
        let labels: Vec<&str> = sites.iter().map(|s| s.label.as_str()).collect();
        assert_eq!(labels, vec!["L1", "L3"]);
    }

    #[test]
    fn entry_block_takes_leading_label() {
        let prog = lower_src(
            r#"
            procedure main() { call foo(); }
            procedure foo() {
                L5: if (*) { L6: assume true; } else { L7: assume true; }
                L8: assume true;
            }
            "#,
            3,
        );
        let foo = prog.get("foo").unwrap();
        assert_eq!(foo.entry, "L5");
        assert!(foo.blocks.contains_key("L6"));
        assert!(foo.blocks.contains_key("L8"));
    }

    #[test]
    fn callee_asserts_thread_a_failure_flag() {
        let prog = lower_src(
            r#"
            procedure main() { var x: int; call q(x); }
            procedure q(v: int) { assert v != 5; }
            "#,
            3,
        );
        let q = prog.get("q").unwrap();
        assert!(q.formals.iter().any(|f| f.name == "$err"));
        // caller passes a fresh flag as the extra actual
        let main = prog.main();
        let (_, actuals) = main
            .blocks
            .values()
            .find_map(|b| b.call())
            .expect("main calls q");
        assert_eq!(actuals.len(), 2);
        prog.validate().unwrap();
    }

    #[test]
    fn branch_merge_reconciles_versions() {
        let prog = lower_src(
            "procedure main() { var x: int; if (*) { x := 1; } else { x := 2; } assert x > 0; }",
            3,
        );
        let main = prog.main();
        // both tails must equate the merged version x@3
        let merged_eqs = main
            .blocks
            .values()
            .flat_map(|b| &b.stmts)
            .filter(|s| {
                matches!(s, Stmt::Assume(Expr::Binary(BinOp::Eq, lhs, _))
                    if matches!(&**lhs, Expr::Var(n) if n == "x@3"))
            })
            .count();
        assert_eq!(merged_eqs, 2);
    }
}
