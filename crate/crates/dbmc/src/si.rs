//! The sequential stratified-inlining engine.
//!
//! Each step performs an under-approximate check (all open callsites
//! blocked) hoping for an early counterexample, then an over-approximate
//! check (calls read as `assume true`) hoping for an early safety proof.
//! When neither decides, the callsites on the over-approximate model's
//! trace are inlined and the loop continues. The unsat core of a failed
//! under-approximate check is kept around: it names the callsites the
//! current safety argument depends on, which later guides splitting.

use std::collections::{BTreeSet, HashMap};

use thiserror::Error;

use crate::ir::{CallTree, CoreProgram, DynamicCallsite, Label, StaticCallsite, Terminator};
use crate::solver::{CheckResult, SolverError, SolverSession};
use crate::vcgen::{self, AssertionOrigin, NamedAssertion, Term, VCContext, VcError};
use crate::Verdict;

#[derive(Debug, Error)]
pub enum SiError {
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Vc(#[from] VcError),
    #[error("solver answered unknown: {0}")]
    Unknown(String),
    #[error("precondition violation: {0}")]
    Precondition(String),
    #[error("internal error: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, SiError>;

/// One step of an interprocedural path: an instance and a block in it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceStep {
    pub site: DynamicCallsite,
    pub block: Label,
}

/// Interprocedural execution path from `main`'s entry to its return.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Trace {
    pub steps: Vec<TraceStep>,
}

impl Trace {
    /// Whether the trace executes the given inlining instance.
    pub fn visits(&self, site: &DynamicCallsite) -> bool {
        self.steps.iter().any(|s| s.site == *site)
    }

    /// Dynamic callsites whose calling block lies on the trace.
    pub fn touched_callsites(&self, program: &CoreProgram) -> BTreeSet<DynamicCallsite> {
        let mut out = BTreeSet::new();
        for step in &self.steps {
            let Some(p) = program.get(step.site.proc_name()) else {
                continue;
            };
            if let Some(b) = p.blocks.get(&step.block) {
                if let Some((callee, _)) = b.call() {
                    out.insert(
                        step.site
                            .push(StaticCallsite::new(step.block.clone(), callee.clone())),
                    );
                }
            }
        }
        out
    }
}

impl std::fmt::Display for Trace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (i, s) in self.steps.iter().enumerate() {
            if i > 0 {
                write!(f, " -> ")?;
            }
            write!(f, "{}@{}", s.block, s.site)?;
        }
        Ok(())
    }
}

/// Result of one engine step.
#[derive(Debug, Clone, PartialEq)]
pub enum SIOutcome {
    Safe,
    Unsafe(Trace),
    NoDecision {
        /// Callsites named by the under-approximate unsat core.
        uc: BTreeSet<DynamicCallsite>,
        /// Callsites inlined during this step.
        inlined_now: BTreeSet<DynamicCallsite>,
        /// Open set after the step.
        new_open: BTreeSet<DynamicCallsite>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckKind {
    Sat,
    Unsat,
}

/// Record of one step, kept for tests and reports.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub under: CheckKind,
    pub over: Option<CheckKind>,
    pub uc_sites: BTreeSet<DynamicCallsite>,
    pub inlined_now: BTreeSet<DynamicCallsite>,
    pub open_after: BTreeSet<DynamicCallsite>,
    /// Trace extracted from whichever check was sat this step.
    pub trace: Option<Trace>,
}

/// Engine state: the open frontier, the inlined call tree, the symbol
/// context and the solver session.
pub struct SIEngine<'p> {
    pub program: &'p CoreProgram,
    pub open: BTreeSet<DynamicCallsite>,
    pub inlined: CallTree,
    pub ctx: VCContext,
    pub session: SolverSession,
    pub records: Vec<StepRecord>,
}

impl<'p> SIEngine<'p> {
    /// Asserts the partial VC of `main` and opens its callsites.
    pub fn init(program: &'p CoreProgram, session: SolverSession) -> Result<SIEngine<'p>> {
        let mut engine = SIEngine {
            program,
            open: BTreeSet::new(),
            inlined: CallTree::new(),
            ctx: VCContext::new(),
            session,
            records: Vec::new(),
        };
        let root = DynamicCallsite::root();
        let conjuncts = vcgen::pvc(program, program.main(), &root, &[], &mut engine.ctx)?;
        let name = engine.ctx.site_assertion_name("inl", &root);
        engine.session.assert_named(&NamedAssertion {
            name,
            term: Term::and(conjuncts),
            origin: AssertionOrigin::InlinedSite(root.clone()),
        })?;
        for s in crate::ir::callsites_of(program.main()) {
            engine.open.insert(root.push(s));
        }
        Ok(engine)
    }

    /// Gives the solver session back (for pooling).
    pub fn into_session(self) -> SolverSession {
        self.session
    }

    /// Inlines an open callsite: asserts its guarded partial VC and opens
    /// the callee's own callsites.
    pub fn inline(&mut self, c: &DynamicCallsite) -> Result<BTreeSet<DynamicCallsite>> {
        if !self.open.contains(c) {
            return Err(SiError::Precondition(format!(
                "{c} is not an open callsite"
            )));
        }
        let callee_name = &c.top().expect("open sites are never the root").callee;
        let callee = self
            .program
            .get(callee_name)
            .ok_or_else(|| VcError::UnknownProcedure(callee_name.clone()))?;
        let actuals = self.ctx.interface_vars(c)?.clone();
        let conjuncts = vcgen::pvc(self.program, callee, c, &actuals, &mut self.ctx)?;
        let guard = self.ctx.cvar(c)?;
        let name = self.ctx.site_assertion_name("inl", c);
        self.session.assert_named(&NamedAssertion {
            name,
            term: Term::implies(guard, Term::and(conjuncts)),
            origin: AssertionOrigin::InlinedSite(c.clone()),
        })?;
        self.open.remove(c);
        self.inlined.insert(c.clone());
        let mut children = BTreeSet::new();
        for s in crate::ir::callsites_of(callee) {
            children.insert(c.push(s));
        }
        self.open.extend(children.iter().cloned());
        Ok(children)
    }

    /// Maps unsat-core names back to the callsites they stand for.
    /// Decision assertions are not callsites and are dropped.
    fn core_to_sites(&self, names: &BTreeSet<String>) -> BTreeSet<DynamicCallsite> {
        names
            .iter()
            .filter_map(|n| self.ctx.site_of_assertion_name(n))
            .filter_map(|(origin, site)| match origin {
                AssertionOrigin::InlinedSite(_) | AssertionOrigin::BlockedSite(_) => Some(site),
                _ => None,
            })
            .collect()
    }

    /// One round of stratified inlining.
    pub fn si_step(&mut self) -> Result<SIOutcome> {
        // Under-approximate check: block every open callsite.
        self.session.push()?;
        for c in self.open.clone() {
            let term = vcgen::avoid_constraint(&c, &self.ctx)?;
            let name = self.ctx.site_assertion_name("blk", &c);
            self.session.assert_named(&NamedAssertion {
                name,
                term,
                origin: AssertionOrigin::BlockedSite(c.clone()),
            })?;
        }
        let uc = match self.session.check()? {
            CheckResult::Sat => {
                let trace = self.extract_trace()?;
                self.session.pop()?;
                self.records.push(StepRecord {
                    under: CheckKind::Sat,
                    over: None,
                    uc_sites: BTreeSet::new(),
                    inlined_now: BTreeSet::new(),
                    open_after: self.open.clone(),
                    trace: Some(trace.clone()),
                });
                return Ok(SIOutcome::Unsafe(trace));
            }
            CheckResult::Unsat(core) => {
                let uc = self.core_to_sites(&core);
                self.session.pop()?;
                uc
            }
            CheckResult::Unknown(reason) => {
                // a timed-out check may have killed the session; the
                // unknown answer must still surface as such
                let _ = self.session.pop();
                return Err(SiError::Unknown(reason));
            }
        };

        // Over-approximate check: calls at open sites read as assume true.
        match self.session.check()? {
            CheckResult::Unsat(_) => {
                self.records.push(StepRecord {
                    under: CheckKind::Unsat,
                    over: Some(CheckKind::Unsat),
                    uc_sites: uc,
                    inlined_now: BTreeSet::new(),
                    open_after: self.open.clone(),
                    trace: None,
                });
                Ok(SIOutcome::Safe)
            }
            CheckResult::Unknown(reason) => Err(SiError::Unknown(reason)),
            CheckResult::Sat => {
                let trace = self.extract_trace()?;
                let touched = trace.touched_callsites(self.program);
                let to_inline: BTreeSet<DynamicCallsite> =
                    self.open.intersection(&touched).cloned().collect();
                if to_inline.is_empty() {
                    return Err(SiError::Internal(
                        "over-approximate trace avoids every open callsite".into(),
                    ));
                }
                for c in &to_inline {
                    self.inline(c)?;
                }
                self.records.push(StepRecord {
                    under: CheckKind::Unsat,
                    over: Some(CheckKind::Sat),
                    uc_sites: uc.clone(),
                    inlined_now: to_inline.clone(),
                    open_after: self.open.clone(),
                    trace: Some(trace),
                });
                Ok(SIOutcome::NoDecision {
                    uc,
                    inlined_now: to_inline,
                    new_open: self.open.clone(),
                })
            }
        }
    }

    /// Reads the interprocedural path off the model's control-flow
    /// function, descending into inlined callees.
    pub fn extract_trace(&mut self) -> Result<Trace> {
        extract_model_trace(self.program, &self.inlined, &self.ctx, &mut self.session)
    }

    /// Runs steps until a verdict. The round bound only guards against
    /// an engine bug; progress is guaranteed because every `NoDecision`
    /// grows the inlined tree.
    pub fn run_to_verdict(&mut self) -> Result<Verdict> {
        for _ in 0..1_000_000u64 {
            match self.si_step() {
                Ok(SIOutcome::Safe) => return Ok(Verdict::Safe),
                Ok(SIOutcome::Unsafe(t)) => return Ok(Verdict::Unsafe(t)),
                Ok(SIOutcome::NoDecision { .. }) => continue,
                Err(SiError::Unknown(reason)) => return Ok(Verdict::Inconclusive(reason)),
                Err(e) => return Err(e),
            }
        }
        Err(SiError::Internal("engine failed to make progress".into()))
    }
}

/// The baseline sequential engine: stratified inlining to a verdict.
pub fn run_sequential(
    program: &CoreProgram,
    session: SolverSession,
) -> Result<(Verdict, SIEngine<'_>)> {
    let mut engine = SIEngine::init(program, session)?;
    let verdict = engine.run_to_verdict()?;
    Ok((verdict, engine))
}

/// Reads the interprocedural path off a model: follow the control-flow
/// function from `main`'s entry block, descending into a callee instance
/// whenever the current block's call is inlined. Valid right after a sat
/// check over the asserted VCs.
pub fn extract_model_trace(
    program: &CoreProgram,
    inlined: &CallTree,
    ctx: &VCContext,
    session: &mut SolverSession,
) -> Result<Trace> {
    // Batch-fetch f over every block id of every live instance.
    let mut keys: Vec<(DynamicCallsite, Label, i64)> = Vec::new();
    for site in inlined.iter() {
        for (label, id) in ctx.block_ids_of(site)? {
            keys.push((site.clone(), label, id));
        }
    }
    let queries: Vec<Term> = keys.iter().map(|(_, _, id)| Term::ctrl_app(*id)).collect();
    let values = session.model_values(&queries)?;
    let mut fvals: HashMap<(DynamicCallsite, Label), i64> = HashMap::new();
    for ((site, label, _), v) in keys.into_iter().zip(values) {
        let n = v.as_int().ok_or_else(|| {
            SiError::Internal("control-flow function returned a non-integer".into())
        })?;
        fvals.insert((site, label), n);
    }
    let mut steps = Vec::new();
    walk_model(
        program,
        inlined,
        ctx,
        &DynamicCallsite::root(),
        &fvals,
        &mut steps,
        0,
    )?;
    Ok(Trace { steps })
}

#[allow(clippy::too_many_arguments)]
fn walk_model(
    program: &CoreProgram,
    inlined: &CallTree,
    ctx: &VCContext,
    site: &DynamicCallsite,
    fvals: &HashMap<(DynamicCallsite, Label), i64>,
    steps: &mut Vec<TraceStep>,
    depth: usize,
) -> Result<()> {
    if depth > 10_000 {
        return Err(SiError::Internal("trace descent too deep".into()));
    }
    let proc = program
        .get(site.proc_name())
        .ok_or_else(|| VcError::UnknownProcedure(site.proc_name().to_string()))?;
    let mut label = proc.entry.clone();
    loop {
        steps.push(TraceStep {
            site: site.clone(),
            block: label.clone(),
        });
        let block = &proc.blocks[&label];
        if let Some((callee, _)) = block.call() {
            let child = site.push(StaticCallsite::new(label.clone(), callee.clone()));
            if inlined.contains(&child) {
                walk_model(program, inlined, ctx, &child, fvals, steps, depth + 1)?;
            }
        }
        match &block.term {
            Terminator::Return => return Ok(()),
            Terminator::Goto(succs) => {
                let v = *fvals.get(&(site.clone(), label.clone())).ok_or_else(|| {
                    SiError::Internal(format!(
                        "model value missing for f at block `{label}` of {site}"
                    ))
                })?;
                let next = succs
                    .iter()
                    .find(|s| ctx.block_id(site, s).map(|id| id == v).unwrap_or(false))
                    .ok_or_else(|| {
                        SiError::Internal(format!(
                            "f at `{label}` of {site} points to no successor (value {v})"
                        ))
                    })?;
                label = next.clone();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::testing::{acquire_session, guarded_calls_program};
    use crate::ir::MAIN;

    fn site(frames: &[(&str, &str)]) -> DynamicCallsite {
        let mut c = DynamicCallsite::root();
        for (l, p) in frames {
            c = c.push(StaticCallsite::new(*l, *p));
        }
        c
    }

    #[test]
    fn init_opens_the_three_example_callsites() {
        let prog = guarded_calls_program();
        let engine = SIEngine::init(&prog, acquire_session()).unwrap();
        let expected: BTreeSet<_> = [
            site(&[("L1", "foo")]),
            site(&[("L2", "bar")]),
            site(&[("L3", "baz")]),
        ]
        .into_iter()
        .collect();
        assert_eq!(engine.open, expected);
    }

    #[test]
    fn init_on_call_free_main_opens_nothing() {
        let prog = crate::frontend::lower(
            &crate::frontend::parse("procedure main() { var x: int; assert x == x; }").unwrap(),
            3,
        )
        .unwrap();
        let engine = SIEngine::init(&prog, acquire_session()).unwrap();
        assert!(engine.open.is_empty());
    }

    #[test]
    fn init_on_nested_program_opens_one_level() {
        let prog = crate::frontend::lower(
            &crate::frontend::parse(
                "procedure main() { call a(); } procedure a() { call b(); } procedure b() { }",
            )
            .unwrap(),
            3,
        )
        .unwrap();
        let engine = SIEngine::init(&prog, acquire_session()).unwrap();
        assert_eq!(engine.open.len(), 1);
        assert_eq!(engine.open.iter().next().unwrap().proc_name(), "a");
    }

    #[test]
    fn table_replay_two_steps_to_unsafe() {
        let prog = guarded_calls_program();
        let mut engine = SIEngine::init(&prog, acquire_session()).unwrap();

        // Step 1: under-approx unsat, over-approx sat, inline {foo, baz}.
        let out = engine.si_step().unwrap();
        let expected_inlined: BTreeSet<_> =
            [site(&[("L1", "foo")]), site(&[("L3", "baz")])].into_iter().collect();
        match &out {
            SIOutcome::NoDecision {
                inlined_now,
                new_open,
                ..
            } => {
                assert_eq!(inlined_now, &expected_inlined);
                let bar_only: BTreeSet<_> = [site(&[("L2", "bar")])].into_iter().collect();
                assert_eq!(new_open, &bar_only);
            }
            other => panic!("expected NoDecision, got {other:?}"),
        }
        let rec = &engine.records[0];
        assert_eq!(rec.under, CheckKind::Unsat);
        assert_eq!(rec.over, Some(CheckKind::Sat));

        // Step 2: under-approx sat, counterexample through inlined sites.
        let out = engine.si_step().unwrap();
        match out {
            SIOutcome::Unsafe(trace) => {
                assert!(trace.visits(&site(&[("L1", "foo")])));
                assert!(trace.visits(&site(&[("L3", "baz")])));
                assert!(!trace.visits(&site(&[("L2", "bar")])));
            }
            other => panic!("expected Unsafe, got {other:?}"),
        }
        assert_eq!(engine.records.len(), 2);
    }

    #[test]
    fn assume_false_main_is_safe_in_one_step() {
        let prog = crate::frontend::lower(
            &crate::frontend::parse("procedure main() { assume false; }").unwrap(),
            3,
        )
        .unwrap();
        let mut engine = SIEngine::init(&prog, acquire_session()).unwrap();
        assert_eq!(engine.si_step().unwrap(), SIOutcome::Safe);
        assert_eq!(engine.records.len(), 1);
    }

    #[test]
    fn inline_leaf_returns_no_children_and_twice_fails() {
        let prog = guarded_calls_program();
        let mut engine = SIEngine::init(&prog, acquire_session()).unwrap();
        let foo = site(&[("L1", "foo")]);
        let children = engine.inline(&foo).unwrap();
        assert!(children.is_empty());
        assert!(engine.inlined.contains(&foo));
        let err = engine.inline(&foo).unwrap_err();
        assert!(matches!(err, SiError::Precondition(_)));
    }

    #[test]
    fn run_sequential_matches_verdicts() {
        let prog = guarded_calls_program();
        let (verdict, _) = run_sequential(&prog, acquire_session()).unwrap();
        assert!(matches!(verdict, Verdict::Unsafe(_)));

        let safe = crate::frontend::lower(
            &crate::frontend::parse(
                "procedure main() { var x: int; x := 1; assert x == 1; }",
            )
            .unwrap(),
            3,
        )
        .unwrap();
        let (verdict, _) = run_sequential(&safe, acquire_session()).unwrap();
        assert_eq!(verdict, Verdict::Safe);
    }

    #[test]
    fn guarded_unreachable_callee_is_never_inlined() {
        let src = r#"
            procedure main() {
                var x: int;
                assume false;
                if (*) { call buggy(x); }
                assert x == x;
            }
            procedure buggy(v: int) { assert v != v; }
        "#;
        let prog =
            crate::frontend::lower(&crate::frontend::parse(src).unwrap(), 3).unwrap();
        let (verdict, engine) = run_sequential(&prog, acquire_session()).unwrap();
        assert_eq!(verdict, Verdict::Safe);
        assert!(engine
            .inlined
            .iter()
            .all(|c| c.proc_name() != "buggy"));
        let _ = MAIN;
    }

    /// Counterexample traces from a batch of random corpus programs all
    /// reach a return block of main and only traverse blocks whose
    /// control variable is true in the model.
    #[test]
    fn traces_are_model_consistent_on_random_programs() {
        let mut checked = 0;
        for seed in [7u64, 8] {
            for p in crate::harness::gen_corpus(seed, 15) {
                if checked >= 20 {
                    break;
                }
                let program = crate::harness::lower_corpus_program(&p, 3);
                let mut engine = SIEngine::init(&program, acquire_session()).unwrap();
                let verdict = engine.run_to_verdict().unwrap();
                if !matches!(verdict, crate::Verdict::Unsafe(_)) {
                    continue;
                }
                // reproduce the final under-approximate state so the
                // model is still live for control-variable queries
                engine.session.push().unwrap();
                for c in engine.open.clone() {
                    let term = vcgen::avoid_constraint(&c, &engine.ctx).unwrap();
                    let name = engine.ctx.site_assertion_name("blk", &c);
                    engine
                        .session
                        .assert_named(&NamedAssertion {
                            name,
                            term,
                            origin: AssertionOrigin::BlockedSite(c.clone()),
                        })
                        .unwrap();
                }
                assert_eq!(engine.session.check().unwrap(), crate::solver::CheckResult::Sat);
                let trace = engine.extract_trace().unwrap();

                // ends at a return block of main
                let last = trace.steps.last().unwrap();
                assert!(last.site.is_root());
                let main = program.main();
                assert!(matches!(
                    main.blocks[&last.block].term,
                    Terminator::Return
                ));

                // every traversed block has a true control variable
                let queries: Vec<Term> = trace
                    .steps
                    .iter()
                    .map(|s| engine.ctx.control_var(&s.site, &s.block).unwrap())
                    .collect();
                let values = engine.session.model_values(&queries).unwrap();
                assert!(
                    values.iter().all(|v| v.as_bool() == Some(true)),
                    "{}: trace passes a block with a false control variable",
                    p.name
                );
                engine.session.pop().unwrap();
                crate::harness::solver_pool::release(engine.into_session());
                checked += 1;
            }
        }
        assert!(checked >= 10, "not enough unsafe corpus programs");
    }

    /// Every NoDecision grows the inlined tree, and the number of rounds
    /// is bounded by the size of the full call tree.
    #[test]
    fn progress_is_bounded_by_the_full_call_tree() {
        for p in crate::harness::gen_corpus(9, 8) {
            let program = crate::harness::lower_corpus_program(&p, 3);
            let mut full = 0usize;
            let mut work = vec![DynamicCallsite::root()];
            while let Some(c) = work.pop() {
                full += 1;
                let proc = program.get(c.proc_name()).unwrap();
                for s in crate::ir::callsites_of(proc) {
                    work.push(c.push(s));
                }
            }
            let (_, engine) = run_sequential(&program, acquire_session()).unwrap();
            assert!(
                engine.records.len() <= full,
                "{}: {} rounds exceed the {} sites of the full tree",
                p.name,
                engine.records.len(),
                full
            );
            let mut last = 1;
            for rec in &engine.records {
                if rec.over == Some(CheckKind::Sat) {
                    assert!(!rec.inlined_now.is_empty(), "refinement must inline");
                }
                let now = last + rec.inlined_now.len();
                last = now;
            }
            assert_eq!(last, engine.inlined.len());
            crate::harness::solver_pool::release(engine.into_session());
        }
    }

    #[test]
    fn single_block_main_trace_is_just_the_entry() {
        use crate::ir::{Block, Procedure, Terminator};
        use indexmap::IndexMap;
        let main = Procedure {
            name: MAIN.into(),
            formals: vec![],
            locals: vec![],
            blocks: IndexMap::from([(
                "E".into(),
                Block {
                    label: "E".into(),
                    stmts: vec![],
                    term: Terminator::Return,
                },
            )]),
            entry: "E".into(),
        };
        let prog = crate::ir::CoreProgram {
            procedures: IndexMap::from([(MAIN.to_string(), main)]),
        };
        let mut engine = SIEngine::init(&prog, acquire_session()).unwrap();
        match engine.si_step().unwrap() {
            SIOutcome::Unsafe(trace) => {
                assert_eq!(trace.steps.len(), 1);
                assert_eq!(trace.steps[0].block, "E");
                assert!(trace.steps[0].site.is_root());
            }
            other => panic!("single return block is reachable, got {other:?}"),
        }
        crate::harness::solver_pool::release(engine.into_session());
    }

    #[test]
    fn avoided_callsite_never_appears_on_a_trace() {
        let prog = guarded_calls_program();
        let mut engine = SIEngine::init(&prog, acquire_session()).unwrap();
        let bar = site(&[("L2", "bar")]);
        let term = vcgen::avoid_constraint(&bar, &engine.ctx).unwrap();
        engine
            .session
            .assert_named(&NamedAssertion {
                name: "dec!avoid-l2".into(),
                term,
                origin: AssertionOrigin::DecisionOrigin(crate::ir::Decision::avoid(
                    bar.clone(),
                )),
            })
            .unwrap();
        loop {
            match engine.si_step().unwrap() {
                SIOutcome::NoDecision { .. } => {
                    for rec in &engine.records {
                        if let Some(t) = &rec.trace {
                            assert!(t.steps.iter().all(|s| s.block != "L2"));
                        }
                    }
                }
                SIOutcome::Unsafe(t) => {
                    assert!(t.steps.iter().all(|s| s.block != "L2"));
                    break;
                }
                SIOutcome::Safe => panic!("example program stays unsafe without bar"),
            }
        }
        crate::harness::solver_pool::release(engine.into_session());
    }

    #[test]
    fn trace_follows_model_through_foo() {
        // Counterexample trace of the example program program must run foo's
        // then-branch (d true) because the violation needs z == 1.
        let prog = guarded_calls_program();
        let mut engine = SIEngine::init(&prog, acquire_session()).unwrap();
        let _ = engine.si_step().unwrap();
        let out = engine.si_step().unwrap();
        let SIOutcome::Unsafe(trace) = out else {
            panic!("expected unsafe");
        };
        let foo = site(&[("L1", "foo")]);
        let foo_blocks: Vec<&str> = trace
            .steps
            .iter()
            .filter(|s| s.site == foo)
            .map(|s| s.block.as_str())
            .collect();
        assert_eq!(foo_blocks.first(), Some(&"L5"));
        assert!(foo_blocks.contains(&"L6"));
        assert!(!foo_blocks.contains(&"L7"));
        assert_eq!(foo_blocks.last(), Some(&"L8"));
    }
}
