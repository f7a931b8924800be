//! Client verification loop: set up a partition, iterate engine steps,
//! split and publish must-reach partitions, and steal back the latest own
//! partition by solver backtracking instead of a fresh setup.

use std::collections::BTreeSet;
use std::time::Instant;

use thiserror::Error;

use crate::ir::{CallTree, CoreProgram, Decision, DecisionKind, DynamicCallsite, Partition};
use crate::proto::{self, ClientId, WireStats};
use crate::si::{SIEngine, SIOutcome, SiError};
use crate::solver::{SolverError, SolverSession};
use crate::splitting::{choose_split, SplitPolicy, Strategy};
use crate::vcgen::{self, AssertionOrigin, NamedAssertion, Term};
use crate::Verdict;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("link closed")]
    LinkClosed,
    #[error("kill received")]
    Killed,
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error(transparent)]
    Si(#[from] SiError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

impl From<crate::vcgen::VcError> for ClientError {
    fn from(e: crate::vcgen::VcError) -> Self {
        ClientError::Si(SiError::Vc(e))
    }
}

pub type Result<T> = std::result::Result<T, ClientError>;

/// Requests a client can send; the link supplies the client id.
#[derive(Debug, Clone)]
pub enum Request {
    GetPartition,
    SendPartition(Partition),
    Pop,
    Outcome(Verdict, WireStats),
}

/// Replies as seen by the client loop.
#[derive(Debug, Clone)]
pub enum Reply {
    Grant(Partition),
    Ack { delta: f64 },
    PopReply(bool),
    Kill,
}

/// Duplex, per-client-FIFO channel to the coordinator.
pub trait CoordinatorLink {
    fn send(&mut self, req: Request) -> Result<()>;
    /// Blocks until the next reply.
    fn recv_blocking(&mut self) -> Result<Reply>;
    /// Non-blocking: everything already delivered.
    fn drain(&mut self) -> Result<Vec<Reply>>;
}

/// Wall clock (process mode) or a per-client virtual clock that advances
/// one tick per engine step (simulated mode).
#[derive(Debug, Clone)]
pub enum Clock {
    Real(Instant),
    Virtual { ticks: u64, secs_per_tick: f64 },
}

impl Clock {
    pub fn real() -> Clock {
        Clock::Real(Instant::now())
    }

    pub fn virtual_ticks(secs_per_tick: f64) -> Clock {
        Clock::Virtual {
            ticks: 0,
            secs_per_tick,
        }
    }

    pub fn now(&self) -> f64 {
        match self {
            Clock::Real(start) => start.elapsed().as_secs_f64(),
            Clock::Virtual {
                ticks,
                secs_per_tick,
            } => *ticks as f64 * secs_per_tick,
        }
    }

    fn tick(&mut self) {
        if let Clock::Virtual { ticks, .. } = self {
            *ticks += 1;
        }
    }
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub splitting: bool,
    /// Stop splitting after this many splits (testing hook).
    pub max_splits: Option<u64>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            splitting: true,
            max_splits: None,
        }
    }
}

/// A split event as the splitting client saw it.
#[derive(Debug, Clone)]
pub struct SplitRecord {
    pub parent: Partition,
    pub site: DynamicCallsite,
    pub avoid_child: Partition,
    pub must_reach_child: Partition,
}

#[derive(Debug, Default, Clone)]
pub struct ClientStats {
    pub partitions_solved: u64,
    pub splits: u64,
    pub steps: u64,
    pub steals: u64,
    pub inlined_union: BTreeSet<DynamicCallsite>,
    pub split_records: Vec<SplitRecord>,
}

/// One decision on the stack, with the state to restore when the matching
/// solver scope is popped on a steal-back.
struct DecisionEntry {
    decision: Decision,
    saved_open: BTreeSet<DynamicCallsite>,
    saved_tree: CallTree,
}

pub struct ClientRuntime<'p, L: CoordinatorLink> {
    pub id: ClientId,
    program: &'p CoreProgram,
    link: L,
    strategy: Strategy,
    policy: SplitPolicy,
    clock: Clock,
    opts: VerifyOptions,
    pub stats: ClientStats,
    session: Option<SolverSession>,
}

impl<'p, L: CoordinatorLink> ClientRuntime<'p, L> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: ClientId,
        program: &'p CoreProgram,
        link: L,
        session: SolverSession,
        strategy: Strategy,
        policy: SplitPolicy,
        clock: Clock,
        opts: VerifyOptions,
    ) -> Self {
        ClientRuntime {
            id,
            program,
            link,
            strategy,
            policy,
            clock,
            opts,
            stats: ClientStats::default(),
            session: Some(session),
        }
    }

    pub fn into_parts(self) -> (ClientStats, Option<SolverSession>) {
        (self.stats, self.session)
    }

    /// The client main loop: request a partition, verify it, report the
    /// outcome, repeat until the coordinator kills the run.
    pub fn run(&mut self) -> Result<()> {
        loop {
            self.link.send(Request::GetPartition)?;
            let rho = loop {
                match self.link.recv_blocking()? {
                    Reply::Grant(p) => break p,
                    Reply::Kill => return Ok(()),
                    Reply::Ack { delta } => self.policy.set_delta(delta),
                    Reply::PopReply(_) => {
                        return Err(ClientError::Protocol(
                            "unsolicited POP_REPLY while awaiting a grant".into(),
                        ));
                    }
                }
            };
            let before = self.stats.clone();
            let verdict = match self.verify(rho) {
                Ok(v) => v,
                Err(ClientError::Killed) => return Ok(()),
                Err(e) => return Err(e),
            };
            let stats = WireStats {
                inlined: self
                    .stats
                    .inlined_union
                    .iter()
                    .map(proto::site_to_wire)
                    .collect(),
                splits: self.stats.splits - before.splits,
                steps: self.stats.steps - before.steps,
            };
            let inconclusive = matches!(verdict, Verdict::Inconclusive(_));
            self.link.send(Request::Outcome(verdict, stats))?;
            if inconclusive {
                // the session may be dead (timeout kill); the coordinator
                // aborts the run on this outcome, so just await the kill
                loop {
                    if matches!(self.link.recv_blocking()?, Reply::Kill) {
                        return Ok(());
                    }
                }
            }
        }
    }

    /// Applies pending acknowledgments; surfaces a kill.
    fn poll_acks(&mut self) -> Result<()> {
        for r in self.link.drain()? {
            match r {
                Reply::Ack { delta } => self.policy.set_delta(delta),
                Reply::Kill => return Err(ClientError::Killed),
                other => {
                    return Err(ClientError::Protocol(format!(
                        "unexpected reply {other:?} while solving"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Solves one partition to a verdict. The verdict applies to the final
    /// partition the loop ended on; intermediate work is farmed back to
    /// the coordinator as must-reach partitions.
    pub fn verify(&mut self, rho: Partition) -> Result<Verdict> {
        let mut session = self.session.take().expect("session present");
        session.reset()?;
        let mut engine = match setup_partition(self.program, &rho, session) {
            Ok(e) => e,
            Err((e, session)) => {
                self.session = session;
                return Err(e);
            }
        };
        let result = self.verify_loop(&mut engine, &rho);
        self.stats.steps += engine.records.len() as u64;
        for c in engine.inlined.iter() {
            self.stats.inlined_union.insert(c.clone());
        }
        self.session = Some(engine.into_session());
        if result.is_ok() {
            self.stats.partitions_solved += 1;
        }
        result
    }

    fn verify_loop(&mut self, engine: &mut SIEngine, rho: &Partition) -> Result<Verdict> {
        let base_decisions = rho.decisions.clone();
        let baseline_depth = engine.session.depth();
        let mut dstack: Vec<DecisionEntry> = Vec::new();
        let mut uc: BTreeSet<DynamicCallsite> = BTreeSet::new();
        let mut splits_done: u64 = 0;

        loop {
            debug_assert_eq!(
                engine.session.depth() - baseline_depth,
                dstack.len(),
                "decision stack must mirror solver depth"
            );
            self.poll_acks()?;

            let outcome = match engine.si_step() {
                Ok(o) => o,
                Err(SiError::Unknown(reason)) => return Ok(Verdict::Inconclusive(reason)),
                Err(e) => return Err(e.into()),
            };
            self.clock.tick();

            match outcome {
                SIOutcome::Unsafe(trace) => return Ok(Verdict::Unsafe(trace)),
                SIOutcome::NoDecision { uc: new_uc, .. } => {
                    uc = new_uc;
                }
                SIOutcome::Safe => {
                    self.link.send(Request::Pop)?;
                    let yes = loop {
                        match self.link.recv_blocking()? {
                            Reply::PopReply(y) => break y,
                            Reply::Ack { delta } => self.policy.set_delta(delta),
                            Reply::Kill => return Err(ClientError::Killed),
                            Reply::Grant(_) => {
                                return Err(ClientError::Protocol(
                                    "unsolicited GRANT while awaiting POP_REPLY".into(),
                                ));
                            }
                        }
                    };
                    if !yes {
                        return Ok(Verdict::Safe);
                    }
                    // Steal back: this partition was solved; backtrack to
                    // the most recent avoid decision and flip it. Only
                    // avoid decisions are flipped; must-reach entries on
                    // the way are just popped.
                    self.stats.partitions_solved += 1;
                    self.stats.steals += 1;
                    let flipped = loop {
                        let entry = dstack.pop().ok_or_else(|| {
                            ClientError::Protocol(
                                "POP answered YES but no split is on the stack".into(),
                            )
                        })?;
                        engine.session.pop()?;
                        match entry.decision.kind {
                            DecisionKind::MustReach => continue,
                            DecisionKind::Avoid => break entry,
                        }
                    };
                    engine.open = flipped.saved_open.clone();
                    engine.inlined = flipped.saved_tree.clone();
                    let site = flipped.decision.site.clone();
                    engine.session.push()?;
                    let decision = Decision::must_reach(site.clone());
                    let term = vcgen::mr_chain(self.program, &site, &engine.ctx)?;
                    let name = engine.ctx.decision_assertion_name(&decision);
                    engine.session.assert_named(&NamedAssertion {
                        name,
                        term,
                        origin: AssertionOrigin::DecisionOrigin(decision.clone()),
                    })?;
                    dstack.push(DecisionEntry {
                        decision,
                        saved_open: flipped.saved_open,
                        saved_tree: flipped.saved_tree,
                    });
                }
            }

            // Split check runs after outcome handling.
            let split_allowed = self.opts.splitting
                && self
                    .opts
                    .max_splits
                    .is_none_or(|m| splits_done < m);
            if split_allowed && self.policy.time_to_split(self.clock.now()) {
                let mut decided: BTreeSet<DynamicCallsite> =
                    base_decisions.iter().map(|d| d.site.clone()).collect();
                decided.extend(dstack.iter().map(|e| e.decision.site.clone()));
                if let Some(site) =
                    choose_split(&engine.inlined, &uc, &decided, &mut self.strategy)
                {
                    let current = Partition {
                        tree: engine.inlined.clone(),
                        decisions: base_decisions
                            .iter()
                            .cloned()
                            .chain(dstack.iter().map(|e| e.decision.clone()))
                            .collect(),
                    };
                    let saved_open = engine.open.clone();
                    let saved_tree = engine.inlined.clone();

                    engine.session.push()?;
                    let decision = Decision::avoid(site.clone());
                    let term = vcgen::avoid_constraint(&site, &engine.ctx)?;
                    let name = engine.ctx.decision_assertion_name(&decision);
                    engine.session.assert_named(&NamedAssertion {
                        name,
                        term,
                        origin: AssertionOrigin::DecisionOrigin(decision.clone()),
                    })?;

                    let must_reach_child =
                        current.with_decision(Decision::must_reach(site.clone()));
                    self.link
                        .send(Request::SendPartition(must_reach_child.clone()))?;
                    self.stats.splits += 1;
                    splits_done += 1;
                    self.policy.mark_split(self.clock.now());
                    self.stats.split_records.push(SplitRecord {
                        parent: current.clone(),
                        site: site.clone(),
                        avoid_child: current.with_decision(decision.clone()),
                        must_reach_child,
                    });
                    dstack.push(DecisionEntry {
                        decision,
                        saved_open,
                        saved_tree,
                    });
                }
            }
        }
    }
}

/// Prepares a partition on a fresh session: inline the call tree in prefix
/// order, then assert every decision beneath the backtracking baseline.
/// On failure the session is handed back (when still usable) so it can be
/// reused.
#[allow(clippy::result_large_err)] // the error path carries the session
pub fn setup_partition<'p>(
    program: &'p CoreProgram,
    rho: &Partition,
    session: SolverSession,
) -> std::result::Result<SIEngine<'p>, (ClientError, Option<SolverSession>)> {
    if !rho.is_well_formed() {
        return Err((
            ClientError::Protocol("malformed partition: decisions off the tree".into()),
            Some(session),
        ));
    }
    for d in &rho.decisions {
        if d.site.is_root() {
            return Err((
                ClientError::Protocol("decision on the root callsite".into()),
                Some(session),
            ));
        }
    }
    let mut engine = match SIEngine::init(program, session) {
        Ok(e) => e,
        Err(e) => return Err((e.into(), None)),
    };
    let fail = |e: ClientError, engine: SIEngine<'p>| Err((e, Some(engine.into_session())));
    for site in rho.tree.prefix_order() {
        if site.is_root() {
            continue;
        }
        if let Err(e) = engine.inline(&site) {
            return fail(
                ClientError::Protocol(format!("partition tree cannot be inlined: {e}")),
                engine,
            );
        }
    }
    for d in &rho.decisions {
        let term = match d.kind {
            DecisionKind::Avoid => vcgen::avoid_constraint(&d.site, &engine.ctx),
            DecisionKind::MustReach => vcgen::mr_chain(program, &d.site, &engine.ctx),
        };
        let term = match term {
            Ok(t) => t,
            Err(e) => return fail(e.into(), engine),
        };
        let name = engine.ctx.decision_assertion_name(d);
        if let Err(e) = engine.session.assert_named(&NamedAssertion {
            name,
            term,
            origin: AssertionOrigin::DecisionOrigin(d.clone()),
        }) {
            return fail(e.into(), engine);
        }
    }
    Ok(engine)
}

/// Asserting both decisions of a split on the same site under the parent
/// VC must be unsatisfiable; exposed for the soundness checks.
pub fn contradictory_decision_terms(
    program: &CoreProgram,
    engine: &SIEngine,
    site: &DynamicCallsite,
) -> std::result::Result<(Term, Term), crate::vcgen::VcError> {
    Ok((
        vcgen::avoid_constraint(site, &engine.ctx)?,
        vcgen::mr_chain(program, site, &engine.ctx)?,
    ))
}
