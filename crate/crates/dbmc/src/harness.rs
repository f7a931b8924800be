//! Run orchestration: solver discovery and pooling, the eager full-inline
//! oracle, corpus generation, run reports and the dissimilarity metric.

use std::collections::{BTreeSet, HashMap};
use std::path::PathBuf;
use std::sync::{Mutex, OnceLock};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::client::SplitRecord;
use crate::ir::{callsites_of, CallTree, CoreProgram, DynamicCallsite};
use crate::si::{extract_model_trace, SiError};
use crate::solver::{CheckResult, SolverConfig, SolverError, SolverSession};
use crate::vcgen::{self, Term, VCContext};
use crate::Verdict;

// ---------------------------------------------------------------------
// Solver discovery.

fn which(bin: &str) -> Option<PathBuf> {
    let path = std::env::var_os("PATH")?;
    for dir in std::env::split_paths(&path) {
        let cand = dir.join(bin);
        if cand.is_file() {
            return Some(cand);
        }
    }
    None
}

fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .canonicalize()
        .unwrap_or_else(|_| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../.."))
}

fn wasm_wrapper_dir() -> PathBuf {
    repo_root().join("tools/z3-wasm")
}

/// Installs the bundled WebAssembly solver shim on first use.
fn ensure_wrapper_installed() -> Result<PathBuf, String> {
    static INSTALL: OnceLock<Result<PathBuf, String>> = OnceLock::new();
    INSTALL
        .get_or_init(|| {
            let dir = wasm_wrapper_dir();
            let script = dir.join("z3_stdio.js");
            if !script.is_file() {
                return Err(format!("solver shim missing at {}", script.display()));
            }
            if dir.join("node_modules/z3-solver").is_dir() {
                return Ok(script);
            }
            let status = std::process::Command::new("npm")
                .arg("install")
                .current_dir(&dir)
                .status()
                .map_err(|e| format!("npm not runnable: {e}"))?;
            if !status.success() {
                return Err("npm install for the solver shim failed".into());
            }
            Ok(script)
        })
        .clone()
}

/// Resolves the solver command: `DBMC_SOLVER`, then a `z3` binary on
/// PATH, then the bundled WebAssembly shim.
pub fn default_solver_config() -> SolverConfig {
    if let Ok(cmd) = std::env::var("DBMC_SOLVER") {
        let parts: Vec<String> = cmd.split_whitespace().map(String::from).collect();
        if !parts.is_empty() {
            return SolverConfig::new(parts);
        }
    }
    if which("z3").is_some() {
        return SolverConfig::new(vec!["z3".into(), "-in".into()]);
    }
    match ensure_wrapper_installed() {
        Ok(script) => SolverConfig::new(vec![
            "node".into(),
            script.to_string_lossy().into_owned(),
        ]),
        Err(e) => panic!("no SMT solver available: {e}; set DBMC_SOLVER"),
    }
}

/// Parses a user-supplied solver command line (whitespace separated).
pub fn solver_config_from_cmd(cmd: &str, soft_timeout: Duration) -> SolverConfig {
    let parts: Vec<String> = cmd.split_whitespace().map(String::from).collect();
    let mut cfg = if parts.is_empty() {
        default_solver_config()
    } else {
        SolverConfig::new(parts)
    };
    cfg.soft_timeout = soft_timeout;
    cfg
}

// ---------------------------------------------------------------------
// Session pool: solver processes are expensive to spawn, sessions reset
// to pristine state, so runs share them.

pub mod solver_pool {
    use super::*;

    fn pool() -> &'static Mutex<HashMap<String, Vec<SolverSession>>> {
        static POOL: OnceLock<Mutex<HashMap<String, Vec<SolverSession>>>> = OnceLock::new();
        POOL.get_or_init(|| Mutex::new(HashMap::new()))
    }

    fn key(config: &SolverConfig) -> String {
        format!("{}#{}", config.cmd.join(" "), config.soft_timeout.as_millis())
    }

    pub fn acquire(config: &SolverConfig) -> Result<SolverSession, SolverError> {
        if let Some(s) = pool().lock().unwrap().entry(key(config)).or_default().pop() {
            return Ok(s);
        }
        SolverSession::start(config.clone())
    }

    /// Idle sessions kept per solver command; each one is a live process.
    const MAX_IDLE: usize = 8;

    /// Returns a session to the pool; dead or unresettable sessions are
    /// dropped, as is anything beyond the idle cap.
    pub fn release(mut session: SolverSession) {
        if session.is_dead() {
            return;
        }
        let k = key_of(&session);
        if session.reset().is_ok() {
            let mut pool = pool().lock().unwrap();
            let slot = pool.entry(k).or_default();
            if slot.len() < MAX_IDLE {
                slot.push(session);
            }
        }
    }

    fn key_of(session: &SolverSession) -> String {
        key(session.config())
    }
}

// ---------------------------------------------------------------------
// Full-inlining oracle.

/// Eagerly inlines every dynamic callsite into one monolithic VC and runs
/// a single satisfiability check. The eager route is the independent
/// baseline the lazy engine is measured against.
pub fn full_inline_oracle(
    program: &CoreProgram,
    mut session: SolverSession,
) -> Result<(Verdict, SolverSession), SiError> {
    let mut ctx = VCContext::new();
    let mut tree = CallTree::new();
    let root = DynamicCallsite::root();
    let conj = vcgen::pvc(program, program.main(), &root, &[], &mut ctx)?;
    session.assert_term(&Term::and(conj))?;

    let mut work: Vec<DynamicCallsite> = callsites_of(program.main())
        .into_iter()
        .map(|s| root.push(s))
        .collect();
    let mut expanded: u64 = 0;
    while let Some(c) = work.pop() {
        expanded += 1;
        if expanded > 200_000 {
            return Err(SiError::Internal(
                "full-inline expansion exceeds the size bound".into(),
            ));
        }
        let callee_name = &c.top().expect("non-root").callee;
        let callee = program
            .get(callee_name)
            .ok_or_else(|| vcgen::VcError::UnknownProcedure(callee_name.clone()))?;
        let actuals = ctx.interface_vars(&c)?.clone();
        let conj = vcgen::pvc(program, callee, &c, &actuals, &mut ctx)?;
        let guard = ctx.cvar(&c)?;
        session.assert_term(&Term::implies(guard, Term::and(conj)))?;
        tree.insert(c.clone());
        for s in callsites_of(callee) {
            work.push(c.push(s));
        }
    }

    let verdict = match session.check()? {
        CheckResult::Sat => {
            let trace = extract_model_trace(program, &tree, &ctx, &mut session)?;
            Verdict::Unsafe(trace)
        }
        CheckResult::Unsat(_) => Verdict::Safe,
        CheckResult::Unknown(reason) => Verdict::Inconclusive(reason),
    };
    Ok((verdict, session))
}

// ---------------------------------------------------------------------
// Corpus generation: acyclic multi-procedure programs with a known
// safe/unsafe construction toggle. Golden verdicts still come from the
// oracle, never from the toggle.

#[derive(Debug, Clone)]
pub struct CorpusProgram {
    pub name: String,
    pub source: String,
    /// What the generator aimed for; verified against the oracle in tests.
    pub planted_unsafe: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct CorpusShape {
    /// Call-chain depth from `main` to the planted assertion.
    pub depth: u32,
    /// Decorative callees per layer.
    pub fanout: u32,
    /// Rough density of decorative statements.
    pub clutter: u32,
}

pub fn gen_corpus(seed: u64, n: usize) -> Vec<CorpusProgram> {
    (0..n)
        .map(|i| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b97f4a7c15) ^ (i as u64));
            let shape = CorpusShape {
                depth: 2 + (i as u32 % 3),
                fanout: 1 + (i as u32 / 3) % 3,
                clutter: 1 + (i as u32 % 4),
            };
            let planted_unsafe = i % 2 == 1;
            let tag = if planted_unsafe { "u" } else { "s" };
            CorpusProgram {
                name: format!("p{i:03}{tag}"),
                source: gen_program(&mut rng, shape, planted_unsafe),
                planted_unsafe,
            }
        })
        .collect()
}

/// One generated program. The planted assertion sits at the bottom of an
/// unconditional call chain; the safe variant constrains the chained
/// value in `main` so the assertion cannot fire, the unsafe variant
/// leaves it unconstrained. Decorative procedures, branches and loops
/// around the chain are safe by construction.
fn gen_program(rng: &mut ChaCha8Rng, shape: CorpusShape, planted_unsafe: bool) -> String {
    let mut out = String::new();
    let depth = shape.depth.max(1);
    let magic = rng.gen_range(3..20);

    // main
    out.push_str("procedure main() {\n");
    out.push_str("  var u: int;\n  var w: int;\n  var g: bool;\n");
    decorative_stmts(rng, &mut out, shape.clutter, "w", "g", 1);
    if !planted_unsafe {
        let slack = rng.gen_range(1..5);
        out.push_str(&format!("  assume u > {};\n", magic + slack));
    }
    out.push_str("  call chain1(u);\n");
    for j in 0..shape.fanout {
        if rng.gen_bool(0.7) {
            out.push_str(&format!(
                "  if (*) {{ call aux1_{j}(w); }}\n"
            ));
        }
    }
    out.push_str("}\n\n");

    // chain procedures
    for d in 1..=depth {
        out.push_str(&format!("procedure chain{d}(v: int) {{\n"));
        out.push_str("  var x: int;\n  var h: bool;\n");
        decorative_stmts(rng, &mut out, shape.clutter, "x", "h", d);
        if d < depth {
            out.push_str(&format!("  call chain{}(v);\n", d + 1));
            if rng.gen_bool(0.5) {
                out.push_str(&format!("  if (*) {{ call aux{d}_0(x); }}\n"));
            }
        } else {
            out.push_str(&format!("  assert v != {magic};\n"));
        }
        out.push_str("}\n\n");
    }

    // decorative procedures per layer
    for d in 1..=depth {
        for j in 0..shape.fanout {
            out.push_str(&format!("procedure aux{d}_{j}(a: int) {{\n"));
            out.push_str("  var y: int;\n");
            let c = rng.gen_range(0..10);
            let k = rng.gen_range(0..5);
            match rng.gen_range(0..3) {
                0 => {
                    out.push_str(&format!("  assume y <= a + {c};\n"));
                    out.push_str(&format!("  assert y <= a + {};\n", c + k));
                }
                1 => {
                    out.push_str(&format!("  y := a * {};\n", rng.gen_range(1..4)));
                    out.push_str("  assume y == y;\n");
                }
                _ => {
                    out.push_str(&format!("  if (a > {c}) {{ y := a; }} else {{ y := {c}; }}\n"));
                    out.push_str(&format!("  assert y >= ite(a > {c}, a, {c});\n"));
                }
            }
            if d < depth && rng.gen_bool(0.4) {
                out.push_str(&format!("  if (*) {{ call aux{}_{j}(y); }}\n", d + 1));
            }
            out.push_str("}\n\n");
        }
    }
    out
}

fn decorative_stmts(
    rng: &mut ChaCha8Rng,
    out: &mut String,
    clutter: u32,
    ivar: &str,
    bvar: &str,
    layer: u32,
) {
    for _ in 0..clutter {
        match rng.gen_range(0..5) {
            0 => {
                let c = rng.gen_range(0..8);
                out.push_str(&format!("  {ivar} := {ivar} + {c};\n"));
            }
            1 => {
                let c = rng.gen_range(0..8);
                out.push_str(&format!("  assume {ivar} <= {ivar} + {c};\n"));
            }
            2 => {
                out.push_str(&format!(
                    "  if ({bvar}) {{ {ivar} := {ivar} + 1; }} else {{ {ivar} := {ivar} - 1; }}\n"
                ));
            }
            3 => {
                let c = rng.gen_range(1..4);
                out.push_str(&format!(
                    "  while (*) {{ {ivar} := {ivar} + {c}; }}\n"
                ));
            }
            _ => {
                let c = rng.gen_range(0..6);
                out.push_str(&format!(
                    "  {ivar} := ite({bvar}, {ivar} + {c}, {ivar} - {});\n",
                    layer
                ));
            }
        }
    }
}

/// Parses and lowers a generated program.
pub fn lower_corpus_program(p: &CorpusProgram, depth: u32) -> CoreProgram {
    let sp = crate::frontend::parse(&p.source)
        .unwrap_or_else(|e| panic!("generated program {} does not parse: {e}", p.name));
    crate::frontend::lower(&sp, depth)
        .unwrap_or_else(|e| panic!("generated program {} does not lower: {e}", p.name))
}

/// Seed and size of the frozen corpus the acceptance gate runs on.
pub const CORPUS_SEED: u64 = 0xdb3c;
pub const CORPUS_SIZE: usize = 50;

pub fn frozen_corpus() -> Vec<CorpusProgram> {
    gen_corpus(CORPUS_SEED, CORPUS_SIZE)
}

/// Solves one serialized partition from scratch, sequentially and without
/// splitting: what a fresh client would conclude about it.
pub fn solve_partition_sequential(
    program: &CoreProgram,
    rho: &crate::ir::Partition,
    solver: &SolverConfig,
) -> Result<(Verdict, Vec<crate::si::StepRecord>), String> {
    let session = solver_pool::acquire(solver).map_err(|e| e.to_string())?;
    let mut engine = crate::client::setup_partition(program, rho, session).map_err(
        |(e, session)| {
            if let Some(s) = session {
                solver_pool::release(s);
            }
            e.to_string()
        },
    )?;
    let verdict = engine.run_to_verdict().map_err(|e| e.to_string())?;
    let records = engine.records.clone();
    solver_pool::release(engine.into_session());
    Ok((verdict, records))
}

// ---------------------------------------------------------------------
// Metrics and reports.

/// Search dissimilarity of client `i` against client `j`:
/// `1 - |Li ∩ Lj| / |Li|`. Asymmetric; undefined for an empty `Li`.
pub fn dissimilarity(
    li: &BTreeSet<DynamicCallsite>,
    lj: &BTreeSet<DynamicCallsite>,
) -> Option<f64> {
    if li.is_empty() {
        return None;
    }
    let shared = li.intersection(lj).count();
    Some(1.0 - shared as f64 / li.len() as f64)
}

#[derive(Debug, Clone)]
pub struct ClientReport {
    pub id: u64,
    pub inlined: BTreeSet<DynamicCallsite>,
    pub splits: u64,
    pub partitions_solved: u64,
    pub steps: u64,
    pub steals: u64,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub verdict: Verdict,
    pub wall: Duration,
    pub clients: Vec<ClientReport>,
    pub dispatches: u64,
    pub max_queue_depth: usize,
    pub partitions_created: u64,
    /// Split events (simulated mode).
    pub split_records: Vec<SplitRecord>,
}

impl RunReport {
    pub fn total_steps(&self) -> u64 {
        self.clients.iter().map(|c| c.steps).sum()
    }

    /// Longest per-client step count: the virtual makespan of the run.
    pub fn makespan_steps(&self) -> u64 {
        self.clients.iter().map(|c| c.steps).max().unwrap_or(0)
    }

    /// Pairwise dissimilarities over clients that inlined anything.
    pub fn dissimilarities(&self) -> Vec<(u64, u64, f64)> {
        let mut out = Vec::new();
        for a in &self.clients {
            for b in &self.clients {
                if a.id == b.id {
                    continue;
                }
                if let Some(d) = dissimilarity(&a.inlined, &b.inlined) {
                    out.push((a.id, b.id, d));
                }
            }
        }
        out
    }

    pub fn csv_header() -> &'static str {
        "program,mode,clients,strategy,seed,verdict,steps_total,makespan,splits,dispatches"
    }

    pub fn csv_row(
        &self,
        program: &str,
        mode: &str,
        clients: usize,
        strategy: &str,
        seed: u64,
    ) -> String {
        format!(
            "{program},{mode},{clients},{strategy},{seed},{},{},{},{},{}",
            self.verdict.label(),
            self.total_steps(),
            self.makespan_steps(),
            self.clients.iter().map(|c| c.splits).sum::<u64>(),
            self.dispatches
        )
    }
}

/// Non-gating report: 1-vs-4-client simulated speedup on the hardest
/// corpus programs (ranked by sequential step count), plus a best-of-5
/// randomized-strategy comparison in the shape of the published
/// experiment. Virtual makespan stands in for wall-clock time.
pub fn speedup_smoke(
    seed: u64,
    solver: &SolverConfig,
    programs: usize,
    csv: bool,
) -> Result<String, String> {
    use crate::sim::{run_simulated, SimConfig};
    use crate::splitting::StrategyKind;

    let corpus = gen_corpus(seed, 20);
    let mut ranked: Vec<(String, CoreProgram, u64)> = Vec::new();
    for p in &corpus {
        let program = lower_corpus_program(p, 3);
        let session = solver_pool::acquire(solver).map_err(|e| e.to_string())?;
        let (_, engine) =
            crate::si::run_sequential(&program, session).map_err(|e| e.to_string())?;
        let steps = engine.records.len() as u64;
        solver_pool::release(engine.into_session());
        ranked.push((p.name.clone(), program, steps));
    }
    ranked.sort_by_key(|(_, _, steps)| std::cmp::Reverse(*steps));
    ranked.truncate(programs);

    let mut out = String::new();
    if csv {
        out.push_str(RunReport::csv_header());
        out.push('\n');
    } else {
        out.push_str("speedup smoke (virtual makespan, 1 vs 4 clients):\n");
    }
    for (name, program, seq_steps) in &ranked {
        let r1 = run_simulated(
            program,
            &SimConfig::new(1, seed, StrategyKind::ProofGuided, solver.clone()),
        );
        let r4 = run_simulated(
            program,
            &SimConfig::new(4, seed, StrategyKind::ProofGuided, solver.clone()),
        );
        if csv {
            out.push_str(&r1.csv_row(name, "sim", 1, "proof-guided", seed));
            out.push('\n');
            out.push_str(&r4.csv_row(name, "sim", 4, "proof-guided", seed));
            out.push('\n');
        } else {
            out.push_str(&format!(
                "{name}: seq_steps={seq_steps} makespan1={} makespan4={} verdict={}\n",
                r1.makespan_steps(),
                r4.makespan_steps(),
                r4.verdict.label()
            ));
        }
        let mut best_random: Option<u64> = None;
        for s in 0..5u64 {
            let r = run_simulated(
                program,
                &SimConfig::new(
                    4,
                    seed.wrapping_add(s),
                    StrategyKind::Random,
                    solver.clone(),
                ),
            );
            if csv {
                out.push_str(&r.csv_row(name, "sim", 4, "random", seed.wrapping_add(s)));
                out.push('\n');
            }
            best_random =
                Some(best_random.map_or(r.makespan_steps(), |b| b.min(r.makespan_steps())));
        }
        if !csv {
            out.push_str(&format!(
                "{name}: best-of-5 random makespan4={}\n",
                best_random.unwrap_or(0)
            ));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------
// Test support: shared fixtures for unit, integration and acceptance
// tests.

pub mod testing {
    use super::*;
    use crate::ir::StaticCallsite;

    pub fn test_solver_config() -> SolverConfig {
        default_solver_config()
    }

    pub fn acquire_session() -> SolverSession {
        solver_pool::acquire(&test_solver_config()).expect("solver session")
    }

    pub fn release_session(session: SolverSession) {
        solver_pool::release(session);
    }

    pub fn guarded_calls_source() -> String {
        let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("testdata/guarded_calls.dbmc");
        std::fs::read_to_string(&path)
            .unwrap_or_else(|e| panic!("cannot read {}: {e}", path.display()))
    }

    /// The reconstructed guarded-calls example program, lowered.
    pub fn guarded_calls_program() -> CoreProgram {
        let sp = crate::frontend::parse(&guarded_calls_source()).expect("example program parses");
        crate::frontend::lower(&sp, 3).expect("example program lowers")
    }

    /// Seeded random prefix-closed tree plus an unsat-core-like set that
    /// mixes tree members with open children.
    pub fn synthetic_tree_and_core(
        seed: u64,
    ) -> (CallTree, BTreeSet<DynamicCallsite>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut nodes = vec![DynamicCallsite::root()];
        let target = rng.gen_range(1..25);
        while nodes.len() < target {
            let parent = nodes[rng.gen_range(0..nodes.len())].clone();
            let child = parent.push(StaticCallsite::new(
                format!("L{}", rng.gen_range(0..6)),
                format!("p{}", rng.gen_range(0..5)),
            ));
            if !nodes.contains(&child) {
                nodes.push(child);
            }
        }
        let tree = CallTree::from_sites(nodes.iter().cloned());
        let mut uc = BTreeSet::new();
        for node in tree.iter() {
            if rng.gen_bool(0.45) {
                uc.insert(node.clone());
            }
        }
        // open members: children hanging off the tree
        for node in nodes.iter() {
            if rng.gen_bool(0.25) {
                uc.insert(node.push(StaticCallsite::new(
                    format!("X{}", rng.gen_range(0..4)),
                    format!("q{}", rng.gen_range(0..4)),
                )));
            }
        }
        (tree, uc)
    }

    /// Independent argmax over every candidate, for checking the
    /// proof-guided choice.
    pub fn brute_force_split(
        tree: &CallTree,
        uc: &BTreeSet<DynamicCallsite>,
    ) -> Option<DynamicCallsite> {
        let mut candidates: Vec<&DynamicCallsite> = uc
            .iter()
            .filter(|c| !c.is_root() && tree.contains(c))
            .collect();
        candidates.sort();
        let mut best: Option<(usize, &DynamicCallsite)> = None;
        for c in candidates {
            let mut score = 0;
            for m in uc {
                if c.is_prefix_of(m) {
                    score += 1;
                }
            }
            best = match best {
                Some((bs, bc)) if bs >= score => Some((bs, bc)),
                _ => Some((score, c)),
            };
        }
        best.map(|(_, c)| c.clone())
    }
}
