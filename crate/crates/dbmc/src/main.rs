//! `dbmc` command line: sequential and distributed bounded model checking
//! of `.dbmc` programs.
//!
//! Exit codes: 0 safe, 1 unsafe, 2 inconclusive, 3 usage/protocol error.

use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Parser, Subcommand};

use dbmc::client::{ClientRuntime, Clock, VerifyOptions};
use dbmc::harness::{self, solver_pool, RunReport};
use dbmc::ir::CoreProgram;
use dbmc::net::{self, TcpLink};
use dbmc::server::ServerConfig;
use dbmc::si;
use dbmc::sim::{run_simulated, SimConfig};
use dbmc::splitting::{SplitPolicy, Strategy, StrategyKind, DELTA_C_DEFAULT, K_DEFAULT};
use dbmc::Verdict;

#[derive(Parser)]
#[command(name = "dbmc", about = "distributed bounded model checker", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Sequential stratified inlining on one program.
    Seq {
        file: PathBuf,
        #[arg(long, default_value_t = 3)]
        depth: u32,
        #[arg(long)]
        solver: Option<String>,
        /// Print one line per engine step.
        #[arg(short, long)]
        verbose: bool,
        #[arg(long, default_value_t = 60.0)]
        timeout: f64,
    },
    /// Eager full-inlining check (the oracle baseline).
    Oracle {
        file: PathBuf,
        #[arg(long, default_value_t = 3)]
        depth: u32,
        #[arg(long)]
        solver: Option<String>,
        #[arg(long, default_value_t = 60.0)]
        timeout: f64,
    },
    /// Distributed run: simulated cluster or real processes.
    Run {
        file: PathBuf,
        #[arg(long, default_value_t = 2)]
        clients: usize,
        /// In-process deterministic cluster instead of OS processes.
        #[arg(long)]
        sim: bool,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = "proof-guided")]
        strategy: String,
        #[arg(long, default_value_t = 3)]
        depth: u32,
        #[arg(long)]
        solver: Option<String>,
        #[arg(long, default_value_t = DELTA_C_DEFAULT)]
        delta_c: f64,
        #[arg(long, default_value_t = K_DEFAULT)]
        k: f64,
        #[arg(long, default_value_t = 600.0)]
        timeout: f64,
    },
    /// Coordinator for a process-mode cluster.
    Server {
        #[arg(long, default_value_t = 0)]
        port: u16,
        #[arg(long, default_value_t = 2)]
        clients_expected: usize,
        #[arg(long, default_value_t = 600.0)]
        timeout: f64,
        #[arg(long, default_value_t = DELTA_C_DEFAULT)]
        delta_c: f64,
        #[arg(long, default_value_t = K_DEFAULT)]
        k: f64,
    },
    /// Worker connecting to a coordinator.
    Client {
        file: PathBuf,
        #[arg(long)]
        server: String,
        #[arg(long)]
        id: Option<u64>,
        #[arg(long, default_value = "proof-guided")]
        strategy: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        depth: u32,
        #[arg(long)]
        solver: Option<String>,
        #[arg(long, default_value_t = DELTA_C_DEFAULT)]
        delta_c: f64,
        #[arg(long, default_value_t = K_DEFAULT)]
        k: f64,
        #[arg(long, default_value_t = 60.0)]
        timeout: f64,
    },
    /// Generate a seeded corpus of programs.
    Gen {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(short = 'n', long, default_value_t = 10)]
        count: usize,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Informational speedup and strategy-comparison report (CSV).
    Report {
        #[arg(long)]
        csv: bool,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        solver: Option<String>,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap's own exit codes collide with the verdict codes
            let _ = e.print();
            std::process::exit(3);
        }
    };
    let code = match run(cli) {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("dbmc: {msg}");
            3
        }
    };
    std::process::exit(code);
}

fn load_program(path: &Path, depth: u32) -> Result<CoreProgram, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let surface = dbmc::frontend::parse(&text).map_err(|e| e.to_string())?;
    let core = dbmc::frontend::lower(&surface, depth).map_err(|e| e.to_string())?;
    core.validate().map_err(|e| e.to_string())?;
    Ok(core)
}

fn solver_config(cmd: &Option<String>, timeout_secs: f64) -> dbmc::solver::SolverConfig {
    let timeout = Duration::from_secs_f64(timeout_secs.max(0.001));
    match cmd {
        Some(c) => harness::solver_config_from_cmd(c, timeout),
        None => {
            let mut cfg = harness::default_solver_config();
            cfg.soft_timeout = timeout;
            cfg
        }
    }
}

fn print_verdict(v: &Verdict) {
    match v {
        Verdict::Safe => println!("verdict: safe"),
        Verdict::Unsafe(trace) => {
            println!("verdict: unsafe");
            println!("trace: {trace}");
        }
        Verdict::Inconclusive(r) => println!("verdict: inconclusive ({r})"),
    }
}

fn report_summary(r: &RunReport) {
    println!(
        "partitions: {} created, {} dispatched, max queue {}",
        r.partitions_created, r.dispatches, r.max_queue_depth
    );
    for c in &r.clients {
        println!(
            "client {}: {} partitions, {} splits, {} steps, {} inlined sites",
            c.id,
            c.partitions_solved,
            c.splits,
            c.steps,
            c.inlined.len()
        );
    }
}

fn run(cli: Cli) -> Result<i32, String> {
    match cli.cmd {
        Cmd::Seq {
            file,
            depth,
            solver,
            verbose,
            timeout,
        } => {
            let program = load_program(&file, depth)?;
            let session = solver_pool::acquire(&solver_config(&solver, timeout))
                .map_err(|e| e.to_string())?;
            let (verdict, engine) =
                si::run_sequential(&program, session).map_err(|e| e.to_string())?;
            if verbose {
                for (i, rec) in engine.records.iter().enumerate() {
                    println!(
                        "step {}: under={:?} over={:?} inlined={} open={}",
                        i + 1,
                        rec.under,
                        rec.over,
                        rec.inlined_now.len(),
                        rec.open_after.len()
                    );
                }
                println!("inlined total: {}", engine.inlined.len());
            }
            solver_pool::release(engine.into_session());
            print_verdict(&verdict);
            Ok(verdict.exit_code())
        }
        Cmd::Oracle {
            file,
            depth,
            solver,
            timeout,
        } => {
            let program = load_program(&file, depth)?;
            let session = solver_pool::acquire(&solver_config(&solver, timeout))
                .map_err(|e| e.to_string())?;
            let (verdict, session) =
                harness::full_inline_oracle(&program, session).map_err(|e| e.to_string())?;
            solver_pool::release(session);
            print_verdict(&verdict);
            Ok(verdict.exit_code())
        }
        Cmd::Run {
            file,
            clients,
            sim,
            seed,
            strategy,
            depth,
            solver,
            delta_c,
            k,
            timeout,
        } => {
            let strategy_kind: StrategyKind = strategy.parse()?;
            if sim {
                let program = load_program(&file, depth)?;
                let mut cfg = SimConfig::new(
                    clients,
                    seed,
                    strategy_kind,
                    solver_config(&solver, 60.0),
                );
                cfg.delta_c = delta_c;
                cfg.k = k;
                let report = run_simulated(&program, &cfg);
                report_summary(&report);
                print_verdict(&report.verdict);
                Ok(report.verdict.exit_code())
            } else {
                load_program(&file, depth)?; // validate before spawning
                let report = net::run_process_cluster(
                    &file,
                    clients,
                    &strategy,
                    seed,
                    depth,
                    solver.as_deref(),
                    Duration::from_secs_f64(timeout),
                )
                .map_err(|e| e.to_string())?;
                report_summary(&report);
                print_verdict(&report.verdict);
                Ok(report.verdict.exit_code())
            }
        }
        Cmd::Server {
            port,
            clients_expected,
            timeout,
            delta_c,
            k,
        } => {
            let listener = TcpListener::bind(("0.0.0.0", port)).map_err(|e| e.to_string())?;
            let addr = listener.local_addr().map_err(|e| e.to_string())?;
            println!("dbmc server listening on {addr} (expecting {clients_expected} clients)");
            let report = net::run_server(
                listener,
                ServerConfig { delta_c, k },
                Duration::from_secs_f64(timeout),
            );
            report_summary(&report);
            print_verdict(&report.verdict);
            Ok(report.verdict.exit_code())
        }
        Cmd::Client {
            file,
            server,
            id,
            strategy,
            seed,
            depth,
            solver,
            delta_c,
            k,
            timeout,
        } => {
            let program = load_program(&file, depth)?;
            let strategy_kind: StrategyKind = strategy.parse()?;
            let id = id.unwrap_or_else(|| std::process::id() as u64);
            let link = TcpLink::connect(&server, id)
                .map_err(|e| format!("cannot connect to {server}: {e}"))?;
            let session = solver_pool::acquire(&solver_config(&solver, timeout))
                .map_err(|e| e.to_string())?;
            let mut rt = ClientRuntime::new(
                id,
                &program,
                link,
                session,
                Strategy::new(strategy_kind, seed),
                SplitPolicy::new(delta_c, k),
                Clock::real(),
                VerifyOptions::default(),
            );
            match rt.run() {
                Ok(()) => Ok(0),
                Err(dbmc::client::ClientError::LinkClosed) => Ok(0),
                Err(e) => Err(e.to_string()),
            }
        }
        Cmd::Gen { seed, count, out } => {
            std::fs::create_dir_all(&out).map_err(|e| e.to_string())?;
            for p in harness::gen_corpus(seed, count) {
                let path = out.join(format!("{}.dbmc", p.name));
                std::fs::write(&path, &p.source).map_err(|e| e.to_string())?;
            }
            println!("wrote {count} programs to {}", out.display());
            Ok(0)
        }
        Cmd::Report {
            csv,
            seed,
            solver,
            out,
        } => {
            let text = harness::speedup_smoke(seed, &solver_config(&solver, 60.0), 10, csv)?;
            match out {
                Some(p) => std::fs::write(&p, text).map_err(|e| e.to_string())?,
                None => print!("{text}"),
            }
            Ok(0)
        }
    }
}
