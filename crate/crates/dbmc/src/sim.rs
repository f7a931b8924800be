//! Deterministic in-process cluster: the coordinator plus N clients under
//! a seeded lockstep scheduler.
//!
//! Client threads run the production client loop unchanged; their link
//! yields to the scheduler at every message operation, and exactly one
//! client computes at a time. The scheduler picks which runnable client
//! advances using a seeded generator, so identical seeds and inputs give
//! identical event sequences, message orders and verdicts. Time is
//! virtual: one engine step is one tick, scaled by the split constant.

use std::collections::VecDeque;
use std::sync::mpsc::{channel, Receiver, Sender};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::client::{
    ClientError, ClientRuntime, ClientStats, Clock, CoordinatorLink, Reply, Request,
    SplitRecord, VerifyOptions,
};
use crate::harness::{solver_pool, ClientReport, RunReport};
use crate::ir::CoreProgram;
use crate::proto::{self, ClientId, ClientMsg, ServerMsg};
use crate::server::{ServerConfig, ServerCore, ServerTransport};
use crate::solver::SolverConfig;
use crate::splitting::{SplitPolicy, Strategy, StrategyKind};
use crate::Verdict;

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub clients: usize,
    pub seed: u64,
    pub strategy: StrategyKind,
    pub delta_c: f64,
    pub k: f64,
    pub solver: SolverConfig,
    /// Testing hook: cap the number of splits per client.
    pub max_splits: Option<u64>,
}

impl SimConfig {
    pub fn new(clients: usize, seed: u64, strategy: StrategyKind, solver: SolverConfig) -> Self {
        SimConfig {
            clients,
            seed,
            strategy,
            delta_c: crate::splitting::DELTA_C_DEFAULT,
            k: crate::splitting::K_DEFAULT,
            solver,
            max_splits: None,
        }
    }
}

struct YieldEvent {
    msgs: Vec<Request>,
    blocking: bool,
}

/// Link used by simulated clients: buffers outbound requests and yields
/// control to the scheduler at each receive operation.
struct SimLink {
    to_sched: Sender<YieldEvent>,
    from_sched: Receiver<Vec<Reply>>,
    outbox: Vec<Request>,
    local: VecDeque<Reply>,
}

impl SimLink {
    fn yield_to_scheduler(&mut self, blocking: bool) -> Result<(), ClientError> {
        let msgs = std::mem::take(&mut self.outbox);
        self.to_sched
            .send(YieldEvent { msgs, blocking })
            .map_err(|_| ClientError::LinkClosed)?;
        let replies = self
            .from_sched
            .recv()
            .map_err(|_| ClientError::LinkClosed)?;
        self.local.extend(replies);
        Ok(())
    }
}

impl CoordinatorLink for SimLink {
    fn send(&mut self, req: Request) -> Result<(), ClientError> {
        self.outbox.push(req);
        Ok(())
    }

    fn recv_blocking(&mut self) -> Result<Reply, ClientError> {
        loop {
            if let Some(r) = self.local.pop_front() {
                return Ok(r);
            }
            self.yield_to_scheduler(true)?;
        }
    }

    fn drain(&mut self) -> Result<Vec<Reply>, ClientError> {
        self.yield_to_scheduler(false)?;
        Ok(self.local.drain(..).collect())
    }
}

struct Inboxes {
    boxes: Vec<VecDeque<Reply>>,
}

impl ServerTransport for Inboxes {
    fn reply(&mut self, to: ClientId, msg: ServerMsg) {
        let reply = match msg {
            ServerMsg::Grant { partition } => Reply::Grant(
                partition
                    .to_partition()
                    .expect("server-built partitions are well formed"),
            ),
            ServerMsg::Ack { delta } => Reply::Ack { delta },
            ServerMsg::PopReply { yes } => Reply::PopReply(yes),
            ServerMsg::Kill => Reply::Kill,
        };
        self.boxes[to as usize].push_back(reply);
    }

    fn broadcast_kill(&mut self) {
        for b in &mut self.boxes {
            b.push_back(Reply::Kill);
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
enum ClientState {
    /// Yielded non-blocking: resumable any time.
    Polling,
    /// Yielded blocking: resumable once its inbox is non-empty.
    Blocked,
    Done,
}

fn to_client_msg(id: ClientId, req: Request) -> ClientMsg {
    match req {
        Request::GetPartition => ClientMsg::GetPartition { id },
        Request::Pop => ClientMsg::Pop { id },
        Request::SendPartition(p) => ClientMsg::SendPartition {
            id,
            partition: (&p).into(),
        },
        Request::Outcome(v, stats) => proto::outcome_msg(id, &v, Some(stats)),
    }
}

/// Runs the cluster to a verdict. Panics on protocol violations, which
/// would indicate a bug rather than an input problem.
pub fn run_simulated(program: &CoreProgram, cfg: &SimConfig) -> RunReport {
    assert!(cfg.clients >= 1, "need at least one client");
    let started = std::time::Instant::now();
    let n = cfg.clients;
    let mut core = ServerCore::new(ServerConfig {
        delta_c: cfg.delta_c,
        k: cfg.k,
    });
    let mut inboxes = Inboxes {
        boxes: vec![VecDeque::new(); n],
    };
    for id in 0..n {
        core.handle(ClientMsg::Hello { id: id as ClientId }, &mut inboxes)
            .expect("hello is always accepted");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut yield_rx: Vec<Receiver<YieldEvent>> = Vec::with_capacity(n);
    let mut resume_tx: Vec<Sender<Vec<Reply>>> = Vec::with_capacity(n);
    let mut links: Vec<SimLink> = Vec::with_capacity(n);
    for _ in 0..n {
        let (ytx, yrx) = channel();
        let (rtx, rrx) = channel();
        yield_rx.push(yrx);
        resume_tx.push(rtx);
        links.push(SimLink {
            to_sched: ytx,
            from_sched: rrx,
            outbox: Vec::new(),
            local: VecDeque::new(),
        });
    }

    let results: Vec<(ClientStats, bool)> = std::thread::scope(|scope| {
        let mut handles = Vec::with_capacity(n);
        for (id, link) in links.into_iter().enumerate() {
            let solver = cfg.solver.clone();
            let strategy = Strategy::new(cfg.strategy, cfg.seed.wrapping_mul(1000) + id as u64);
            let policy = SplitPolicy::new(cfg.delta_c, cfg.k);
            let opts = VerifyOptions {
                splitting: true,
                max_splits: cfg.max_splits,
            };
            let delta_c = cfg.delta_c;
            handles.push(scope.spawn(move || {
                let session = solver_pool::acquire(&solver).expect("solver available");
                let mut rt = ClientRuntime::new(
                    id as ClientId,
                    program,
                    link,
                    session,
                    strategy,
                    policy,
                    Clock::virtual_ticks(delta_c),
                    opts,
                );
                let ok = rt.run().is_ok();
                let (stats, session) = rt.into_parts();
                if let Some(s) = session {
                    solver_pool::release(s);
                }
                (stats, ok)
            }));
        }

        // Collect every client's first yield, then process the initial
        // messages in a seeded order so any client may bootstrap.
        let mut states = vec![ClientState::Polling; n];
        let mut pending_first: Vec<Option<YieldEvent>> = (0..n)
            .map(|id| match yield_rx[id].recv() {
                Ok(ev) => Some(ev),
                Err(_) => {
                    states[id] = ClientState::Done;
                    None
                }
            })
            .collect();
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for &id in &order {
            if let Some(ev) = pending_first[id].take() {
                states[id] = if ev.blocking {
                    ClientState::Blocked
                } else {
                    ClientState::Polling
                };
                for req in ev.msgs {
                    core.handle(to_client_msg(id as ClientId, req), &mut inboxes)
                        .expect("protocol violation in simulated run");
                }
            }
        }

        let mut guard: u64 = 0;
        while states.iter().any(|s| *s != ClientState::Done) {
            guard += 1;
            assert!(guard < 50_000_000, "simulated cluster failed to terminate");
            let runnable: Vec<usize> = (0..n)
                .filter(|&id| match states[id] {
                    ClientState::Polling => true,
                    ClientState::Blocked => !inboxes.boxes[id].is_empty(),
                    ClientState::Done => false,
                })
                .collect();
            assert!(
                !runnable.is_empty(),
                "simulated cluster deadlocked (verdict {:?})",
                core.verdict
            );
            let id = runnable[rng.gen_range(0..runnable.len())];
            let replies: Vec<Reply> = inboxes.boxes[id].drain(..).collect();
            if resume_tx[id].send(replies).is_err() {
                states[id] = ClientState::Done;
                continue;
            }
            match yield_rx[id].recv() {
                Ok(ev) => {
                    states[id] = if ev.blocking {
                        ClientState::Blocked
                    } else {
                        ClientState::Polling
                    };
                    for req in ev.msgs {
                        core.handle(to_client_msg(id as ClientId, req), &mut inboxes)
                            .expect("protocol violation in simulated run");
                    }
                }
                Err(_) => {
                    states[id] = ClientState::Done;
                }
            }
        }

        handles
            .into_iter()
            .map(|h| h.join().expect("client thread panicked"))
            .collect()
    });

    let verdict = core
        .verdict
        .clone()
        .expect("cluster finished without a verdict");

    let mut clients = Vec::new();
    let mut split_records: Vec<SplitRecord> = Vec::new();
    for (id, (stats, ok)) in results.iter().enumerate() {
        assert!(*ok, "client {id} failed");
        clients.push(ClientReport {
            id: id as u64,
            inlined: stats.inlined_union.clone(),
            splits: stats.splits,
            partitions_solved: stats.partitions_solved,
            steps: stats.steps,
            steals: stats.steals,
        });
        split_records.extend(stats.split_records.iter().cloned());
    }

    if verdict == Verdict::Safe {
        let solved: u64 = clients.iter().map(|c| c.partitions_solved).sum();
        assert_eq!(
            solved,
            core.partitions_created + 1,
            "partition conservation violated"
        );
    }

    RunReport {
        verdict,
        wall: started.elapsed(),
        clients,
        dispatches: core.dispatch_count,
        max_queue_depth: core.max_queue_depth,
        partitions_created: core.partitions_created,
        split_records,
    }
}
