//! TCP transport: newline-delimited JSON between the coordinator and
//! clients, plus the process-mode cluster launcher.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{channel, Receiver, Sender, TryRecvError};
use std::time::{Duration, Instant};

use crate::client::{ClientError, CoordinatorLink, Reply, Request};
use crate::harness::{ClientReport, RunReport};
use crate::proto::{self, ClientId, ClientMsg, ServerMsg};
use crate::server::{ServerCore, ServerTransport};
use crate::Verdict;

enum ServerEvent {
    Msg(ClientId, ClientMsg),
    Connected(ClientId, TcpStream),
    Disconnected(ClientId),
}

struct TcpTransport {
    writers: HashMap<ClientId, TcpStream>,
}

impl TcpTransport {
    fn write(&mut self, to: ClientId, msg: &ServerMsg) {
        if let Some(stream) = self.writers.get_mut(&to) {
            let line = serde_json::to_string(msg).expect("serializable");
            let ok = stream
                .write_all(line.as_bytes())
                .and_then(|_| stream.write_all(b"\n"))
                .is_ok();
            if !ok {
                self.writers.remove(&to);
            }
        }
    }
}

impl ServerTransport for TcpTransport {
    fn reply(&mut self, to: ClientId, msg: ServerMsg) {
        self.write(to, &msg);
    }

    fn broadcast_kill(&mut self) {
        let ids: Vec<ClientId> = self.writers.keys().copied().collect();
        for id in ids {
            self.write(id, &ServerMsg::Kill);
        }
    }
}

fn reader_thread(stream: TcpStream, tx: Sender<ServerEvent>) {
    let peer = stream.peer_addr().ok();
    let mut reader = BufReader::new(stream.try_clone().expect("clone stream"));
    let mut line = String::new();
    let mut id: Option<ClientId> = None;
    loop {
        line.clear();
        match reader.read_line(&mut line) {
            Ok(0) | Err(_) => break,
            Ok(_) => {}
        }
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let msg: ClientMsg = match serde_json::from_str(trimmed) {
            Ok(m) => m,
            Err(e) => {
                eprintln!("dbmc server: bad message from {peer:?}: {e}");
                break;
            }
        };
        if id.is_none() {
            if let ClientMsg::Hello { id: hello_id } = &msg {
                id = Some(*hello_id);
                if tx
                    .send(ServerEvent::Connected(
                        *hello_id,
                        stream.try_clone().expect("clone stream"),
                    ))
                    .is_err()
                {
                    return;
                }
            } else {
                eprintln!("dbmc server: first message must be HELLO, got {trimmed}");
                return;
            }
        }
        if tx.send(ServerEvent::Msg(id.unwrap(), msg)).is_err() {
            return;
        }
    }
    if let Some(id) = id {
        let _ = tx.send(ServerEvent::Disconnected(id));
    }
}

/// Runs the coordinator event loop until a verdict (or the timeout).
/// Returns the verdict and a report assembled from server-side counters
/// plus the statistics clients piggyback on their outcome messages.
pub fn run_server(
    listener: TcpListener,
    config: crate::server::ServerConfig,
    timeout: Duration,
) -> RunReport {
    let started = Instant::now();
    let (tx, rx): (Sender<ServerEvent>, Receiver<ServerEvent>) = channel();
    let accept_tx = tx.clone();
    listener.set_nonblocking(false).ok();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            match stream {
                Ok(s) => {
                    s.set_nodelay(true).ok();
                    let tx = accept_tx.clone();
                    std::thread::spawn(move || reader_thread(s, tx));
                }
                Err(_) => break,
            }
        }
    });

    let mut core = ServerCore::new(config);
    let mut transport = TcpTransport {
        writers: HashMap::new(),
    };
    let verdict = loop {
        if let Some(v) = core.verdict.clone() {
            break v;
        }
        let remaining = timeout
            .checked_sub(started.elapsed())
            .unwrap_or(Duration::ZERO);
        if remaining.is_zero() {
            transport.broadcast_kill();
            break Verdict::Inconclusive("server timeout".into());
        }
        match rx.recv_timeout(remaining) {
            Ok(ServerEvent::Connected(id, stream)) => {
                transport.writers.insert(id, stream);
            }
            Ok(ServerEvent::Msg(id, msg)) => {
                if let Err(e) = core.handle(msg, &mut transport) {
                    eprintln!("dbmc server: protocol error from client {id}: {e}");
                }
            }
            Ok(ServerEvent::Disconnected(id)) => {
                transport.writers.remove(&id);
                core.disconnect(id, &mut transport);
            }
            Err(_) => {
                transport.broadcast_kill();
                break Verdict::Inconclusive("server timeout".into());
            }
        }
    };

    let clients = core
        .client_stats
        .iter()
        .map(|(id, acc)| ClientReport {
            id: *id,
            inlined: acc.inlined.clone(),
            splits: acc.splits,
            partitions_solved: acc.partitions_solved,
            steps: acc.steps,
            steals: 0, // not reported over the wire
        })
        .collect();
    RunReport {
        verdict,
        wall: started.elapsed(),
        clients,
        dispatches: core.dispatch_count,
        max_queue_depth: core.max_queue_depth,
        partitions_created: core.partitions_created,
        split_records: Vec::new(),
    }
}

/// Client-side link over TCP. A reader thread feeds replies through a
/// channel so pending acknowledgments can be drained without blocking.
pub struct TcpLink {
    id: ClientId,
    stream: TcpStream,
    replies: Receiver<Reply>,
}

impl TcpLink {
    pub fn connect(addr: &str, id: ClientId) -> std::io::Result<TcpLink> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true).ok();
        let (tx, rx) = channel();
        let read_side = stream.try_clone()?;
        std::thread::spawn(move || {
            let mut reader = BufReader::new(read_side);
            let mut line = String::new();
            loop {
                line.clear();
                match reader.read_line(&mut line) {
                    Ok(0) | Err(_) => break,
                    Ok(_) => {}
                }
                let msg: ServerMsg = match serde_json::from_str(line.trim()) {
                    Ok(m) => m,
                    Err(_) => break,
                };
                let reply = match msg {
                    ServerMsg::Grant { partition } => match partition.to_partition() {
                        Ok(p) => Reply::Grant(p),
                        Err(_) => break,
                    },
                    ServerMsg::Ack { delta } => Reply::Ack { delta },
                    ServerMsg::PopReply { yes } => Reply::PopReply(yes),
                    ServerMsg::Kill => Reply::Kill,
                };
                if tx.send(reply).is_err() {
                    break;
                }
            }
        });
        let mut link = TcpLink {
            id,
            stream,
            replies: rx,
        };
        link.write(&ClientMsg::Hello { id })?;
        Ok(link)
    }

    fn write(&mut self, msg: &ClientMsg) -> std::io::Result<()> {
        let line = serde_json::to_string(msg).expect("serializable");
        self.stream.write_all(line.as_bytes())?;
        self.stream.write_all(b"\n")
    }
}

impl CoordinatorLink for TcpLink {
    fn send(&mut self, req: Request) -> Result<(), ClientError> {
        let msg = match req {
            Request::GetPartition => ClientMsg::GetPartition { id: self.id },
            Request::Pop => ClientMsg::Pop { id: self.id },
            Request::SendPartition(p) => ClientMsg::SendPartition {
                id: self.id,
                partition: (&p).into(),
            },
            Request::Outcome(v, stats) => proto::outcome_msg(self.id, &v, Some(stats)),
        };
        self.write(&msg).map_err(|_| ClientError::LinkClosed)
    }

    fn recv_blocking(&mut self) -> Result<Reply, ClientError> {
        self.replies.recv().map_err(|_| ClientError::LinkClosed)
    }

    fn drain(&mut self) -> Result<Vec<Reply>, ClientError> {
        let mut out = Vec::new();
        loop {
            match self.replies.try_recv() {
                Ok(r) => out.push(r),
                Err(TryRecvError::Empty) => return Ok(out),
                Err(TryRecvError::Disconnected) => {
                    if out.is_empty() {
                        return Err(ClientError::LinkClosed);
                    }
                    return Ok(out);
                }
            }
        }
    }
}

/// Spawns a real cluster: the coordinator in this process, `clients`
/// child processes of the current executable on the loopback interface.
pub fn run_process_cluster(
    program_path: &Path,
    clients: usize,
    strategy: &str,
    seed: u64,
    depth: u32,
    solver_cmd: Option<&str>,
    timeout: Duration,
) -> std::io::Result<RunReport> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    let exe = std::env::current_exe()?;
    let mut children: Vec<Child> = Vec::new();
    for id in 0..clients {
        let mut cmd = Command::new(&exe);
        cmd.arg("client")
            .arg(program_path)
            .arg("--server")
            .arg(addr.to_string())
            .arg("--id")
            .arg(id.to_string())
            .arg("--strategy")
            .arg(strategy)
            .arg("--seed")
            .arg((seed.wrapping_mul(1000) + id as u64).to_string())
            .arg("--depth")
            .arg(depth.to_string())
            .stdout(Stdio::null())
            .stderr(Stdio::inherit());
        if let Some(s) = solver_cmd {
            cmd.arg("--solver").arg(s);
        }
        children.push(cmd.spawn()?);
    }
    let report = run_server(listener, crate::server::ServerConfig::default(), timeout);
    for mut child in children {
        let deadline = Instant::now() + Duration::from_secs(10);
        loop {
            match child.try_wait() {
                Ok(Some(_)) => break,
                Ok(None) if Instant::now() < deadline => {
                    std::thread::sleep(Duration::from_millis(50));
                }
                _ => {
                    let _ = child.kill();
                    let _ = child.wait();
                    break;
                }
            }
        }
    }
    Ok(report)
}
