//! Incremental session over an external SMT-LIB2 solver process.
//!
//! The session talks to the solver over stdin/stdout. Commands are
//! buffered and flushed at synchronization points (checks, model and core
//! queries); each flush appends an `(echo "...")` marker and the reader
//! collects everything up to the marker, so the protocol works with any
//! conforming solver. Declarations are emitted on demand and tracked per
//! push scope, as are assertion names, which keeps re-assertion after a
//! `pop` consistent with the solver's own scoping.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::vcgen::{NamedAssertion, Term, CTRL_FN};
use crate::ir::Sort;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("failed to spawn solver `{cmd}`: {source}")]
    Spawn {
        cmd: String,
        source: std::io::Error,
    },
    #[error("solver handshake failed: {0}")]
    Handshake(String),
    #[error("solver session is dead: {0}")]
    SessionDead(String),
    #[error("solver reported an error: {0}")]
    Command(String),
    #[error("assertion name `{0}` was already used in this session")]
    DuplicateName(String),
    #[error("pop at depth 0")]
    PopAtZero,
    #[error("malformed solver response: {0}")]
    BadResponse(String),
    #[error("check-sat must report sat before querying model values")]
    NoModel,
}

pub type Result<T> = std::result::Result<T, SolverError>;

/// How to launch and drive the external solver.
#[derive(Debug, Clone)]
pub struct SolverConfig {
    /// Command line, argv style. The process must speak SMT-LIB2 on
    /// stdin/stdout.
    pub cmd: Vec<String>,
    /// Soft per-check timeout; a check exceeding it yields `Unknown`.
    pub soft_timeout: Duration,
}

impl SolverConfig {
    pub fn new(cmd: Vec<String>) -> Self {
        SolverConfig {
            cmd,
            soft_timeout: Duration::from_secs(60),
        }
    }
}

/// Outcome of a `check-sat`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CheckResult {
    Sat,
    Unsat(BTreeSet<String>),
    Unknown(String),
}

/// Model value of a queried term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Value {
    Int(i64),
    Bool(bool),
}

impl Value {
    pub fn as_int(self) -> Option<i64> {
        match self {
            Value::Int(n) => Some(n),
            Value::Bool(_) => None,
        }
    }

    pub fn as_bool(self) -> Option<bool> {
        match self {
            Value::Bool(b) => Some(b),
            Value::Int(_) => None,
        }
    }
}

#[derive(Default)]
struct Scope {
    declared: HashSet<String>,
    names: HashSet<String>,
}

pub struct SolverSession {
    child: Child,
    stdin: ChildStdin,
    lines: mpsc::Receiver<String>,
    config: SolverConfig,
    scopes: Vec<Scope>,
    buffer: String,
    marker_counter: u64,
    dead: Option<String>,
    last_check_sat: bool,
    is_z3: bool,
    assert_counts: HashMap<String, u64>,
}

impl SolverSession {
    /// Spawns the solver and performs the option handshake.
    pub fn start(config: SolverConfig) -> Result<SolverSession> {
        let cmd_str = config.cmd.join(" ");
        if config.cmd.is_empty() {
            return Err(SolverError::Handshake("empty solver command".into()));
        }
        let mut child = Command::new(&config.cmd[0])
            .args(&config.cmd[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|source| SolverError::Spawn {
                cmd: cmd_str.clone(),
                source,
            })?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            let reader = BufReader::new(stdout);
            for line in reader.lines() {
                match line {
                    Ok(l) => {
                        if tx.send(l).is_err() {
                            break;
                        }
                    }
                    Err(_) => break,
                }
            }
        });
        let mut session = SolverSession {
            child,
            stdin,
            lines: rx,
            config,
            scopes: vec![Scope::default()],
            buffer: String::new(),
            marker_counter: 0,
            dead: None,
            last_check_sat: false,
            is_z3: false,
            assert_counts: HashMap::new(),
        };
        session.handshake()?;
        Ok(session)
    }

    fn handshake(&mut self) -> Result<()> {
        self.send("(set-option :produce-models true)");
        self.send("(set-option :produce-unsat-cores true)");
        let out = self
            .sync()
            .map_err(|e| SolverError::Handshake(e.to_string()))?;
        if let Some(err) = first_error(&out) {
            return Err(SolverError::Handshake(err));
        }

        // Identify the solver; some options below are z3 specific.
        self.send("(get-info :name)");
        let out = self
            .sync()
            .map_err(|e| SolverError::Handshake(e.to_string()))?;
        self.is_z3 = out.join(" ").contains("Z3");

        // Lenient block: unsupported options must not kill the session.
        self.send("(set-logic ALL)");
        if self.is_z3 {
            // best-effort unsat core minimization
            self.send("(set-option :smt.core.minimize true)");
            let ms = self.config.soft_timeout.as_millis().min(u32::MAX as u128);
            self.send(&format!("(set-option :timeout {ms})"));
        }
        let _ = self.sync();

        self.send(&format!("(declare-fun {CTRL_FN} (Int) Int)"));
        let out = self
            .sync()
            .map_err(|e| SolverError::Handshake(e.to_string()))?;
        if let Some(err) = first_error(&out) {
            return Err(SolverError::Handshake(err));
        }
        Ok(())
    }

    fn check_alive(&self) -> Result<()> {
        match &self.dead {
            Some(reason) => Err(SolverError::SessionDead(reason.clone())),
            None => Ok(()),
        }
    }

    fn send(&mut self, cmd: &str) {
        self.buffer.push_str(cmd);
        self.buffer.push('\n');
    }

    /// Flushes buffered commands and reads everything up to a fresh echo
    /// marker. Returns the collected response lines.
    fn sync(&mut self) -> Result<Vec<String>> {
        self.check_alive()?;
        self.marker_counter += 1;
        let marker = format!("@sync{}@", self.marker_counter);
        self.buffer.push_str(&format!("(echo \"{marker}\")\n"));
        let payload = std::mem::take(&mut self.buffer);
        if let Err(e) = self
            .stdin
            .write_all(payload.as_bytes())
            .and_then(|_| self.stdin.flush())
        {
            let reason = format!("write failed: {e}");
            self.kill(&reason);
            return Err(SolverError::SessionDead(reason));
        }
        let deadline = Instant::now() + self.config.soft_timeout * 2 + Duration::from_secs(5);
        let mut out = Vec::new();
        loop {
            let now = Instant::now();
            if now >= deadline {
                self.kill("timeout");
                return Err(SolverError::SessionDead("timeout".into()));
            }
            match self.lines.recv_timeout(deadline - now) {
                Ok(line) => {
                    if line == marker {
                        return Ok(out);
                    }
                    out.push(line);
                }
                Err(mpsc::RecvTimeoutError::Timeout) => {
                    self.kill("timeout");
                    return Err(SolverError::SessionDead("timeout".into()));
                }
                Err(mpsc::RecvTimeoutError::Disconnected) => {
                    let reason = "solver process exited".to_string();
                    self.kill(&reason);
                    return Err(SolverError::SessionDead(reason));
                }
            }
        }
    }

    fn kill(&mut self, reason: &str) {
        self.dead = Some(reason.to_string());
        let _ = self.child.kill();
        let _ = self.child.wait();
    }

    fn strict(&mut self, out: Vec<String>) -> Result<Vec<String>> {
        if let Some(err) = first_error(&out) {
            return Err(SolverError::Command(err));
        }
        Ok(out)
    }

    fn is_declared(&self, sym: &str) -> bool {
        self.scopes.iter().any(|s| s.declared.contains(sym))
    }

    fn name_in_use(&self, name: &str) -> bool {
        self.scopes.iter().any(|s| s.names.contains(name))
    }

    /// Emits declarations for every free symbol of `t` not yet live.
    fn declare_for(&mut self, t: &Term) {
        let mut vars = HashMap::new();
        t.free_vars(&mut vars);
        let mut ordered: Vec<(&String, &Sort)> = vars.iter().collect();
        ordered.sort_by(|a, b| a.0.cmp(b.0));
        let mut cmds = Vec::new();
        for (name, sort) in ordered {
            if !self.is_declared(name) {
                let s = match sort {
                    Sort::Int => "Int",
                    Sort::Bool => "Bool",
                };
                cmds.push(format!("(declare-const {name} {s})"));
                self.scopes.last_mut().unwrap().declared.insert(name.clone());
            }
        }
        for c in cmds {
            self.send(&c);
        }
    }

    /// Asserts a named term. Names must be fresh among live scopes.
    pub fn assert_named(&mut self, a: &NamedAssertion) -> Result<()> {
        self.check_alive()?;
        if self.name_in_use(&a.name) {
            return Err(SolverError::DuplicateName(a.name.clone()));
        }
        self.declare_for(&a.term);
        self.scopes
            .last_mut()
            .unwrap()
            .names
            .insert(a.name.clone());
        let prefix = a.name.split('!').next().unwrap_or("").to_string();
        *self.assert_counts.entry(prefix).or_insert(0) += 1;
        let cmd = format!("(assert (! {} :named {}))", a.term.to_smt(), a.name);
        self.send(&cmd);
        Ok(())
    }

    /// Asserts an unnamed term (used by tests and the oracle path).
    pub fn assert_term(&mut self, t: &Term) -> Result<()> {
        self.check_alive()?;
        self.declare_for(t);
        let cmd = format!("(assert {})", t.to_smt());
        self.send(&cmd);
        Ok(())
    }

    pub fn push(&mut self) -> Result<()> {
        self.check_alive()?;
        self.send("(push 1)");
        self.scopes.push(Scope::default());
        Ok(())
    }

    pub fn pop(&mut self) -> Result<()> {
        self.check_alive()?;
        if self.scopes.len() <= 1 {
            return Err(SolverError::PopAtZero);
        }
        self.send("(pop 1)");
        self.scopes.pop();
        Ok(())
    }

    /// Current push depth (pushes minus pops).
    pub fn depth(&self) -> usize {
        self.scopes.len() - 1
    }

    /// Returns the session to a pristine state, clearing all registries,
    /// and replays the handshake.
    pub fn reset(&mut self) -> Result<()> {
        self.check_alive()?;
        self.buffer.clear();
        self.send("(reset)");
        let out = self.sync()?;
        self.strict(out)?;
        self.scopes = vec![Scope::default()];
        self.last_check_sat = false;
        self.assert_counts.clear();
        self.handshake()
    }

    /// Runs `check-sat`; on unsat also fetches the named core.
    pub fn check(&mut self) -> Result<CheckResult> {
        self.check_alive()?;
        self.last_check_sat = false;
        self.send("(check-sat)");
        let out = match self.sync() {
            Ok(out) => out,
            Err(SolverError::SessionDead(r)) if r == "timeout" => {
                return Ok(CheckResult::Unknown("timeout".into()));
            }
            Err(e) => return Err(e),
        };
        let out = self.strict(out)?;
        let answer = out
            .iter()
            .map(|s| s.trim())
            .find(|s| !s.is_empty())
            .ok_or_else(|| SolverError::BadResponse("empty check-sat response".into()))?;
        match answer {
            "sat" => {
                self.last_check_sat = true;
                Ok(CheckResult::Sat)
            }
            "unsat" => {
                self.send("(get-unsat-core)");
                let out = self.sync()?;
                let out = self.strict(out)?;
                let text = out.join(" ");
                let sexpr = parse_sexpr(&text)?;
                let names = match sexpr {
                    SExpr::List(items) => items
                        .into_iter()
                        .filter_map(|s| match s {
                            SExpr::Atom(a) => Some(a),
                            SExpr::List(_) => None,
                        })
                        .collect(),
                    SExpr::Atom(_) => BTreeSet::new(),
                };
                Ok(CheckResult::Unsat(names))
            }
            "unknown" => {
                self.send("(get-info :reason-unknown)");
                let reason = match self.sync() {
                    Ok(lines) => {
                        let text = lines.join(" ");
                        if text.contains("timeout") || text.contains("canceled") {
                            "timeout".to_string()
                        } else if text.is_empty() {
                            "unknown".to_string()
                        } else {
                            text
                        }
                    }
                    Err(_) => "unknown".to_string(),
                };
                Ok(CheckResult::Unknown(reason))
            }
            other => Err(SolverError::BadResponse(format!(
                "unexpected check-sat answer `{other}`"
            ))),
        }
    }

    /// Fetches model values for the queried terms. Only valid right after
    /// a `Sat` check.
    pub fn model_values(&mut self, queries: &[Term]) -> Result<Vec<Value>> {
        self.check_alive()?;
        if !self.last_check_sat {
            return Err(SolverError::NoModel);
        }
        if queries.is_empty() {
            return Ok(Vec::new());
        }
        let mut cmd = String::from("(get-value (");
        for q in queries {
            cmd.push_str(&q.to_smt());
            cmd.push(' ');
        }
        cmd.push_str("))");
        self.send(&cmd);
        let out = self.sync()?;
        let out = self.strict(out)?;
        let text = out.join(" ");
        let sexpr = parse_sexpr(&text)?;
        let SExpr::List(pairs) = sexpr else {
            return Err(SolverError::BadResponse(format!(
                "expected value pairs, got `{text}`"
            )));
        };
        if pairs.len() != queries.len() {
            return Err(SolverError::BadResponse(format!(
                "expected {} values, got {}",
                queries.len(),
                pairs.len()
            )));
        }
        pairs
            .into_iter()
            .map(|p| match p {
                SExpr::List(mut kv) if kv.len() == 2 => parse_value(kv.pop().unwrap()),
                other => Err(SolverError::BadResponse(format!(
                    "bad value pair `{other:?}`"
                ))),
            })
            .collect()
    }

    /// Cumulative count of named assertions whose name starts with the
    /// given prefix (before the `!`).
    pub fn asserts_with_prefix(&self, prefix: &str) -> u64 {
        self.assert_counts.get(prefix).copied().unwrap_or(0)
    }

    pub fn config(&self) -> &SolverConfig {
        &self.config
    }

    pub fn is_dead(&self) -> bool {
        self.dead.is_some()
    }
}

impl Drop for SolverSession {
    fn drop(&mut self) {
        if self.dead.is_none() {
            let _ = self.stdin.write_all(b"(exit)\n");
            let _ = self.stdin.flush();
            // give it a moment, then make sure it is gone
            let _ = self.child.wait();
        }
    }
}

fn first_error(lines: &[String]) -> Option<String> {
    lines
        .iter()
        .find(|l| l.trim_start().starts_with("(error"))
        .cloned()
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum SExpr {
    Atom(String),
    List(Vec<SExpr>),
}

fn parse_sexpr(text: &str) -> Result<SExpr> {
    let mut toks = Vec::new();
    let mut cur = String::new();
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '(' | ')' => {
                if !cur.is_empty() {
                    toks.push(std::mem::take(&mut cur));
                }
                toks.push(c.to_string());
            }
            '"' => {
                cur.push('"');
                for d in chars.by_ref() {
                    cur.push(d);
                    if d == '"' {
                        break;
                    }
                }
            }
            c if c.is_whitespace() => {
                if !cur.is_empty() {
                    toks.push(std::mem::take(&mut cur));
                }
            }
            c => cur.push(c),
        }
    }
    if !cur.is_empty() {
        toks.push(cur);
    }
    let mut pos = 0;
    let e = parse_tokens(&toks, &mut pos)?;
    Ok(e)
}

fn parse_tokens(toks: &[String], pos: &mut usize) -> Result<SExpr> {
    if *pos >= toks.len() {
        return Err(SolverError::BadResponse("unexpected end of response".into()));
    }
    let t = &toks[*pos];
    *pos += 1;
    if t == "(" {
        let mut items = Vec::new();
        loop {
            if *pos >= toks.len() {
                return Err(SolverError::BadResponse("unbalanced response".into()));
            }
            if toks[*pos] == ")" {
                *pos += 1;
                return Ok(SExpr::List(items));
            }
            items.push(parse_tokens(toks, pos)?);
        }
    } else if t == ")" {
        Err(SolverError::BadResponse("unbalanced `)`".into()))
    } else {
        Ok(SExpr::Atom(t.clone()))
    }
}

fn parse_value(s: SExpr) -> Result<Value> {
    match s {
        SExpr::Atom(a) => match a.as_str() {
            "true" => Ok(Value::Bool(true)),
            "false" => Ok(Value::Bool(false)),
            n => n
                .parse::<i64>()
                .map(Value::Int)
                .map_err(|_| SolverError::BadResponse(format!("bad value atom `{n}`"))),
        },
        SExpr::List(items) => {
            // negative integers print as (- n)
            if items.len() == 2 {
                if let (SExpr::Atom(op), SExpr::Atom(n)) = (&items[0], &items[1]) {
                    if op == "-" {
                        if let Ok(v) = n.parse::<i64>() {
                            return Ok(Value::Int(-v));
                        }
                    }
                }
            }
            Err(SolverError::BadResponse(format!(
                "bad value shape `{items:?}`"
            )))
        }
    }
}
