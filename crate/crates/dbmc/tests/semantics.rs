//! Cross-checks the whole pipeline (lowering, VC generation, solver)
//! against a brute-force interpreter of the surface semantics.
//!
//! The interpreter enumerates every execution over small input domains:
//! integer nondeterminism ranges over {-2..2}, booleans over both values,
//! nondeterministic branches take both arms. Loops and recursion carry
//! the same budget as the lowering: executions that would run longer are
//! discarded. A program is unsafe iff some enumerated execution violates
//! an assertion.

use std::collections::HashMap;

use dbmc::frontend::{lower, parse, LabeledStmt, Pos, SurfaceProgram, SurfaceStmt};
use dbmc::harness::{self, solver_pool};
use dbmc::ir::{BinOp, Expr, Sort, UnOp};
use dbmc::Verdict;

const DOMAIN: [i64; 5] = [-2, -1, 0, 1, 2];
const DEPTH: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Val {
    Int(i64),
    Bool(bool),
}

type Env = HashMap<String, Val>;

fn eval(e: &Expr, env: &Env) -> Val {
    match e {
        Expr::Var(v) => *env.get(v).expect("variable in scope"),
        Expr::Int(n) => Val::Int(*n),
        Expr::Bool(b) => Val::Bool(*b),
        Expr::Unary(UnOp::Not, a) => match eval(a, env) {
            Val::Bool(b) => Val::Bool(!b),
            _ => unreachable!(),
        },
        Expr::Unary(UnOp::Neg, a) => match eval(a, env) {
            Val::Int(n) => Val::Int(-n),
            _ => unreachable!(),
        },
        Expr::Binary(op, a, b) => {
            let (va, vb) = (eval(a, env), eval(b, env));
            match (op, va, vb) {
                (BinOp::Add, Val::Int(x), Val::Int(y)) => Val::Int(x + y),
                (BinOp::Sub, Val::Int(x), Val::Int(y)) => Val::Int(x - y),
                (BinOp::Mul, Val::Int(x), Val::Int(y)) => Val::Int(x * y),
                (BinOp::Lt, Val::Int(x), Val::Int(y)) => Val::Bool(x < y),
                (BinOp::Le, Val::Int(x), Val::Int(y)) => Val::Bool(x <= y),
                (BinOp::Gt, Val::Int(x), Val::Int(y)) => Val::Bool(x > y),
                (BinOp::Ge, Val::Int(x), Val::Int(y)) => Val::Bool(x >= y),
                (BinOp::Eq, x, y) => Val::Bool(x == y),
                (BinOp::Ne, x, y) => Val::Bool(x != y),
                (BinOp::And, Val::Bool(x), Val::Bool(y)) => Val::Bool(x && y),
                (BinOp::Or, Val::Bool(x), Val::Bool(y)) => Val::Bool(x || y),
                _ => unreachable!("ill-sorted expression"),
            }
        }
        Expr::Ite(c, a, b) => match eval(c, env) {
            Val::Bool(true) => eval(a, env),
            Val::Bool(false) => eval(b, env),
            _ => unreachable!(),
        },
    }
}

fn stmt(s: SurfaceStmt) -> LabeledStmt {
    LabeledStmt {
        label: None,
        stmt: s,
        pos: Pos { line: 0, col: 0 },
    }
}

/// Unrolls a loop exactly like the lowering does: `budget` guarded body
/// copies, and a cut assume killing executions that would iterate
/// further.
fn unroll_while(guard: &Option<Expr>, body: &[LabeledStmt], budget: u32) -> Vec<LabeledStmt> {
    if budget == 0 {
        let cut = match guard {
            Some(e) => Expr::not(e.clone()),
            None => Expr::Bool(false),
        };
        return vec![stmt(SurfaceStmt::Assume(cut))];
    }
    let mut then_body = body.to_vec();
    then_body.extend(unroll_while(guard, body, budget - 1));
    vec![stmt(SurfaceStmt::If(guard.clone(), then_body, Vec::new()))]
}

struct Interp<'a> {
    program: &'a SurfaceProgram,
    violated: bool,
}

impl<'a> Interp<'a> {
    fn enumerate_vars(
        &mut self,
        vars: &[(String, Sort)],
        env: Env,
        k: &mut dyn FnMut(&mut Interp<'a>, Env) -> bool,
    ) -> bool {
        if self.violated {
            return false;
        }
        match vars.split_first() {
            None => k(self, env),
            Some(((name, sort), rest)) => {
                let mut survived = false;
                match sort {
                    Sort::Int => {
                        for v in DOMAIN {
                            let mut e = env.clone();
                            e.insert(name.clone(), Val::Int(v));
                            survived |= self.enumerate_vars(rest, e, k);
                        }
                    }
                    Sort::Bool => {
                        for v in [false, true] {
                            let mut e = env.clone();
                            e.insert(name.clone(), Val::Bool(v));
                            survived |= self.enumerate_vars(rest, e, k);
                        }
                    }
                }
                survived
            }
        }
    }

    /// Runs a call; returns whether any callee execution completed. A
    /// call past the depth budget is cut: the caller's path dies, exactly
    /// like the `assume false` the lowering substitutes.
    fn call(&mut self, name: &str, args: Vec<Val>, call_depth: u32) -> bool {
        if self.violated {
            return false;
        }
        if call_depth > DEPTH {
            return false;
        }
        let proc = self
            .program
            .procedures
            .iter()
            .find(|p| p.name == name)
            .expect("callee exists");
        let mut env = Env::new();
        for ((formal, _), v) in proc.formals.iter().zip(args) {
            env.insert(formal.clone(), v);
        }
        let locals = proc.locals.clone();
        let body = proc.body.clone();
        self.enumerate_vars(&locals, env, &mut |me, env| {
            me.exec(&body, env, call_depth)
        })
    }

    /// Executes a statement list; returns whether any path survives to
    /// the end of the list.
    fn exec(&mut self, stmts: &[LabeledStmt], env: Env, call_depth: u32) -> bool {
        if self.violated {
            return false;
        }
        let Some((first, rest)) = stmts.split_first() else {
            return true;
        };
        match &first.stmt {
            SurfaceStmt::Assign(v, e) => {
                let mut env = env;
                let val = eval(e, &env);
                env.insert(v.clone(), val);
                self.exec(rest, env, call_depth)
            }
            SurfaceStmt::Assume(e) => {
                if eval(e, &env) == Val::Bool(true) {
                    self.exec(rest, env, call_depth)
                } else {
                    false
                }
            }
            SurfaceStmt::Assert(e) => {
                if eval(e, &env) == Val::Bool(false) {
                    self.violated = true;
                    return false;
                }
                self.exec(rest, env, call_depth)
            }
            SurfaceStmt::Call { callee, actuals } => {
                let args: Vec<Val> = actuals.iter().map(|a| eval(a, &env)).collect();
                if self.call(callee, args, call_depth + 1) {
                    self.exec(rest, env, call_depth)
                } else {
                    false
                }
            }
            SurfaceStmt::If(guard, then_body, else_body) => {
                let run = |me: &mut Interp<'a>, branch: &[LabeledStmt]| -> bool {
                    let mut seq = branch.to_vec();
                    seq.extend(rest.to_vec());
                    me.exec(&seq, env.clone(), call_depth)
                };
                match guard {
                    Some(g) => {
                        if eval(g, &env) == Val::Bool(true) {
                            run(self, then_body)
                        } else {
                            run(self, else_body)
                        }
                    }
                    None => {
                        // explore both arms unconditionally
                        let a = run(self, then_body);
                        let b = run(self, else_body);
                        a || b
                    }
                }
            }
            SurfaceStmt::While(guard, body) => {
                let mut seq = unroll_while(guard, body, DEPTH);
                seq.extend(rest.to_vec());
                self.exec(&seq, env, call_depth)
            }
        }
    }
}

/// Brute-force verdict: does any enumerated execution violate an assert?
fn brute_force_unsafe(program: &SurfaceProgram) -> bool {
    let mut interp = Interp {
        program,
        violated: false,
    };
    interp.call("main", Vec::new(), 0);
    interp.violated
}

#[test]
fn pipeline_agrees_with_surface_semantics() {
    let cases: &[&str] = &[
        // straight-line safe
        "procedure main() { var x: int; x := 1; x := x + 1; assert x == 2; }",
        // straight-line unsafe
        "procedure main() { var x: int; x := 1; assert x == 2; }",
        // nondet local: violable
        "procedure main() { var x: int; assert x != 1; }",
        // assume guards the assert
        "procedure main() { var x: int; assume x > 0; assert x >= 1; }",
        // nondet branch with merge
        "procedure main() { var x: int; if (*) { x := 1; } else { x := 2; } assert x >= 1 && x <= 2; }",
        // concrete branch on a nondet bool
        "procedure main() { var b: bool; var x: int; if (b) { x := 1; } else { x := 0 - 1; } assert ite(b, x > 0, x < 0); }",
        // loop with concrete guard that terminates within the budget
        "procedure main() { var x: int; x := 0; while (x < 2) { x := x + 1; } assert x == 2; }",
        // nondet loop: the counter can reach 2 within the budget
        "procedure main() { var x: int; x := 0; while (*) { x := x + 1; } assert x != 2; }",
        // statements after a loop whose continuation is cut
        "procedure main() { var x: int; x := 0; while (x < 9) { x := x + 1; } assert false; }",
        // call with argument, safe
        "procedure main() { var a: int; assume a > 0; call q(a); }
         procedure q(v: int) { assert v > 0; }",
        // call with argument, unsafe through the callee
        "procedure main() { var a: int; call q(a + 1); }
         procedure q(v: int) { assert v != 2; }",
        // two-level chain, safe because of the caller constraint
        "procedure main() { var a: int; assume a > 1; call q(a); }
         procedure q(v: int) { call r(v); }
         procedure r(w: int) { assert w > 0; }",
        // callee that can refuse to return constrains the caller
        "procedure main() { var a: int; call gate(a); assert a > 0; }
         procedure gate(v: int) { assume v > 0; }",
        // recursion within the budget, unsafe at the bottom
        "procedure main() { call down(2); }
         procedure down(n: int) { if (n > 0) { call down(n - 1); } else { assert n != 0; } }",
        // recursion cut: deeper violations are invisible at this depth,
        // and the cut kills the path before the trailing assert
        "procedure main() { call down(9); assert false; }
         procedure down(n: int) { if (n > 0) { call down(n - 1); } else { assert false; } }",
    ];

    let cfg = harness::default_solver_config();
    for (i, src) in cases.iter().enumerate() {
        let surface = parse(src).unwrap();
        let expected_unsafe = brute_force_unsafe(&surface);
        let core = lower(&surface, DEPTH).unwrap();
        core.validate().unwrap();
        let session = solver_pool::acquire(&cfg).unwrap();
        let (verdict, session) = harness::full_inline_oracle(&core, session).unwrap();
        solver_pool::release(session);
        let got_unsafe = matches!(verdict, Verdict::Unsafe(_));
        assert_eq!(
            got_unsafe, expected_unsafe,
            "case {i}: solver pipeline {verdict:?} vs brute force unsafe={expected_unsafe}\n{src}"
        );
        // the lazy engine agrees as well
        let session = solver_pool::acquire(&cfg).unwrap();
        let (seq, engine) = dbmc::si::run_sequential(&core, session).unwrap();
        solver_pool::release(engine.into_session());
        assert!(seq.same_kind(&verdict), "case {i}: engines disagree");
    }
}
