//! Surface language front end: parsing, sort checking and lowering into
//! the passified core IR.
//!
//! The surface language is statement-oriented with C-like guards. `if` and
//! `while` take either an expression or `*` for a nondeterministic choice.
//! Statements may carry an optional `LABEL:` prefix; the lowering starts a
//! fresh basic block at each labelled statement, which pins down block
//! names for programs that need stable callsite identities.

mod lower;
mod parser;

use std::fmt;

use thiserror::Error;

use crate::ir::{Expr, Sort};

pub use lower::lower;
pub use parser::parse;

/// Source position, 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pos {
    pub line: u32,
    pub col: u32,
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.col)
    }
}

#[derive(Debug, Error)]
pub enum FrontendError {
    #[error("{pos}: syntax error: {msg}")]
    Syntax { pos: Pos, msg: String },
    #[error("{pos}: sort error: {msg}")]
    Sort { pos: Pos, msg: String },
    #[error("{pos}: undefined procedure `{name}`")]
    UndefinedProcedure { pos: Pos, name: String },
    #[error("{pos}: undefined variable `{name}`")]
    UndefinedVariable { pos: Pos, name: String },
    #[error("{pos}: duplicate definition of `{name}`")]
    Duplicate { pos: Pos, name: String },
    #[error("`main` is missing or takes formals")]
    BadMain,
    #[error("unroll depth must be positive")]
    BadUnrollDepth,
}

/// Guard of an `if`/`while`: a concrete expression or `*`.
pub type Guard = Option<Expr>;

#[derive(Debug, Clone, PartialEq)]
pub enum SurfaceStmt {
    Assign(String, Expr),
    Assume(Expr),
    Assert(Expr),
    Call { callee: String, actuals: Vec<Expr> },
    If(Guard, Vec<LabeledStmt>, Vec<LabeledStmt>),
    While(Guard, Vec<LabeledStmt>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledStmt {
    pub label: Option<String>,
    pub stmt: SurfaceStmt,
    pub pos: Pos,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceProc {
    pub name: String,
    pub formals: Vec<(String, Sort)>,
    pub locals: Vec<(String, Sort)>,
    pub body: Vec<LabeledStmt>,
    pub pos: Pos,
}

/// Parsed and sort-checked surface program.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceProgram {
    pub procedures: Vec<SurfaceProc>,
}

impl SurfaceProgram {
    pub fn get(&self, name: &str) -> Option<&SurfaceProc> {
        self.procedures.iter().find(|p| p.name == name)
    }
}
