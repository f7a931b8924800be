//! Hand-rolled lexer, recursive-descent parser and sort checker for the
//! surface language.

use std::collections::HashMap;

use crate::ir::{BinOp, Expr, Sort, UnOp};

use super::{FrontendError, Guard, LabeledStmt, Pos, SurfaceProc, SurfaceProgram, SurfaceStmt};

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Int(i64),
    // keywords
    Procedure,
    Var,
    Assume,
    Assert,
    Call,
    If,
    Else,
    While,
    True,
    False,
    IntSort,
    BoolSort,
    Ite,
    // punctuation and operators
    LParen,
    RParen,
    LBrace,
    RBrace,
    Comma,
    Semi,
    Colon,
    Assign, // :=
    Star,
    Plus,
    Minus,
    EqEq,
    NotEq,
    Lt,
    Le,
    Gt,
    Ge,
    AndAnd,
    OrOr,
    Bang,
    Eof,
}

struct Lexer<'a> {
    chars: std::iter::Peekable<std::str::Chars<'a>>,
    line: u32,
    col: u32,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Lexer {
            chars: src.chars().peekable(),
            line: 1,
            col: 1,
        }
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.chars.next()?;
        if c == '\n' {
            self.line += 1;
            self.col = 1;
        } else {
            self.col += 1;
        }
        Some(c)
    }

    fn pos(&self) -> Pos {
        Pos {
            line: self.line,
            col: self.col,
        }
    }

    fn tokenize(mut self) -> Result<Vec<(Tok, Pos)>, FrontendError> {
        let mut toks = Vec::new();
        loop {
            while let Some(&c) = self.chars.peek() {
                if c.is_whitespace() {
                    self.bump();
                } else if c == '/' {
                    // only `//` comments exist; a lone `/` is an error
                    let pos = self.pos();
                    self.bump();
                    if self.chars.peek() == Some(&'/') {
                        while let Some(&c) = self.chars.peek() {
                            if c == '\n' {
                                break;
                            }
                            self.bump();
                        }
                    } else {
                        return Err(FrontendError::Syntax {
                            pos,
                            msg: "unexpected `/`".into(),
                        });
                    }
                } else {
                    break;
                }
            }
            let pos = self.pos();
            let Some(&c) = self.chars.peek() else {
                toks.push((Tok::Eof, pos));
                return Ok(toks);
            };
            let tok = if c.is_ascii_digit() {
                let mut n: i64 = 0;
                while let Some(&d) = self.chars.peek() {
                    if let Some(v) = d.to_digit(10) {
                        n = n
                            .checked_mul(10)
                            .and_then(|n| n.checked_add(v as i64))
                            .ok_or_else(|| FrontendError::Syntax {
                                pos,
                                msg: "integer literal overflows".into(),
                            })?;
                        self.bump();
                    } else {
                        break;
                    }
                }
                Tok::Int(n)
            } else if c.is_ascii_alphabetic() || c == '_' {
                let mut s = String::new();
                while let Some(&d) = self.chars.peek() {
                    if d.is_ascii_alphanumeric() || d == '_' {
                        s.push(d);
                        self.bump();
                    } else {
                        break;
                    }
                }
                match s.as_str() {
                    "procedure" => Tok::Procedure,
                    "var" => Tok::Var,
                    "assume" => Tok::Assume,
                    "assert" => Tok::Assert,
                    "call" => Tok::Call,
                    "if" => Tok::If,
                    "else" => Tok::Else,
                    "while" => Tok::While,
                    "true" => Tok::True,
                    "false" => Tok::False,
                    "int" => Tok::IntSort,
                    "bool" => Tok::BoolSort,
                    "ite" => Tok::Ite,
                    _ => Tok::Ident(s),
                }
            } else {
                self.bump();
                match c {
                    '(' => Tok::LParen,
                    ')' => Tok::RParen,
                    '{' => Tok::LBrace,
                    '}' => Tok::RBrace,
                    ',' => Tok::Comma,
                    ';' => Tok::Semi,
                    '*' => Tok::Star,
                    '+' => Tok::Plus,
                    '-' => Tok::Minus,
                    ':' => {
                        if self.chars.peek() == Some(&'=') {
                            self.bump();
                            Tok::Assign
                        } else {
                            Tok::Colon
                        }
                    }
                    '=' => {
                        if self.chars.peek() == Some(&'=') {
                            self.bump();
                            Tok::EqEq
                        } else {
                            return Err(FrontendError::Syntax {
                                pos,
                                msg: "expected `==`".into(),
                            });
                        }
                    }
                    '!' => {
                        if self.chars.peek() == Some(&'=') {
                            self.bump();
                            Tok::NotEq
                        } else {
                            Tok::Bang
                        }
                    }
                    '<' => {
                        if self.chars.peek() == Some(&'=') {
                            self.bump();
                            Tok::Le
                        } else {
                            Tok::Lt
                        }
                    }
                    '>' => {
                        if self.chars.peek() == Some(&'=') {
                            self.bump();
                            Tok::Ge
                        } else {
                            Tok::Gt
                        }
                    }
                    '&' => {
                        if self.chars.peek() == Some(&'&') {
                            self.bump();
                            Tok::AndAnd
                        } else {
                            return Err(FrontendError::Syntax {
                                pos,
                                msg: "expected `&&`".into(),
                            });
                        }
                    }
                    '|' => {
                        if self.chars.peek() == Some(&'|') {
                            self.bump();
                            Tok::OrOr
                        } else {
                            return Err(FrontendError::Syntax {
                                pos,
                                msg: "expected `||`".into(),
                            });
                        }
                    }
                    other => {
                        return Err(FrontendError::Syntax {
                            pos,
                            msg: format!("unexpected character `{other}`"),
                        });
                    }
                }
            };
            toks.push((tok, pos));
        }
    }
}

struct Parser {
    toks: Vec<(Tok, Pos)>,
    at: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.at].0
    }

    fn peek2(&self) -> &Tok {
        &self.toks[(self.at + 1).min(self.toks.len() - 1)].0
    }

    fn pos(&self) -> Pos {
        self.toks[self.at].1
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.at].0.clone();
        if self.at + 1 < self.toks.len() {
            self.at += 1;
        }
        t
    }

    fn expect(&mut self, want: Tok, what: &str) -> Result<(), FrontendError> {
        if *self.peek() == want {
            self.bump();
            Ok(())
        } else {
            Err(self.err(format!("expected {what}")))
        }
    }

    fn err(&self, msg: String) -> FrontendError {
        FrontendError::Syntax {
            pos: self.pos(),
            msg,
        }
    }

    fn ident(&mut self, what: &str) -> Result<String, FrontendError> {
        match self.peek().clone() {
            Tok::Ident(s) => {
                self.bump();
                Ok(s)
            }
            _ => Err(self.err(format!("expected {what}"))),
        }
    }

    fn sort(&mut self) -> Result<Sort, FrontendError> {
        match self.bump() {
            Tok::IntSort => Ok(Sort::Int),
            Tok::BoolSort => Ok(Sort::Bool),
            _ => Err(self.err("expected `int` or `bool`".into())),
        }
    }

    fn program(&mut self) -> Result<SurfaceProgram, FrontendError> {
        let mut procedures = Vec::new();
        while *self.peek() != Tok::Eof {
            procedures.push(self.procedure()?);
        }
        Ok(SurfaceProgram { procedures })
    }

    fn procedure(&mut self) -> Result<SurfaceProc, FrontendError> {
        let pos = self.pos();
        self.expect(Tok::Procedure, "`procedure`")?;
        let name = self.ident("procedure name")?;
        self.expect(Tok::LParen, "`(`")?;
        let mut formals = Vec::new();
        if *self.peek() != Tok::RParen {
            loop {
                let p = self.ident("parameter name")?;
                self.expect(Tok::Colon, "`:`")?;
                formals.push((p, self.sort()?));
                if *self.peek() == Tok::Comma {
                    self.bump();
                } else {
                    break;
                }
            }
        }
        self.expect(Tok::RParen, "`)`")?;
        self.expect(Tok::LBrace, "`{`")?;
        let mut locals = Vec::new();
        let mut body = Vec::new();
        while *self.peek() != Tok::RBrace {
            if *self.peek() == Tok::Var {
                self.bump();
                let v = self.ident("variable name")?;
                self.expect(Tok::Colon, "`:`")?;
                let sort = self.sort()?;
                self.expect(Tok::Semi, "`;`")?;
                locals.push((v, sort));
            } else {
                body.push(self.labeled_stmt()?);
            }
        }
        self.expect(Tok::RBrace, "`}`")?;
        Ok(SurfaceProc {
            name,
            formals,
            locals,
            body,
            pos,
        })
    }

    fn labeled_stmt(&mut self) -> Result<LabeledStmt, FrontendError> {
        let pos = self.pos();
        let label = if matches!(self.peek(), Tok::Ident(_)) && *self.peek2() == Tok::Colon {
            let l = self.ident("label")?;
            self.bump(); // colon
            Some(l)
        } else {
            None
        };
        let stmt = self.stmt()?;
        Ok(LabeledStmt { label, stmt, pos })
    }

    fn block(&mut self) -> Result<Vec<LabeledStmt>, FrontendError> {
        self.expect(Tok::LBrace, "`{`")?;
        let mut stmts = Vec::new();
        while *self.peek() != Tok::RBrace {
            stmts.push(self.labeled_stmt()?);
        }
        self.bump();
        Ok(stmts)
    }

    fn guard(&mut self) -> Result<Guard, FrontendError> {
        self.expect(Tok::LParen, "`(`")?;
        let g = if *self.peek() == Tok::Star {
            self.bump();
            None
        } else {
            Some(self.expr()?)
        };
        self.expect(Tok::RParen, "`)`")?;
        Ok(g)
    }

    fn stmt(&mut self) -> Result<SurfaceStmt, FrontendError> {
        match self.peek().clone() {
            Tok::Assume => {
                self.bump();
                let e = self.expr()?;
                self.expect(Tok::Semi, "`;`")?;
                Ok(SurfaceStmt::Assume(e))
            }
            Tok::Assert => {
                self.bump();
                let e = self.expr()?;
                self.expect(Tok::Semi, "`;`")?;
                Ok(SurfaceStmt::Assert(e))
            }
            Tok::Call => {
                self.bump();
                let callee = self.ident("procedure name")?;
                self.expect(Tok::LParen, "`(`")?;
                let mut actuals = Vec::new();
                if *self.peek() != Tok::RParen {
                    loop {
                        actuals.push(self.expr()?);
                        if *self.peek() == Tok::Comma {
                            self.bump();
                        } else {
                            break;
                        }
                    }
                }
                self.expect(Tok::RParen, "`)`")?;
                self.expect(Tok::Semi, "`;`")?;
                Ok(SurfaceStmt::Call { callee, actuals })
            }
            Tok::If => {
                self.bump();
                let g = self.guard()?;
                let then_body = self.block()?;
                let else_body = if *self.peek() == Tok::Else {
                    self.bump();
                    self.block()?
                } else {
                    Vec::new()
                };
                Ok(SurfaceStmt::If(g, then_body, else_body))
            }
            Tok::While => {
                self.bump();
                let g = self.guard()?;
                let body = self.block()?;
                Ok(SurfaceStmt::While(g, body))
            }
            Tok::Ident(_) => {
                let v = self.ident("variable")?;
                self.expect(Tok::Assign, "`:=`")?;
                let e = self.expr()?;
                self.expect(Tok::Semi, "`;`")?;
                Ok(SurfaceStmt::Assign(v, e))
            }
            _ => Err(self.err("expected a statement".into())),
        }
    }

    // Precedence: || < && < comparison < +- < * < unary.
    fn expr(&mut self) -> Result<Expr, FrontendError> {
        let mut lhs = self.and_expr()?;
        while *self.peek() == Tok::OrOr {
            self.bump();
            let rhs = self.and_expr()?;
            lhs = Expr::bin(BinOp::Or, lhs, rhs);
        }
        Ok(lhs)
    }

    fn and_expr(&mut self) -> Result<Expr, FrontendError> {
        let mut lhs = self.cmp_expr()?;
        while *self.peek() == Tok::AndAnd {
            self.bump();
            let rhs = self.cmp_expr()?;
            lhs = Expr::bin(BinOp::And, lhs, rhs);
        }
        Ok(lhs)
    }

    fn cmp_expr(&mut self) -> Result<Expr, FrontendError> {
        let lhs = self.add_expr()?;
        let op = match self.peek() {
            Tok::EqEq => BinOp::Eq,
            Tok::NotEq => BinOp::Ne,
            Tok::Lt => BinOp::Lt,
            Tok::Le => BinOp::Le,
            Tok::Gt => BinOp::Gt,
            Tok::Ge => BinOp::Ge,
            _ => return Ok(lhs),
        };
        self.bump();
        let rhs = self.add_expr()?;
        Ok(Expr::bin(op, lhs, rhs))
    }

    fn add_expr(&mut self) -> Result<Expr, FrontendError> {
        let mut lhs = self.mul_expr()?;
        loop {
            let op = match self.peek() {
                Tok::Plus => BinOp::Add,
                Tok::Minus => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.mul_expr()?;
            lhs = Expr::bin(op, lhs, rhs);
        }
    }

    fn mul_expr(&mut self) -> Result<Expr, FrontendError> {
        let mut lhs = self.unary_expr()?;
        while *self.peek() == Tok::Star {
            self.bump();
            let rhs = self.unary_expr()?;
            lhs = Expr::bin(BinOp::Mul, lhs, rhs);
        }
        Ok(lhs)
    }

    fn unary_expr(&mut self) -> Result<Expr, FrontendError> {
        match self.peek() {
            Tok::Bang => {
                self.bump();
                Ok(Expr::not(self.unary_expr()?))
            }
            Tok::Minus => {
                self.bump();
                Ok(Expr::Unary(UnOp::Neg, Box::new(self.unary_expr()?)))
            }
            _ => self.atom(),
        }
    }

    fn atom(&mut self) -> Result<Expr, FrontendError> {
        match self.peek().clone() {
            Tok::Int(n) => {
                self.bump();
                Ok(Expr::Int(n))
            }
            Tok::True => {
                self.bump();
                Ok(Expr::Bool(true))
            }
            Tok::False => {
                self.bump();
                Ok(Expr::Bool(false))
            }
            Tok::Ident(v) => {
                self.bump();
                Ok(Expr::Var(v))
            }
            Tok::Ite => {
                self.bump();
                self.expect(Tok::LParen, "`(`")?;
                let c = self.expr()?;
                self.expect(Tok::Comma, "`,`")?;
                let a = self.expr()?;
                self.expect(Tok::Comma, "`,`")?;
                let b = self.expr()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(Expr::Ite(Box::new(c), Box::new(a), Box::new(b)))
            }
            Tok::LParen => {
                self.bump();
                let e = self.expr()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(e)
            }
            _ => Err(self.err("expected an expression".into())),
        }
    }
}

/// Parses and sort-checks a surface program.
pub fn parse(text: &str) -> Result<SurfaceProgram, FrontendError> {
    let toks = Lexer::new(text).tokenize()?;
    let mut parser = Parser { toks, at: 0 };
    let prog = parser.program()?;
    check(&prog)?;
    Ok(prog)
}

struct ProcSig {
    formals: Vec<Sort>,
}

fn check(prog: &SurfaceProgram) -> Result<(), FrontendError> {
    let mut sigs: HashMap<&str, ProcSig> = HashMap::new();
    for p in &prog.procedures {
        if sigs
            .insert(
                &p.name,
                ProcSig {
                    formals: p.formals.iter().map(|(_, s)| *s).collect(),
                },
            )
            .is_some()
        {
            return Err(FrontendError::Duplicate {
                pos: p.pos,
                name: p.name.clone(),
            });
        }
    }
    match prog.get(crate::ir::MAIN) {
        Some(m) if m.formals.is_empty() => {}
        _ => return Err(FrontendError::BadMain),
    }
    for p in &prog.procedures {
        let mut scope: HashMap<&str, Sort> = HashMap::new();
        for (name, sort) in p.formals.iter().chain(p.locals.iter()) {
            if scope.insert(name, *sort).is_some() {
                return Err(FrontendError::Duplicate {
                    pos: p.pos,
                    name: name.clone(),
                });
            }
        }
        check_stmts(&p.body, &scope, &sigs)?;
    }
    Ok(())
}

fn check_stmts(
    stmts: &[LabeledStmt],
    scope: &HashMap<&str, Sort>,
    sigs: &HashMap<&str, ProcSig>,
) -> Result<(), FrontendError> {
    for ls in stmts {
        let pos = ls.pos;
        match &ls.stmt {
            SurfaceStmt::Assign(v, e) => {
                let Some(&vs) = scope.get(v.as_str()) else {
                    return Err(FrontendError::UndefinedVariable {
                        pos,
                        name: v.clone(),
                    });
                };
                expect_sort(e, vs, pos, scope)?;
            }
            SurfaceStmt::Assume(e) | SurfaceStmt::Assert(e) => {
                expect_sort(e, Sort::Bool, pos, scope)?;
            }
            SurfaceStmt::Call { callee, actuals } => {
                let Some(sig) = sigs.get(callee.as_str()) else {
                    return Err(FrontendError::UndefinedProcedure {
                        pos,
                        name: callee.clone(),
                    });
                };
                if sig.formals.len() != actuals.len() {
                    return Err(FrontendError::Sort {
                        pos,
                        msg: format!(
                            "call to `{callee}` has {} actuals, expected {}",
                            actuals.len(),
                            sig.formals.len()
                        ),
                    });
                }
                for (a, s) in actuals.iter().zip(&sig.formals) {
                    expect_sort(a, *s, pos, scope)?;
                }
            }
            SurfaceStmt::If(g, t, e) => {
                if let Some(c) = g {
                    expect_sort(c, Sort::Bool, pos, scope)?;
                }
                check_stmts(t, scope, sigs)?;
                check_stmts(e, scope, sigs)?;
            }
            SurfaceStmt::While(g, body) => {
                if let Some(c) = g {
                    expect_sort(c, Sort::Bool, pos, scope)?;
                }
                check_stmts(body, scope, sigs)?;
            }
        }
    }
    Ok(())
}

fn sort_of(e: &Expr, pos: Pos, scope: &HashMap<&str, Sort>) -> Result<Sort, FrontendError> {
    match e {
        Expr::Var(v) => scope
            .get(v.as_str())
            .copied()
            .ok_or_else(|| FrontendError::UndefinedVariable {
                pos,
                name: v.clone(),
            }),
        Expr::Int(_) => Ok(Sort::Int),
        Expr::Bool(_) => Ok(Sort::Bool),
        Expr::Unary(UnOp::Not, a) => {
            expect_sort(a, Sort::Bool, pos, scope)?;
            Ok(Sort::Bool)
        }
        Expr::Unary(UnOp::Neg, a) => {
            expect_sort(a, Sort::Int, pos, scope)?;
            Ok(Sort::Int)
        }
        Expr::Binary(op, a, b) => {
            match op {
                BinOp::Add | BinOp::Sub | BinOp::Mul | BinOp::Lt | BinOp::Le | BinOp::Gt
                | BinOp::Ge => {
                    expect_sort(a, Sort::Int, pos, scope)?;
                    expect_sort(b, Sort::Int, pos, scope)?;
                }
                BinOp::And | BinOp::Or => {
                    expect_sort(a, Sort::Bool, pos, scope)?;
                    expect_sort(b, Sort::Bool, pos, scope)?;
                }
                BinOp::Eq | BinOp::Ne => {
                    let sa = sort_of(a, pos, scope)?;
                    expect_sort(b, sa, pos, scope)?;
                }
            }
            Ok(op.result_sort())
        }
        Expr::Ite(c, a, b) => {
            expect_sort(c, Sort::Bool, pos, scope)?;
            let sa = sort_of(a, pos, scope)?;
            expect_sort(b, sa, pos, scope)?;
            Ok(sa)
        }
    }
}

fn expect_sort(
    e: &Expr,
    want: Sort,
    pos: Pos,
    scope: &HashMap<&str, Sort>,
) -> Result<(), FrontendError> {
    let got = sort_of(e, pos, scope)?;
    if got != want {
        return Err(FrontendError::Sort {
            pos,
            msg: format!("expected {want}, found {got}"),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_two_procedure_listing() {
        // Shape of the guarded-calls example: main with three guarded
        // calls, foo branching on a boolean.
        let src = r#"
            procedure main() {
                var x: int; var z: int; var y: int; var b: bool;
                x := 0;
                if (b) { call foo(x, z); x := 1; }
                if (*) { call bar(z); }
                if (*) { call baz(y); }
                assert x == 1 || z != y - 2;
            }
            procedure foo(a: int, r: int) {
                var d: bool;
                if (d) { assume r == a + 1; } else { assume r == a - 1; }
            }
            procedure bar(w: int) { assume w > 0; }
            procedure baz(v: int) { assume v == 3; }
        "#;
        let prog = parse(src).unwrap();
        assert_eq!(prog.procedures.len(), 4);
        assert!(prog.get("main").is_some());
        assert!(prog.get("foo").is_some());
    }

    #[test]
    fn parses_empty_main() {
        let prog = parse("procedure main() { }").unwrap();
        assert_eq!(prog.procedures.len(), 1);
        assert!(prog.get("main").unwrap().body.is_empty());
    }

    #[test]
    fn rejects_undeclared_procedure() {
        let err = parse("procedure main() { call undeclared(); }").unwrap_err();
        assert!(matches!(err, FrontendError::UndefinedProcedure { .. }));
    }

    #[test]
    fn rejects_sort_errors() {
        let err = parse("procedure main() { var x: int; assume x; }").unwrap_err();
        assert!(matches!(err, FrontendError::Sort { .. }));
        let err = parse("procedure main() { var x: int; x := true; }").unwrap_err();
        assert!(matches!(err, FrontendError::Sort { .. }));
    }

    #[test]
    fn rejects_undefined_variable_with_position() {
        let err = parse("procedure main() {\n  assume y == 1;\n}").unwrap_err();
        match err {
            FrontendError::UndefinedVariable { pos, name } => {
                assert_eq!(name, "y");
                assert_eq!(pos.line, 2);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn rejects_missing_main() {
        let err = parse("procedure helper() { }").unwrap_err();
        assert!(matches!(err, FrontendError::BadMain));
    }

    #[test]
    fn parses_labels_and_ite() {
        let src = r#"
            procedure main() {
                var x: int;
                L1: x := ite(x > 0, x, 0 - x);
                assume x >= 0;
            }
        "#;
        let prog = parse(src).unwrap();
        let main = prog.get("main").unwrap();
        assert_eq!(main.body[0].label.as_deref(), Some("L1"));
    }

    #[test]
    fn operator_precedence() {
        let src = "procedure main() { var x: int; assume x + 1 * 2 == 3 || false && true; }";
        let prog = parse(src).unwrap();
        let main = prog.get("main").unwrap();
        // (x + (1*2)) == 3 || (false && true)
        match &main.body[0].stmt {
            SurfaceStmt::Assume(Expr::Binary(BinOp::Or, lhs, rhs)) => {
                assert!(matches!(**lhs, Expr::Binary(BinOp::Eq, _, _)));
                assert!(matches!(**rhs, Expr::Binary(BinOp::And, _, _)));
            }
            other => panic!("unexpected shape {other:?}"),
        }
    }
}
