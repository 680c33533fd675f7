//! Parser for the concrete query syntax.
//!
//! Input is read in *template mode*: literal markup interleaved with `{…}`
//! expression blocks, exactly like the body of a `return`. Literal runs are
//! trimmed of surrounding whitespace, so indentation never leaks into the
//! output; interior spacing is kept. A literal run consisting of `()` alone
//! denotes the empty expression. Braces cannot appear in literal text.
//!
//! Inside `{…}`: `for $x in $y/a/b [where χ] return TEMPLATE`,
//! `if χ then TEMPLATE`, `$x` (subtree output), `$x/a/b` (path output), or
//! `()`. `$ROOT` may be written as a leading `/` on any path. Conditions
//! support `and`/`or`/`not`, comparisons against quoted strings, numbers, or
//! other paths, bare paths as existence tests, `exists`/`empty`, and a
//! trailing `/text()` step (accepted and dropped — comparisons read text
//! content anyway).
//!
//! The parser enforces scoping (every `$x` must be bound, except `$ROOT`)
//! and renames re-used binder names so each binder is unique in the result.

use std::collections::HashSet;
use std::rc::Rc;

use thiserror::Error;

use super::ast::{Cond, FixedPath, Query, RelOp, VarPath};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("query syntax error at line {line}, column {col}: {msg}")]
pub struct ParseError {
    pub line: usize,
    pub col: usize,
    pub msg: String,
}

pub fn parse_query(text: &str) -> Result<Query, ParseError> {
    let mut p = Parser::new(text);
    let q = p.template(Stop::Eof)?;
    p.skip_ws();
    if !p.at_end() {
        return Err(p.err("unexpected `}` without a matching `{`"));
    }
    Ok(q)
}

/// Where a template run ends: end of input, the `}` closing the surrounding
/// block, or — for event-handler bodies — a `;`/`}` at this nesting depth.
#[derive(Clone, Copy, PartialEq, Eq)]
pub(crate) enum Stop {
    Eof,
    Brace,
    Handler,
}

/// Cursor shared between the query grammar and the stream-plan grammar that
/// embeds it; owns positions, scoping, and binder uniqueness.
pub(crate) struct Parser<'a> {
    text: &'a str,
    pos: usize,
    /// Innermost-last stack of (source name, unique name) bindings.
    scope: Vec<(String, String)>,
    /// All binder names handed out, for uniqueness.
    used: HashSet<String>,
}

impl<'a> Parser<'a> {
    pub(crate) fn new(text: &'a str) -> Parser<'a> {
        Parser {
            text,
            pos: 0,
            scope: Vec::new(),
            used: HashSet::new(),
        }
    }

    pub(crate) fn at_end(&self) -> bool {
        self.pos >= self.text.len()
    }

    pub(crate) fn rest(&self) -> &'a str {
        &self.text[self.pos..]
    }

    pub(crate) fn advance_bytes(&mut self, n: usize) {
        self.pos = (self.pos + n).min(self.text.len());
    }

    pub(crate) fn err(&self, msg: impl Into<String>) -> ParseError {
        let consumed = &self.text[..self.pos.min(self.text.len())];
        let line = consumed.matches('\n').count() + 1;
        let col = consumed
            .rsplit_once('\n')
            .map_or(consumed.chars().count(), |(_, tail)| tail.chars().count())
            + 1;
        ParseError {
            line,
            col,
            msg: msg.into(),
        }
    }

    pub(crate) fn peek(&self) -> Option<char> {
        self.text[self.pos..].chars().next()
    }

    pub(crate) fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += c.len_utf8();
        Some(c)
    }

    pub(crate) fn skip_ws(&mut self) {
        while self.peek().is_some_and(char::is_whitespace) {
            self.bump();
        }
    }

    pub(crate) fn eat(&mut self, token: &str) -> bool {
        if self.text[self.pos..].starts_with(token) {
            self.pos += token.len();
            true
        } else {
            false
        }
    }

    /// Consumes a keyword if present (must not run into an identifier).
    pub(crate) fn keyword(&mut self, kw: &str) -> bool {
        self.skip_ws();
        if self.text[self.pos..].starts_with(kw) {
            let after = self.text[self.pos + kw.len()..].chars().next();
            if !after.is_some_and(|c| c.is_ascii_alphanumeric() || c == '_') {
                self.pos += kw.len();
                return true;
            }
        }
        false
    }

    pub(crate) fn expect_keyword(&mut self, kw: &str) -> Result<(), ParseError> {
        if self.keyword(kw) {
            Ok(())
        } else {
            Err(self.err(format!("expected `{kw}`")))
        }
    }

    pub(crate) fn ident(&mut self) -> Result<String, ParseError> {
        let start = self.pos;
        match self.peek() {
            Some(c) if c.is_ascii_alphabetic() || c == '_' => {
                self.bump();
            }
            _ => return Err(self.err("expected a name")),
        }
        while self
            .peek()
            .is_some_and(|c| c.is_ascii_alphanumeric() || c == '_')
        {
            self.bump();
        }
        Ok(self.text[start..self.pos].to_string())
    }

    // ------------------------------------------------------------ scoping

    pub(crate) fn bind(&mut self, name: &str) -> Result<String, ParseError> {
        if name == "ROOT" {
            return Err(self.err("`$ROOT` cannot be rebound"));
        }
        let unique = if self.used.insert(name.to_string()) {
            name.to_string()
        } else {
            let mut n = 2;
            loop {
                let candidate = format!("{name}_{n}");
                if self.used.insert(candidate.clone()) {
                    break candidate;
                }
                n += 1;
            }
        };
        self.scope.push((name.to_string(), unique.clone()));
        Ok(unique)
    }

    pub(crate) fn resolve(&self, name: &str) -> Option<String> {
        if name == "ROOT" {
            return Some("ROOT".to_string());
        }
        self.scope
            .iter()
            .rev()
            .find(|(src, _)| src == name)
            .map(|(_, unique)| unique.clone())
    }

    pub(crate) fn pop_scope(&mut self) {
        self.scope.pop();
    }

    // ----------------------------------------------------------- template

    /// Literal text with embedded `{…}` blocks, up to the given stop: end of
    /// input, the `}` closing the surrounding block, or (for handler bodies)
    /// an unconsumed `;`/`}` at this depth.
    pub(crate) fn template(&mut self, stop: Stop) -> Result<Query, ParseError> {
        let mut items = Vec::new();
        let mut lit_start = self.pos;
        loop {
            match self.peek() {
                Some('{') => {
                    self.flush_literal(lit_start, &mut items)?;
                    self.bump();
                    let e = self.expr()?;
                    self.skip_ws();
                    if !self.eat("}") {
                        return Err(self.err("expected `}` to close the expression"));
                    }
                    items.push(e);
                    lit_start = self.pos;
                }
                Some('}') if stop != Stop::Eof => {
                    self.flush_literal(lit_start, &mut items)?;
                    return Ok(Query::seq(items));
                }
                Some('}') => return Err(self.err("unexpected `}` without a matching `{`")),
                Some(';') if stop == Stop::Handler => {
                    self.flush_literal(lit_start, &mut items)?;
                    return Ok(Query::seq(items));
                }
                Some(_) => {
                    self.bump();
                }
                None => {
                    if stop == Stop::Brace {
                        return Err(self.err("unexpected end of input inside `{…}`"));
                    }
                    self.flush_literal(lit_start, &mut items)?;
                    return Ok(Query::seq(items));
                }
            }
        }
    }

    fn flush_literal(&self, start: usize, items: &mut Vec<Query>) -> Result<(), ParseError> {
        let lit = self.text[start..self.pos].trim();
        if lit.is_empty() || lit == "()" {
            return Ok(()); // `()` is the empty expression; Seq drops it
        }
        items.push(Query::Str(lit.to_string()));
        Ok(())
    }

    // --------------------------------------------------------- expressions

    fn expr(&mut self) -> Result<Query, ParseError> {
        self.skip_ws();
        if self.keyword("for") {
            return self.for_expr();
        }
        if self.keyword("if") {
            return self.if_expr();
        }
        if self.keyword("process-stream") || self.keyword("ps") {
            return Err(self.err(
                "`process-stream` must be the sole block of a plan, with at most literal text around it",
            ));
        }
        match self.peek() {
            Some('(') => {
                self.bump();
                self.skip_ws();
                if self.eat(")") {
                    Ok(Query::Empty)
                } else {
                    Err(self.err("expected `()`"))
                }
            }
            Some('$') | Some('/') => {
                let (var, path) = self.var_path(false)?;
                Ok(match path {
                    None => Query::VarOut(var),
                    Some(path) => Query::PathOut(VarPath::new(var, path)),
                })
            }
            _ => Err(self.err(
                "expected an expression: `for`, `if`, `()`, or a variable/path like `$x/a`",
            )),
        }
    }

    fn for_expr(&mut self) -> Result<Query, ParseError> {
        self.skip_ws();
        if !self.eat("$") {
            return Err(self.err("expected a variable like `$x` after `for`"));
        }
        let name = self.ident()?;
        self.expect_keyword("in")?;
        self.skip_ws();
        let (source, path) = self.var_path(false)?;
        let path = path.ok_or_else(|| self.err("`for` needs a path, e.g. `$y/a`"))?;

        let var = self.bind(&name)?;
        let result = (|| {
            let cond = if self.keyword("where") {
                Some(Rc::new(self.cond()?))
            } else {
                None
            };
            self.expect_keyword("return")?;
            self.skip_ws();
            let body = Box::new(self.template(Stop::Brace)?);
            Ok(match cond {
                None => Query::For {
                    var: var.clone(),
                    source: source.clone(),
                    path: path.clone(),
                    body,
                },
                Some(cond) => Query::ForWhere {
                    var: var.clone(),
                    source: source.clone(),
                    path: path.clone(),
                    cond,
                    body,
                },
            })
        })();
        self.scope.pop();
        result
    }

    fn if_expr(&mut self) -> Result<Query, ParseError> {
        let cond = self.cond()?;
        self.expect_keyword("then")?;
        self.skip_ws();
        let body = self.template(Stop::Brace)?;
        Ok(Query::if_then(Rc::new(cond), body))
    }

    /// `$x`, `$x/a/b`, or `/a/b` (implicit `$ROOT`). In conditions a final
    /// `/text()` is allowed and ignored.
    fn var_path(&mut self, in_cond: bool) -> Result<(String, Option<FixedPath>), ParseError> {
        let var = if self.eat("$") {
            let name = self.ident()?;
            self.resolve(&name)
                .ok_or_else(|| self.err(format!("variable `${name}` is not in scope")))?
        } else if self.peek() == Some('/') {
            "ROOT".to_string()
        } else {
            return Err(self.err("expected `$variable` or `/path`"));
        };
        let mut steps = Vec::new();
        while self.peek() == Some('/') {
            self.bump();
            if in_cond && self.eat("text()") {
                if self.peek() == Some('/') {
                    return Err(self.err("`text()` must be the last path step"));
                }
                break;
            }
            match self.peek() {
                Some('/') => return Err(self.err("descendant steps `//` are not supported")),
                Some('*') => return Err(self.err("wildcard steps are not supported")),
                Some('@') => return Err(self.err("attributes are not supported")),
                _ => {}
            }
            steps.push(self.ident()?);
            if self.peek() == Some('[') {
                return Err(self.err("path predicates `[…]` are not supported"));
            }
        }
        if steps.is_empty() {
            Ok((var, None))
        } else {
            Ok((var, Some(FixedPath::new(steps))))
        }
    }

    // ---------------------------------------------------------- conditions

    fn cond(&mut self) -> Result<Cond, ParseError> {
        let mut left = self.cond_and()?;
        while self.keyword("or") {
            let right = self.cond_and()?;
            left = Cond::or(left, right);
        }
        Ok(left)
    }

    fn cond_and(&mut self) -> Result<Cond, ParseError> {
        let mut left = self.cond_unary()?;
        while self.keyword("and") {
            let right = self.cond_unary()?;
            left = Cond::and(left, right);
        }
        Ok(left)
    }

    fn cond_unary(&mut self) -> Result<Cond, ParseError> {
        self.skip_ws();
        if self.keyword("not") {
            return Ok(Cond::not(self.cond_unary()?));
        }
        if self.keyword("true") {
            return Ok(Cond::True);
        }
        if self.keyword("exists") {
            return Ok(Cond::Exists(self.cond_path_arg()?));
        }
        if self.keyword("empty") {
            return Ok(Cond::not(Cond::Exists(self.cond_path_arg()?)));
        }
        if self.peek() == Some('(') {
            self.bump();
            let inner = self.cond()?;
            self.skip_ws();
            if !self.eat(")") {
                return Err(self.err("expected `)`"));
            }
            return Ok(inner);
        }
        self.cond_atom()
    }

    /// Path argument of `exists`/`empty`, parenthesized or bare.
    fn cond_path_arg(&mut self) -> Result<VarPath, ParseError> {
        self.skip_ws();
        let parens = self.eat("(");
        self.skip_ws();
        let (var, path) = self.var_path(true)?;
        let path = path.ok_or_else(|| self.err("expected a path like `$x/a`"))?;
        if parens {
            self.skip_ws();
            if !self.eat(")") {
                return Err(self.err("expected `)`"));
            }
        }
        Ok(VarPath::new(var, path))
    }

    fn cond_atom(&mut self) -> Result<Cond, ParseError> {
        self.skip_ws();
        let (var, path) = self.var_path(true)?;
        let path = path.ok_or_else(|| {
            self.err("conditions test paths, not bare variables; write `$x/a`")
        })?;
        let lhs = VarPath::new(var, path);
        self.skip_ws();
        let op = if self.eat("<=") || self.eat("≤") {
            Some(RelOp::Le)
        } else if self.eat(">=") || self.eat("≥") {
            Some(RelOp::Ge)
        } else if self.eat("!=") {
            return Err(self.err("`!=` is not supported; use `not … = …`"));
        } else if self.eat("=") {
            Some(RelOp::Eq)
        } else if self.eat("<") {
            Some(RelOp::Lt)
        } else if self.eat(">") {
            Some(RelOp::Gt)
        } else {
            None
        };
        let Some(op) = op else {
            return Ok(Cond::Exists(lhs));
        };
        self.skip_ws();
        match self.peek() {
            Some('$') | Some('/') => {
                let (var, path) = self.var_path(true)?;
                let path = path.ok_or_else(|| self.err("expected a path like `$y/b`"))?;
                Ok(Cond::CmpPath {
                    lhs,
                    op,
                    rhs: VarPath::new(var, path),
                })
            }
            Some(q @ ('"' | '\'')) => {
                self.bump();
                let start = self.pos;
                while self.peek().is_some_and(|c| c != q) {
                    self.bump();
                }
                let rhs = self.text[start..self.pos].to_string();
                if !self.eat(&q.to_string()) {
                    return Err(self.err("unterminated string literal"));
                }
                Ok(Cond::CmpLit { lhs, op, rhs })
            }
            Some(c) if c.is_ascii_digit() || c == '-' => {
                let start = self.pos;
                self.bump();
                while self.peek().is_some_and(|c| c.is_ascii_digit() || c == '.') {
                    self.bump();
                }
                Ok(Cond::CmpLit {
                    lhs,
                    op,
                    rhs: self.text[start..self.pos].to_string(),
                })
            }
            _ => Err(self.err("expected a string, number, or path after the comparison")),
        }
    }
}
