//! Static safety check: every query subexpression of a plan may only read
//! data that is guaranteed fully buffered at the moment its handler fires.
//!
//! For an `on-first past(S)` handler on stream `$y`, each dependency `b`
//! must be past when the handler fires: `b ∈ S`, or some `a ∈ S` is ordered
//! after every `b` (`Ord(b,a)`). Whole-subtree outputs `{$z}`/`{$z/π}` are
//! only allowed for `$y` itself, and only once *all* children of `$y` are
//! past. For an `on a as $x` handler, each dependency `b` of each maximal
//! query subexpression must satisfy `Ord(b,a)`, and a simple handler body
//! may only output the handler's own variable.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use thiserror::Error;

use super::ast::{maximal_query_subexprs, Flux, Handler, PastSpec};
use crate::query::{dependencies, Query};
use crate::schema::{NodeKind, Schema};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SafetyViolation {
    /// Handler-index path from the plan root to the offending handler.
    pub location: Vec<usize>,
    pub kind: ViolationKind,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    /// A dependency of an `on-first` body may still arrive when it fires.
    DependencyNotPast,
    /// A `{$z}`/`{$z/π}` output is not covered by the handler's past set.
    SubtreeOutputUnsafe,
    /// A dependency of an `on` body is not ordered before the handler symbol.
    OnHandlerOrder,
    /// A simple `on` body outputs a variable other than its own binder.
    OnHandlerForeignVar,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ViolationKind::DependencyNotPast => "dependency-not-past",
            ViolationKind::SubtreeOutputUnsafe => "subtree-output-unsafe",
            ViolationKind::OnHandlerOrder => "on-handler-order",
            ViolationKind::OnHandlerForeignVar => "on-handler-foreign-var",
        })
    }
}

impl fmt::Display for SafetyViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] handler {:?}: {}", self.kind, self.location, self.detail)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SafetyError {
    #[error("handler at {location:?} refers to `{symbol}`, which cannot occur among the children of ${stream_var}")]
    UnknownElement {
        location: Vec<usize>,
        symbol: String,
        stream_var: String,
    },
    #[error("cannot determine the element type of stream variable ${var}")]
    UnresolvedVariable { var: String },
}

/// Options for [`check_safety_with`]. `ignore_unknown_handlers` downgrades
/// handlers over symbols foreign to their stream (they can never fire) from
/// an error to a silent pass, for use with dead-loop tolerant compilation.
#[derive(Debug, Clone, Copy, Default)]
pub struct SafetyOptions {
    pub ignore_unknown_handlers: bool,
}

pub fn check_safety(f: &Flux, schema: &Schema) -> Result<Vec<SafetyViolation>, SafetyError> {
    check_safety_with(f, schema, SafetyOptions::default())
}

pub fn check_safety_with(
    f: &Flux,
    schema: &Schema,
    opts: SafetyOptions,
) -> Result<Vec<SafetyViolation>, SafetyError> {
    let mut checker = Checker {
        schema,
        opts,
        env: HashMap::from([("ROOT".to_string(), NodeKind::Document)]),
        path: Vec::new(),
        out: Vec::new(),
    };
    checker.walk(f)?;
    Ok(checker.out)
}

struct Checker<'a> {
    schema: &'a Schema,
    opts: SafetyOptions,
    /// Element kind of every stream variable in scope.
    env: HashMap<String, NodeKind>,
    path: Vec<usize>,
    out: Vec<SafetyViolation>,
}

impl Checker<'_> {
    fn violation(&mut self, kind: ViolationKind, detail: String) {
        self.out.push(SafetyViolation {
            location: self.path.clone(),
            kind,
            detail,
        });
    }

    /// `Ord(b, a)` among the children of `kind`; vacuously true when the
    /// element is undeclared or has text content.
    fn ord(&self, kind: &NodeKind, b: &str, a: &str) -> bool {
        self.schema.ord(kind, b, a).unwrap_or(true)
    }

    fn past_covers(&self, kind: &NodeKind, s: &BTreeSet<String>, b: &str) -> bool {
        s.contains(b) || s.iter().any(|a| self.ord(kind, b, a))
    }

    fn walk(&mut self, f: &Flux) -> Result<(), SafetyError> {
        let Flux::Ps { var, handlers, .. } = f else {
            return Ok(());
        };
        let kind = self
            .env
            .get(var)
            .cloned()
            .ok_or_else(|| SafetyError::UnresolvedVariable { var: var.clone() })?;
        let symbols: BTreeSet<String> = self
            .schema
            .symb(&kind)
            .unwrap_or_default()
            .into_iter()
            .collect();

        for (i, h) in handlers.iter().enumerate() {
            self.path.push(i);
            match h {
                Handler::OnFirst { past, body } => {
                    if let PastSpec::Set(s) = past {
                        if let Some(bad) = s.iter().find(|sym| !symbols.contains(*sym)) {
                            if !self.opts.ignore_unknown_handlers {
                                let err = SafetyError::UnknownElement {
                                    location: self.path.clone(),
                                    symbol: bad.clone(),
                                    stream_var: var.clone(),
                                };
                                self.path.pop();
                                return Err(err);
                            }
                        }
                    }
                    let s = past.resolve(&symbols);
                    for b in dependencies(var, body) {
                        if !self.past_covers(&kind, &s, &b) {
                            self.violation(
                                ViolationKind::DependencyNotPast,
                                format!("`{b}` children of ${var} may still arrive when this handler fires"),
                            );
                        }
                    }
                    for z in free_output_vars(body) {
                        if z != *var {
                            self.violation(
                                ViolationKind::SubtreeOutputUnsafe,
                                format!("subtree of ${z} is output inside a handler on ${var}"),
                            );
                        } else {
                            for b in &symbols {
                                if !self.past_covers(&kind, &s, b) {
                                    self.violation(
                                        ViolationKind::SubtreeOutputUnsafe,
                                        format!("subtree of ${var} is output while `{b}` children may still arrive"),
                                    );
                                }
                            }
                        }
                    }
                }
                Handler::On { sym, var: x, body } => {
                    if !symbols.contains(sym) {
                        if !self.opts.ignore_unknown_handlers {
                            let err = SafetyError::UnknownElement {
                                location: self.path.clone(),
                                symbol: sym.clone(),
                                stream_var: var.clone(),
                            };
                            self.path.pop();
                            return Err(err);
                        }
                        self.path.pop();
                        continue; // handler can never fire; nothing to check
                    }
                    for (_, alpha) in maximal_query_subexprs(body) {
                        for b in dependencies(var, alpha) {
                            if !self.ord(&kind, &b, sym) {
                                self.violation(
                                    ViolationKind::OnHandlerOrder,
                                    format!("`{b}` children of ${var} may appear after a `{sym}`"),
                                );
                            }
                        }
                    }
                    if let Flux::Simple(alpha) = &**body {
                        for u in var_outs(alpha) {
                            if u != *x {
                                self.violation(
                                    ViolationKind::OnHandlerForeignVar,
                                    format!("`{{${u}}}` is output inside a handler binding ${x}"),
                                );
                            }
                        }
                    }
                    let shadowed = self.env.insert(x.clone(), NodeKind::element(sym));
                    let result = self.walk(body);
                    match shadowed {
                        Some(k) => self.env.insert(x.clone(), k),
                        None => self.env.remove(x),
                    };
                    result?;
                }
            }
            self.path.pop();
        }
        Ok(())
    }
}

/// Variables output via `{$z}` or `{$z/π}` at positions where they are free.
fn free_output_vars(q: &Query) -> BTreeSet<String> {
    fn go(q: &Query, bound: &mut Vec<String>, out: &mut BTreeSet<String>) {
        match q {
            Query::Empty | Query::Str(_) => {}
            Query::Seq(items) => items.iter().for_each(|i| go(i, bound, out)),
            Query::VarOut(v) => {
                if !bound.iter().any(|b| b == v) {
                    out.insert(v.clone());
                }
            }
            Query::PathOut(p) => {
                if !bound.iter().any(|b| *b == p.var) {
                    out.insert(p.var.clone());
                }
            }
            Query::For { var, body, .. } | Query::ForWhere { var, body, .. } => {
                bound.push(var.clone());
                go(body, bound, out);
                bound.pop();
            }
            Query::If { body, .. } => go(body, bound, out),
        }
    }
    let mut out = BTreeSet::new();
    go(q, &mut Vec::new(), &mut out);
    out
}

/// All `{$u}` variables in a simple expression (which has no binders).
fn var_outs(q: &Query) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    let items: &[Query] = match q {
        Query::Seq(items) => items,
        single => std::slice::from_ref(single),
    };
    for item in items {
        let inner = match item {
            Query::If { body, .. } => &**body,
            other => other,
        };
        if let Query::VarOut(u) = inner {
            out.insert(u.clone());
        }
    }
    out
}
