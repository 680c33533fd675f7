//! Event-handler plans. A plan is either a *simple* query (see
//! [`is_simple`]) or literal text wrapped around a `process-stream` block
//! whose handlers react to the children of one stream variable.

use std::collections::BTreeSet;
use std::fmt;

use crate::query::analysis::{queries_alpha_eq, vars_alpha_eq, with_renaming, VarMap};
use crate::query::{free_vars as query_free_vars, Query};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Flux {
    /// A query emitted verbatim; must satisfy [`is_simple`].
    Simple(Query),
    /// `prefix { process-stream $var: handlers } suffix`
    Ps {
        prefix: String,
        var: String,
        handlers: Vec<Handler>,
        suffix: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Handler {
    /// `on-first past(S) return body` — fires once, as soon as no `S`-child
    /// can appear anymore (or at the end of the children if never earlier).
    OnFirst { past: PastSpec, body: Query },
    /// `on sym as $var return body` — fires for every `sym` child.
    On {
        sym: String,
        var: String,
        body: Box<Flux>,
    },
}

/// The waited-on symbol set of an `on-first` handler. `All` (written
/// `past(*)`) stands for every child symbol of the stream variable and is
/// kept symbolic until a schema is bound.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PastSpec {
    All,
    Set(BTreeSet<String>),
}

impl PastSpec {
    pub fn set<S: Into<String>>(symbols: impl IntoIterator<Item = S>) -> PastSpec {
        PastSpec::Set(symbols.into_iter().map(Into::into).collect())
    }

    pub fn empty() -> PastSpec {
        PastSpec::Set(BTreeSet::new())
    }

    /// Concrete symbol set, given the full child alphabet for `*`.
    pub fn resolve(&self, all: &BTreeSet<String>) -> BTreeSet<String> {
        match self {
            PastSpec::All => all.clone(),
            PastSpec::Set(s) => s.clone(),
        }
    }

    fn union_into(&self, acc: &mut Option<BTreeSet<String>>) {
        match (self, acc.as_mut()) {
            (PastSpec::All, _) => *acc = None,
            (PastSpec::Set(s), Some(set)) => set.extend(s.iter().cloned()),
            (PastSpec::Set(_), None) => {}
        }
    }
}

impl Flux {
    /// Wraps a query, checking the simple-expression restriction.
    pub fn simple(q: Query) -> Result<Flux, NotSimple> {
        if is_simple(&q) {
            Ok(Flux::Simple(q))
        } else {
            Err(NotSimple(q))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("not a simple expression (only strings, guarded strings, and at most one subtree output are allowed outside a process-stream block): {0}")]
pub struct NotSimple(pub Query);

/// True iff `q` is a sequence of strings and guarded strings with at most
/// one `{$u}` (or guarded `{$u}`) in between — and, when that subtree output
/// is present, no condition on or before it mentions `$u` (conditions after
/// it may: by then the `$u` subtree has fully streamed by).
pub fn is_simple(q: &Query) -> bool {
    let items: &[Query] = match q {
        Query::Empty => &[],
        Query::Seq(items) => items,
        single => std::slice::from_ref(single),
    };
    let mut beta: Option<(usize, &str)> = None;
    for (i, item) in items.iter().enumerate() {
        let inner = match item {
            Query::If { body, .. } => &**body,
            other => other,
        };
        match inner {
            Query::Str(_) => {}
            Query::VarOut(u) => {
                if beta.is_some() {
                    return false; // a second subtree output
                }
                beta = Some((i, u));
            }
            _ => return false,
        }
    }
    // Guards up to and including the subtree output must not test its
    // variable (they would run before the subtree has fully streamed by;
    // guards after it may).
    if let Some((bi, u)) = beta {
        for item in &items[..=bi] {
            if let Query::If { cond, .. } = item {
                if cond.vars().contains(u) {
                    return false;
                }
            }
        }
    }
    true
}

/// Free variables, with `on … as $x` and `for $x in …` binding `$x`.
pub fn free_vars(f: &Flux) -> BTreeSet<String> {
    match f {
        Flux::Simple(q) => query_free_vars(q),
        Flux::Ps { var, handlers, .. } => {
            let mut out = BTreeSet::new();
            out.insert(var.clone());
            for h in handlers {
                match h {
                    Handler::OnFirst { body, .. } => out.extend(query_free_vars(body)),
                    Handler::On { var, body, .. } => {
                        let mut inner = free_vars(body);
                        inner.remove(var);
                        out.extend(inner);
                    }
                }
            }
            out
        }
    }
}

/// Symbols some handler in the list reacts to: `{a}` per `on a`, the waited
/// set per `on-first`. `All` in any member makes the union `All`.
pub fn hsymb(handlers: &[Handler]) -> PastSpec {
    let mut acc = Some(BTreeSet::new());
    for h in handlers {
        match h {
            Handler::On { sym, .. } => {
                if let Some(set) = acc.as_mut() {
                    set.insert(sym.clone());
                }
            }
            Handler::OnFirst { past, .. } => past.union_into(&mut acc),
        }
    }
    match acc {
        Some(set) => PastSpec::Set(set),
        None => PastSpec::All,
    }
}

/// All query subexpressions not contained in a larger one, paired with the
/// handler-index path leading to them. Surrounding prefix/suffix strings are
/// plan syntax, not queries, and are not reported.
pub fn maximal_query_subexprs(f: &Flux) -> Vec<(Vec<usize>, &Query)> {
    fn walk<'a>(f: &'a Flux, path: &mut Vec<usize>, out: &mut Vec<(Vec<usize>, &'a Query)>) {
        match f {
            Flux::Simple(q) => out.push((path.clone(), q)),
            Flux::Ps { handlers, .. } => {
                for (i, h) in handlers.iter().enumerate() {
                    path.push(i);
                    match h {
                        Handler::OnFirst { body, .. } => out.push((path.clone(), body)),
                        Handler::On { body, .. } => walk(body, path, out),
                    }
                    path.pop();
                }
            }
        }
    }
    let mut out = Vec::new();
    walk(f, &mut Vec::new(), &mut out);
    out
}

/// Structural equality modulo consistent renaming of bound variables
/// (handler binders and loop binders); free variables, symbols, and strings
/// must match exactly.
pub fn alpha_eq(a: &Flux, b: &Flux) -> bool {
    fn go(a: &Flux, b: &Flux, map: &mut VarMap) -> bool {
        match (a, b) {
            (Flux::Simple(x), Flux::Simple(y)) => queries_alpha_eq(x, y, map),
            (
                Flux::Ps {
                    prefix: p1,
                    var: v1,
                    handlers: h1,
                    suffix: s1,
                },
                Flux::Ps {
                    prefix: p2,
                    var: v2,
                    handlers: h2,
                    suffix: s2,
                },
            ) => {
                p1 == p2
                    && s1 == s2
                    && vars_alpha_eq(v1, v2, map)
                    && h1.len() == h2.len()
                    && h1.iter().zip(h2).all(|(x, y)| handlers_eq(x, y, map))
            }
            _ => false,
        }
    }

    fn handlers_eq(a: &Handler, b: &Handler, map: &mut VarMap) -> bool {
        match (a, b) {
            (
                Handler::OnFirst { past: p1, body: b1 },
                Handler::OnFirst { past: p2, body: b2 },
            ) => p1 == p2 && queries_alpha_eq(b1, b2, map),
            (
                Handler::On {
                    sym: s1,
                    var: v1,
                    body: b1,
                },
                Handler::On {
                    sym: s2,
                    var: v2,
                    body: b2,
                },
            ) => s1 == s2 && with_renaming(map, v1, v2, |map| go(b1, b2, map)),
            _ => false,
        }
    }

    go(a, b, &mut VarMap::new())
}

impl fmt::Display for PastSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PastSpec::All => write!(f, "past(*)"),
            PastSpec::Set(s) => {
                write!(f, "past(")?;
                for (i, sym) in s.iter().enumerate() {
                    if i > 0 {
                        write!(f, ",")?;
                    }
                    write!(f, "{sym}")?;
                }
                write!(f, ")")
            }
        }
    }
}

impl Flux {
    fn fmt_indented(&self, f: &mut fmt::Formatter<'_>, depth: usize) -> fmt::Result {
        match self {
            Flux::Simple(q) => write!(f, "{q}"),
            Flux::Ps {
                prefix,
                var,
                handlers,
                suffix,
            } => {
                if !prefix.is_empty() {
                    write!(f, "{prefix} ")?;
                }
                writeln!(f, "{{ ps ${var}:")?;
                let pad = "  ".repeat(depth + 1);
                for (i, h) in handlers.iter().enumerate() {
                    write!(f, "{pad}")?;
                    match h {
                        Handler::OnFirst { past, body } => {
                            write!(f, "on-first {past} return {body}")?;
                        }
                        Handler::On { sym, var, body } => {
                            write!(f, "on {sym} as ${var} return ")?;
                            match &**body {
                                Flux::Simple(q) => write!(f, "{q}")?,
                                ps => {
                                    writeln!(f)?;
                                    write!(f, "{pad}  ")?;
                                    ps.fmt_indented(f, depth + 2)?;
                                }
                            }
                        }
                    }
                    if i + 1 < handlers.len() {
                        writeln!(f, ";")?;
                    }
                }
                write!(f, " }}")?;
                if !suffix.is_empty() {
                    write!(f, " {suffix}")?;
                }
                Ok(())
            }
        }
    }
}

impl fmt::Display for Flux {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.fmt_indented(f, 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::query::parse_query;

    fn q(text: &str) -> Query {
        // A scope so `$x`/`$y` parse as free variables.
        let wrapped = format!(
            "{{ for $x in $ROOT/x return {{ for $y in $x/y return {text} }} }}"
        );
        let mut query = parse_query(&wrapped).unwrap();
        for _ in 0..2 {
            query = match query {
                Query::For { body, .. } => *body,
                other => panic!("scope wrapper vanished: {other}"),
            };
        }
        query
    }

    #[test]
    fn one_guarded_subtree_output_is_simple() {
        assert!(is_simple(&q("<a>{$x}</a> { if $x/b = 5 then <b>5</b> }")));
        assert!(!is_simple(&q("{$x} {$y}")));
    }

    #[test]
    fn guards_before_the_output_must_not_test_it() {
        // The guard runs before the `$x` subtree has fully streamed by.
        assert!(!is_simple(&q("{ if $x/b = 5 then <b>5</b> } {$x}")));
        assert!(!is_simple(&q("{ if $x/b then {$x} }")));
        // Guards over other variables are fine anywhere.
        assert!(is_simple(&q("{ if $y/b then ok } {$x}")));
        assert!(is_simple(&q("{ if $y/b then {$x} }")));
    }

    #[test]
    fn loops_and_path_outputs_are_not_simple() {
        assert!(is_simple(&Query::Empty));
        assert!(is_simple(&q("plain text")));
        assert!(!is_simple(&q("{ for $a in $x/a return {$a} }")));
        assert!(!is_simple(&q("{$x/title}")));
        assert!(Flux::simple(q("{ for $a in $x/a return {$a} }")).is_err());
    }

    #[test]
    fn handler_symbol_union() {
        let on = |sym: &str| Handler::On {
            sym: sym.into(),
            var: "v".into(),
            body: Box::new(Flux::Simple(Query::Empty)),
        };
        let ofp = |past: PastSpec| Handler::OnFirst {
            past,
            body: Query::Empty,
        };
        assert_eq!(hsymb(&[]), PastSpec::empty());
        assert_eq!(
            hsymb(&[on("a"), ofp(PastSpec::set(["b", "c"])), on("c")]),
            PastSpec::set(["a", "b", "c"])
        );
        assert_eq!(hsymb(&[on("a"), ofp(PastSpec::All)]), PastSpec::All);
    }
}
