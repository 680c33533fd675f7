//! Content-model regular expressions over element names.

use std::collections::BTreeSet;
use std::fmt;

/// Regular expression over element names, as written in DTD content models.
///
/// `Seq` and `Alt` always hold at least two children; use [`RegExpr::seq`]
/// and [`RegExpr::alt`] to build them without worrying about the invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RegExpr {
    Epsilon,
    Atom(String),
    Seq(Vec<RegExpr>),
    Alt(Vec<RegExpr>),
    Star(Box<RegExpr>),
    Plus(Box<RegExpr>),
    Opt(Box<RegExpr>),
}

impl RegExpr {
    pub fn atom(name: impl Into<String>) -> Self {
        RegExpr::Atom(name.into())
    }

    /// Build a sequence, flattening nested sequences and dropping epsilons.
    pub fn seq(items: Vec<RegExpr>) -> Self {
        let mut out = Vec::new();
        for it in items {
            match it {
                RegExpr::Epsilon => {}
                RegExpr::Seq(inner) => out.extend(inner),
                other => out.push(other),
            }
        }
        match out.len() {
            0 => RegExpr::Epsilon,
            1 => out.pop().unwrap(),
            _ => RegExpr::Seq(out),
        }
    }

    /// Build an alternation, flattening nested alternations.
    pub fn alt(items: Vec<RegExpr>) -> Self {
        let mut out = Vec::new();
        for it in items {
            match it {
                RegExpr::Alt(inner) => out.extend(inner),
                other => out.push(other),
            }
        }
        match out.len() {
            0 => RegExpr::Epsilon,
            1 => out.pop().unwrap(),
            _ => RegExpr::Alt(out),
        }
    }

    pub fn star(inner: RegExpr) -> Self {
        RegExpr::Star(Box::new(inner))
    }

    pub fn plus(inner: RegExpr) -> Self {
        RegExpr::Plus(Box::new(inner))
    }

    pub fn opt(inner: RegExpr) -> Self {
        RegExpr::Opt(Box::new(inner))
    }

    /// All element names mentioned in the expression.
    pub fn symbols(&self) -> BTreeSet<String> {
        let mut set = BTreeSet::new();
        self.collect_symbols(&mut set);
        set
    }

    fn collect_symbols(&self, out: &mut BTreeSet<String>) {
        match self {
            RegExpr::Epsilon => {}
            RegExpr::Atom(a) => {
                out.insert(a.clone());
            }
            RegExpr::Seq(items) | RegExpr::Alt(items) => {
                for it in items {
                    it.collect_symbols(out);
                }
            }
            RegExpr::Star(inner) | RegExpr::Plus(inner) | RegExpr::Opt(inner) => {
                inner.collect_symbols(out)
            }
        }
    }

    /// Number of atom occurrences (counting duplicates).
    pub fn atom_count(&self) -> usize {
        match self {
            RegExpr::Epsilon => 0,
            RegExpr::Atom(_) => 1,
            RegExpr::Seq(items) | RegExpr::Alt(items) => {
                items.iter().map(|i| i.atom_count()).sum()
            }
            RegExpr::Star(inner) | RegExpr::Plus(inner) | RegExpr::Opt(inner) => {
                inner.atom_count()
            }
        }
    }

    /// Mark every atom occurrence with a distinct index, numbered 1..
    /// in left-to-right order.
    pub fn mark(&self) -> MarkedRegExpr {
        let mut next = 0u32;
        self.mark_inner(&mut next)
    }

    fn mark_inner(&self, next: &mut u32) -> MarkedRegExpr {
        match self {
            RegExpr::Epsilon => MarkedRegExpr::Epsilon,
            RegExpr::Atom(a) => {
                *next += 1;
                MarkedRegExpr::Atom(a.clone(), *next)
            }
            RegExpr::Seq(items) => {
                MarkedRegExpr::Seq(items.iter().map(|i| i.mark_inner(next)).collect())
            }
            RegExpr::Alt(items) => {
                MarkedRegExpr::Alt(items.iter().map(|i| i.mark_inner(next)).collect())
            }
            RegExpr::Star(inner) => MarkedRegExpr::Star(Box::new(inner.mark_inner(next))),
            RegExpr::Plus(inner) => MarkedRegExpr::Plus(Box::new(inner.mark_inner(next))),
            RegExpr::Opt(inner) => MarkedRegExpr::Opt(Box::new(inner.mark_inner(next))),
        }
    }
}

impl RegExpr {
    /// Precedence-aware rendering: choice binds loosest, then sequence,
    /// then the postfix operators.
    fn fmt_prec(&self, f: &mut fmt::Formatter<'_>, min_prec: u8) -> fmt::Result {
        match self {
            RegExpr::Epsilon => write!(f, "()"),
            RegExpr::Atom(a) => write!(f, "{a}"),
            RegExpr::Seq(items) => {
                let parens = min_prec > 1;
                if parens {
                    write!(f, "(")?;
                }
                for (i, it) in items.iter().enumerate() {
                    if i > 0 {
                        write!(f, ",")?;
                    }
                    it.fmt_prec(f, 2)?;
                }
                if parens {
                    write!(f, ")")?;
                }
                Ok(())
            }
            RegExpr::Alt(items) => {
                let parens = min_prec > 0;
                if parens {
                    write!(f, "(")?;
                }
                for (i, it) in items.iter().enumerate() {
                    if i > 0 {
                        write!(f, "|")?;
                    }
                    it.fmt_prec(f, 1)?;
                }
                if parens {
                    write!(f, ")")?;
                }
                Ok(())
            }
            RegExpr::Star(inner) => {
                inner.fmt_prec(f, 3)?;
                write!(f, "*")
            }
            RegExpr::Plus(inner) => {
                inner.fmt_prec(f, 3)?;
                write!(f, "+")
            }
            RegExpr::Opt(inner) => {
                inner.fmt_prec(f, 3)?;
                write!(f, "?")
            }
        }
    }
}

impl fmt::Display for RegExpr {
    /// DTD-style rendering: `,` for sequence, `|` for choice.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.fmt_prec(f, 0)
    }
}

/// A regular expression whose atoms carry their occurrence index.
/// The indexed occurrences become the states of the position automaton.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MarkedRegExpr {
    Epsilon,
    Atom(String, u32),
    Seq(Vec<MarkedRegExpr>),
    Alt(Vec<MarkedRegExpr>),
    Star(Box<MarkedRegExpr>),
    Plus(Box<MarkedRegExpr>),
    Opt(Box<MarkedRegExpr>),
}

impl MarkedRegExpr {
    /// Atom positions in index order, as (symbol, index) pairs.
    pub fn positions(&self) -> Vec<(String, u32)> {
        let mut out = Vec::new();
        self.collect_positions(&mut out);
        out.sort_by_key(|(_, i)| *i);
        out
    }

    fn collect_positions(&self, out: &mut Vec<(String, u32)>) {
        match self {
            MarkedRegExpr::Epsilon => {}
            MarkedRegExpr::Atom(a, i) => out.push((a.clone(), *i)),
            MarkedRegExpr::Seq(items) | MarkedRegExpr::Alt(items) => {
                for it in items {
                    it.collect_positions(out);
                }
            }
            MarkedRegExpr::Star(inner)
            | MarkedRegExpr::Plus(inner)
            | MarkedRegExpr::Opt(inner) => inner.collect_positions(out),
        }
    }
}
