//! Abstract syntax for the query fragment: sequences of literal markup,
//! for-loops over fixed downward paths, subtree output, and conditionals.

use std::fmt;
use std::rc::Rc;

/// A downward path of child steps `a/b/c`: no wildcards, no `//`, no
/// predicates. Always at least one step.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct FixedPath {
    steps: Vec<String>,
}

impl FixedPath {
    pub fn new(steps: Vec<String>) -> FixedPath {
        assert!(!steps.is_empty(), "a fixed path has at least one step");
        FixedPath { steps }
    }

    pub fn single(step: impl Into<String>) -> FixedPath {
        FixedPath {
            steps: vec![step.into()],
        }
    }

    pub fn steps(&self) -> &[String] {
        &self.steps
    }

    pub fn first(&self) -> &str {
        &self.steps[0]
    }

    pub fn is_single(&self) -> bool {
        self.steps.len() == 1
    }

    /// The path after the first step, if any.
    pub fn rest(&self) -> Option<FixedPath> {
        if self.is_single() {
            None
        } else {
            Some(FixedPath {
                steps: self.steps[1..].to_vec(),
            })
        }
    }
}

impl fmt::Display for FixedPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.steps.join("/"))
    }
}

/// A variable with a path applied to it: `$x/a/b`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct VarPath {
    pub var: String,
    pub path: FixedPath,
}

impl VarPath {
    pub fn new(var: impl Into<String>, path: FixedPath) -> VarPath {
        VarPath {
            var: var.into(),
            path,
        }
    }
}

impl fmt::Display for VarPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "${}/{}", self.var, self.path)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RelOp {
    Eq,
    Lt,
    Le,
    Gt,
    Ge,
}

impl fmt::Display for RelOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RelOp::Eq => "=",
            RelOp::Lt => "<",
            RelOp::Le => "<=",
            RelOp::Gt => ">",
            RelOp::Ge => ">=",
        })
    }
}

/// Boolean tree over atomic comparisons and existence tests. Subtrees are
/// reference-counted so that normalization can duplicate a condition across
/// many branches without copying it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Cond {
    True,
    And(Rc<Cond>, Rc<Cond>),
    Or(Rc<Cond>, Rc<Cond>),
    Not(Rc<Cond>),
    /// `$x/π` used as a truth value: some node matches the path.
    Exists(VarPath),
    /// `$x/π op "literal"`; numeric-looking literals stay strings here and
    /// are typed at evaluation time.
    CmpLit {
        lhs: VarPath,
        op: RelOp,
        rhs: String,
    },
    /// `$x/π op $y/π'` — a value join.
    CmpPath {
        lhs: VarPath,
        op: RelOp,
        rhs: VarPath,
    },
}

impl Cond {
    pub fn and(a: Cond, b: Cond) -> Cond {
        Cond::And(Rc::new(a), Rc::new(b))
    }

    pub fn or(a: Cond, b: Cond) -> Cond {
        Cond::Or(Rc::new(a), Rc::new(b))
    }

    pub fn not(a: Cond) -> Cond {
        Cond::Not(Rc::new(a))
    }

    /// Every `$x/π` occurring anywhere in the condition.
    pub fn paths(&self) -> Vec<&VarPath> {
        let mut out = Vec::new();
        self.collect_paths(&mut out);
        out
    }

    fn collect_paths<'c>(&'c self, out: &mut Vec<&'c VarPath>) {
        match self {
            Cond::True => {}
            Cond::And(a, b) | Cond::Or(a, b) => {
                a.collect_paths(out);
                b.collect_paths(out);
            }
            Cond::Not(a) => a.collect_paths(out),
            Cond::Exists(p) => out.push(p),
            Cond::CmpLit { lhs, .. } => out.push(lhs),
            Cond::CmpPath { lhs, rhs, .. } => {
                out.push(lhs);
                out.push(rhs);
            }
        }
    }

    pub fn vars(&self) -> std::collections::BTreeSet<String> {
        self.paths().into_iter().map(|p| p.var.clone()).collect()
    }

    fn fmt_prec(&self, f: &mut fmt::Formatter<'_>, min: u8) -> fmt::Result {
        let prec = match self {
            Cond::Or(..) => 0,
            Cond::And(..) => 1,
            Cond::Not(..) => 2,
            _ => 3,
        };
        let parens = prec < min;
        if parens {
            f.write_str("(")?;
        }
        match self {
            Cond::True => f.write_str("true")?,
            Cond::Or(a, b) => {
                a.fmt_prec(f, 0)?;
                f.write_str(" or ")?;
                b.fmt_prec(f, 1)?;
            }
            Cond::And(a, b) => {
                a.fmt_prec(f, 1)?;
                f.write_str(" and ")?;
                b.fmt_prec(f, 2)?;
            }
            Cond::Not(a) => {
                f.write_str("not ")?;
                a.fmt_prec(f, 3)?;
            }
            Cond::Exists(p) => write!(f, "{p}")?,
            Cond::CmpLit { lhs, op, rhs } => write!(f, "{lhs} {op} \"{rhs}\"")?,
            Cond::CmpPath { lhs, op, rhs } => write!(f, "{lhs} {op} {rhs}")?,
        }
        if parens {
            f.write_str(")")?;
        }
        Ok(())
    }
}

impl fmt::Display for Cond {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.fmt_prec(f, 0)
    }
}

/// A query expression. Strings output literal markup verbatim; a whole
/// element template like `<r>{$x}</r>` is a sequence of three expressions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Query {
    /// `()`
    Empty,
    /// Literal output text.
    Str(String),
    /// Concatenation; the constructor keeps this flat and at least two long.
    Seq(Vec<Query>),
    /// `for $var in $source/path return body`
    For {
        var: String,
        source: String,
        path: FixedPath,
        body: Box<Query>,
    },
    /// `for $var in $source/path where cond return body`
    ForWhere {
        var: String,
        source: String,
        path: FixedPath,
        cond: Rc<Cond>,
        body: Box<Query>,
    },
    /// `{$x/π}` — copy every subtree matching the path to the output.
    PathOut(VarPath),
    /// `{$x}` — copy the subtree bound to the variable.
    VarOut(String),
    /// `if cond then body` (no else in this fragment).
    If { cond: Rc<Cond>, body: Box<Query> },
}

impl Query {
    /// Flattening sequence constructor: drops `Empty`, inlines nested
    /// sequences, and collapses zero/one-element results.
    pub fn seq(items: Vec<Query>) -> Query {
        let mut out = Vec::new();
        for item in items {
            match item {
                Query::Empty => {}
                Query::Seq(inner) => out.extend(inner),
                other => out.push(other),
            }
        }
        match out.len() {
            0 => Query::Empty,
            1 => out.pop().unwrap(),
            _ => Query::Seq(out),
        }
    }

    pub fn str(s: impl Into<String>) -> Query {
        Query::Str(s.into())
    }

    pub fn var_out(v: impl Into<String>) -> Query {
        Query::VarOut(v.into())
    }

    pub fn if_then(cond: Rc<Cond>, body: Query) -> Query {
        Query::If {
            cond,
            body: Box::new(body),
        }
    }

    /// Direct subexpressions (conditions are not children).
    pub fn children(&self) -> Vec<&Query> {
        match self {
            Query::Seq(items) => items.iter().collect(),
            Query::For { body, .. } | Query::ForWhere { body, .. } | Query::If { body, .. } => {
                vec![body]
            }
            _ => vec![],
        }
    }

    /// Writes the expression as it appears in template position (literal
    /// text plus `{…}` blocks).
    fn fmt_template(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Query::Empty => f.write_str("()"),
            Query::Seq(items) => {
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        f.write_str(" ")?;
                    }
                    item.fmt_item(f)?;
                }
                Ok(())
            }
            other => other.fmt_item(f),
        }
    }

    /// Writes one template item; non-literal expressions get braces.
    fn fmt_item(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Query::Empty => f.write_str("()"),
            Query::Str(s) => f.write_str(s),
            Query::Seq(_) => self.fmt_template(f),
            Query::For {
                var,
                source,
                path,
                body,
            } => {
                write!(f, "{{ for ${var} in ${source}/{path} return ")?;
                body.fmt_template(f)?;
                f.write_str(" }")
            }
            Query::ForWhere {
                var,
                source,
                path,
                cond,
                body,
            } => {
                write!(f, "{{ for ${var} in ${source}/{path} where {cond} return ")?;
                body.fmt_template(f)?;
                f.write_str(" }")
            }
            Query::PathOut(p) => write!(f, "{{{p}}}"),
            Query::VarOut(v) => write!(f, "{{${v}}}"),
            Query::If { cond, body } => {
                write!(f, "{{ if {cond} then ")?;
                body.fmt_template(f)?;
                f.write_str(" }")
            }
        }
    }
}

// Display goes through template mode so a serialized query is valid input
// for the parser again.
impl fmt::Display for Query {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.fmt_template(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vp(var: &str, steps: &[&str]) -> VarPath {
        VarPath::new(var, FixedPath::new(steps.iter().map(|s| s.to_string()).collect()))
    }

    #[test]
    fn seq_constructor_flattens_and_collapses() {
        assert_eq!(Query::seq(vec![]), Query::Empty);
        assert_eq!(Query::seq(vec![Query::str("a")]), Query::str("a"));
        let nested = Query::seq(vec![
            Query::str("a"),
            Query::Seq(vec![Query::str("b"), Query::str("c")]),
            Query::Empty,
        ]);
        assert_eq!(
            nested,
            Query::Seq(vec![Query::str("a"), Query::str("b"), Query::str("c")])
        );
    }

    #[test]
    fn display_uses_template_syntax() {
        let q = Query::Seq(vec![
            Query::str("<results>"),
            Query::For {
                var: "b".into(),
                source: "ROOT".into(),
                path: FixedPath::new(vec!["bib".into(), "book".into()]),
                body: Box::new(Query::Seq(vec![
                    Query::str("<result>"),
                    Query::PathOut(vp("b", &["title"])),
                    Query::str("</result>"),
                ])),
            },
            Query::str("</results>"),
        ]);
        assert_eq!(
            q.to_string(),
            "<results> { for $b in $ROOT/bib/book return <result> {$b/title} </result> } </results>"
        );
    }

    #[test]
    fn condition_display_parenthesizes_by_precedence() {
        let a = Cond::Exists(vp("x", &["a"]));
        let b = Cond::CmpLit {
            lhs: vp("x", &["b"]),
            op: RelOp::Gt,
            rhs: "1991".into(),
        };
        let c = Cond::Exists(vp("y", &["c"]));
        let both = Cond::and(Cond::or(a.clone(), b.clone()), c.clone());
        assert_eq!(both.to_string(), "($x/a or $x/b > \"1991\") and $y/c");
        let neg = Cond::not(Cond::and(a, c));
        assert_eq!(neg.to_string(), "not ($x/a and $y/c)");
    }

    #[test]
    fn condition_paths_are_collected_in_order() {
        let j = Cond::CmpPath {
            lhs: vp("article", &["author"]),
            op: RelOp::Eq,
            rhs: vp("book", &["editor"]),
        };
        let shown: Vec<String> = j.paths().iter().map(|p| p.to_string()).collect();
        assert_eq!(shown, vec!["$article/author", "$book/editor"]);
        assert_eq!(
            j.vars().into_iter().collect::<Vec<_>>(),
            vec!["article".to_string(), "book".to_string()]
        );
    }
}
