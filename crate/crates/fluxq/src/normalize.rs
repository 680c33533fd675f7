//! Normalization: rewrites a query until every path outside conditions is a
//! single step, no `where` clauses remain, and every `if` guards only a
//! string or a subtree output. The rewriter and the projection analysis both
//! assume this shape.

use std::collections::HashSet;
use std::rc::Rc;

use crate::query::{Cond, FixedPath, Query};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NormalizeReport {
    /// Number of rewrite-rule applications; grows linearly with input size.
    pub rule_applications: usize,
    /// Fresh loop variables, in the order they were introduced.
    pub fresh_vars: Vec<String>,
}

/// True iff the three normal-form properties hold: single-step loop paths,
/// no conditional loops, and `if` bodies restricted to strings or `{$x}`.
pub fn is_normal_form(q: &Query) -> bool {
    match q {
        Query::Empty | Query::Str(_) | Query::VarOut(_) => true,
        Query::PathOut(_) => false,
        Query::Seq(items) => items.iter().all(is_normal_form),
        Query::For { path, body, .. } => path.is_single() && is_normal_form(body),
        Query::ForWhere { .. } => false,
        Query::If { body, .. } => matches!(**body, Query::Str(_) | Query::VarOut(_)),
    }
}

/// Normalizes outermost-first. The result is unique up to fresh-variable
/// names regardless of strategy (see [`normalize_innermost`], which the
/// differential tests compare against).
pub fn normalize(q: &Query) -> (Query, NormalizeReport) {
    let mut n = Normalizer::new(q);
    let out = n.outside_in(q.clone());
    debug_assert!(is_normal_form(&out), "normalization left a redex: {out}");
    (out, n.report)
}

/// Innermost-first strategy; exists to let tests check that the result does
/// not depend on rule-application order.
#[doc(hidden)]
pub fn normalize_innermost(q: &Query) -> (Query, NormalizeReport) {
    let mut n = Normalizer::new(q);
    let out = n.inside_out(q.clone());
    debug_assert!(is_normal_form(&out));
    (out, n.report)
}

struct Normalizer {
    counter: usize,
    used: HashSet<String>,
    report: NormalizeReport,
}

impl Normalizer {
    fn new(q: &Query) -> Normalizer {
        let mut used = HashSet::new();
        collect_vars(q, &mut used);
        Normalizer {
            counter: 0,
            used,
            report: NormalizeReport::default(),
        }
    }

    fn fresh(&mut self) -> String {
        loop {
            self.counter += 1;
            let name = format!("_g{}", self.counter);
            if self.used.insert(name.clone()) {
                self.report.fresh_vars.push(name.clone());
                return name;
            }
        }
    }

    fn outside_in(&mut self, q: Query) -> Query {
        // Drain root redexes, then the children, then re-check the root:
        // normalizing a child can surface a new root redex (an `if` whose
        // body just became a for-loop, say).
        let mut q = q;
        loop {
            match self.root_rule(q) {
                Ok(next) => q = next,
                Err(same) => {
                    q = same;
                    break;
                }
            }
        }
        let q = self.map_children(q, Self::outside_in);
        match self.root_rule(q) {
            Ok(next) => self.outside_in(next),
            Err(same) => same,
        }
    }

    fn inside_out(&mut self, q: Query) -> Query {
        let q = self.map_children(q, Self::inside_out);
        match self.root_rule(q) {
            Ok(next) => self.inside_out(next),
            Err(same) => same,
        }
    }

    fn map_children(&mut self, q: Query, f: fn(&mut Self, Query) -> Query) -> Query {
        match q {
            Query::Seq(items) => {
                Query::seq(items.into_iter().map(|item| f(self, item)).collect())
            }
            Query::For {
                var,
                source,
                path,
                body,
            } => Query::For {
                var,
                source,
                path,
                body: Box::new(f(self, *body)),
            },
            Query::ForWhere {
                var,
                source,
                path,
                cond,
                body,
            } => Query::ForWhere {
                var,
                source,
                path,
                cond,
                body: Box::new(f(self, *body)),
            },
            Query::If { cond, body } => Query::If {
                cond,
                body: Box::new(f(self, *body)),
            },
            leaf => leaf,
        }
    }

    /// One rewrite step at the root; `Ok` if a rule applied.
    fn root_rule(&mut self, q: Query) -> Result<Query, Query> {
        match q {
            // where-elimination: push the condition into the body.
            Query::ForWhere {
                var,
                source,
                path,
                cond,
                body,
            } => {
                self.report.rule_applications += 1;
                Ok(Query::For {
                    var,
                    source,
                    path,
                    body: Box::new(Query::If { cond, body }),
                })
            }
            // Path output becomes a loop that copies each match.
            Query::PathOut(p) => {
                self.report.rule_applications += 1;
                let v = self.fresh();
                Ok(Query::For {
                    var: v.clone(),
                    source: p.var,
                    path: p.path,
                    body: Box::new(Query::VarOut(v)),
                })
            }
            // Multi-step loop paths split off their first step.
            Query::For {
                var,
                source,
                path,
                body,
            } if !path.is_single() => {
                self.report.rule_applications += 1;
                let hop = self.fresh();
                let rest = path.rest().expect("multi-step path");
                Ok(Query::For {
                    var: hop.clone(),
                    source,
                    path: FixedPath::single(path.first()),
                    body: Box::new(Query::For {
                        var,
                        source: hop,
                        path: rest,
                        body,
                    }),
                })
            }
            Query::If { cond, body } => match *body {
                // A vacuous guard produces nothing.
                Query::Empty => {
                    self.report.rule_applications += 1;
                    Ok(Query::Empty)
                }
                // Conditions move inside loops...
                Query::For {
                    var,
                    source,
                    path,
                    body: inner,
                } => {
                    self.report.rule_applications += 1;
                    Ok(Query::For {
                        var,
                        source,
                        path,
                        body: Box::new(Query::If { cond, body: inner }),
                    })
                }
                // ...distribute over sequences (sharing the condition)...
                Query::Seq(items) => {
                    self.report.rule_applications += 1;
                    Ok(Query::seq(
                        items
                            .into_iter()
                            .map(|item| Query::If {
                                cond: Rc::clone(&cond),
                                body: Box::new(item),
                            })
                            .collect(),
                    ))
                }
                // ...and nested guards merge conjunctively.
                Query::If {
                    cond: inner_cond,
                    body: inner,
                } => {
                    self.report.rule_applications += 1;
                    Ok(Query::If {
                        cond: Rc::new(Cond::And(cond, inner_cond)),
                        body: inner,
                    })
                }
                other => Err(Query::If {
                    cond,
                    body: Box::new(other),
                }),
            },
            other => Err(other),
        }
    }
}

fn collect_vars(q: &Query, out: &mut HashSet<String>) {
    let conds = |c: &Cond, out: &mut HashSet<String>| {
        for p in c.paths() {
            out.insert(p.var.clone());
        }
    };
    match q {
        Query::Empty | Query::Str(_) => {}
        Query::Seq(items) => items.iter().for_each(|i| collect_vars(i, out)),
        Query::For {
            var, source, body, ..
        } => {
            out.insert(var.clone());
            out.insert(source.clone());
            collect_vars(body, out);
        }
        Query::ForWhere {
            var,
            source,
            cond,
            body,
            ..
        } => {
            out.insert(var.clone());
            out.insert(source.clone());
            conds(cond, out);
            collect_vars(body, out);
        }
        Query::PathOut(p) => {
            out.insert(p.var.clone());
        }
        Query::VarOut(v) => {
            out.insert(v.clone());
        }
        Query::If { cond, body } => {
            conds(cond, out);
            collect_vars(body, out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::query::{alpha_eq, parse_query};

    fn q(text: &str) -> Query {
        parse_query(text).unwrap()
    }

    const FILTERED_BOOKS: &str = r#"<bib>
        { for $b in $ROOT/bib/book
          where $b/publisher = "Addison-Wesley" and $b/year > 1991
          return <book> {$b/year} {$b/title} </book> }
        </bib>"#;

    const FILTERED_BOOKS_NORMAL: &str = r#"<bib>
        { for $bib in $ROOT/bib return
          { for $b in $bib/book return
            { if $b/publisher = "Addison-Wesley" and $b/year > 1991 then <book> }
            { for $year in $b/year return
              { if $b/publisher = "Addison-Wesley" and $b/year > 1991 then {$year} } }
            { for $title in $b/title return
              { if $b/publisher = "Addison-Wesley" and $b/year > 1991 then {$title} } }
            { if $b/publisher = "Addison-Wesley" and $b/year > 1991 then </book> } } }
        </bib>"#;

    #[test]
    fn filtered_books_normalization_golden() {
        let (got, report) = normalize(&q(FILTERED_BOOKS));
        let expected = q(FILTERED_BOOKS_NORMAL);
        assert!(
            alpha_eq(&got, &expected),
            "normalization mismatch:\n got: {got}\nwant: {expected}"
        );
        assert!(is_normal_form(&got));
        // where-split, path-split, seq-distribution, and two loop
        // extractions with their guard pushes.
        assert_eq!(report.rule_applications, 7);
        assert_eq!(report.fresh_vars, vec!["_g1", "_g2", "_g3"]);
    }

    #[test]
    fn path_output_expands_to_nested_loops() {
        let (got, report) = normalize(&q("{$ROOT/a/b}"));
        // The copy-loop is introduced first (_g1), then the path splits,
        // putting the later variable (_g2) on the outer loop.
        assert_eq!(
            got,
            Query::For {
                var: "_g2".into(),
                source: "ROOT".into(),
                path: FixedPath::single("a"),
                body: Box::new(Query::For {
                    var: "_g1".into(),
                    source: "_g2".into(),
                    path: FixedPath::single("b"),
                    body: Box::new(Query::var_out("_g1")),
                }),
            }
        );
        assert_eq!(report.rule_applications, 2);
    }

    #[test]
    fn guard_distributes_over_sequences_sharing_the_condition() {
        let (got, _) = normalize(&q("{ if $ROOT/p then a<b/>c {$ROOT} x }"));
        let Query::Seq(items) = got else {
            panic!("expected a sequence, got {got}")
        };
        assert_eq!(items.len(), 3);
        let conds: Vec<&Rc<Cond>> = items
            .iter()
            .map(|i| match i {
                Query::If { cond, .. } => cond,
                other => panic!("expected a guard, got {other}"),
            })
            .collect();
        // Distribution clones the pointer, not the condition tree.
        assert!(Rc::ptr_eq(conds[0], conds[1]));
        assert!(Rc::ptr_eq(conds[1], conds[2]));
    }

    #[test]
    fn nested_guards_merge_and_loops_escape_guards() {
        let (got, _) = normalize(&q("{ if $ROOT/p then { if $ROOT/q then s } }"));
        let Query::If { cond, body } = got else {
            panic!()
        };
        assert!(matches!(*cond, Cond::And(..)));
        assert_eq!(*body, Query::str("s"));

        let (got, _) = normalize(&q("{ if $ROOT/p then { for $x in $ROOT/a return {$x} } }"));
        let Query::For { body, .. } = got else {
            panic!("guard should move inside the loop, got {got}")
        };
        assert!(matches!(*body, Query::If { .. }));
    }

    #[test]
    fn vacuous_guards_disappear() {
        let (got, _) = normalize(&q("{ if $ROOT/p then () }"));
        assert_eq!(got, Query::Empty);
    }

    #[test]
    fn normal_form_predicate() {
        assert!(is_normal_form(&q(
            "{ for $x in $ROOT/a return { if $x/c then {$x} } }"
        )));
        assert!(!is_normal_form(&q("{$ROOT/a}")));
        assert!(!is_normal_form(&q(
            "{ for $x in $ROOT/a where $x/b return s }"
        )));
        assert!(!is_normal_form(&q(
            "{ if $ROOT/p then { for $x in $ROOT/a return {$x} } }"
        )));
        assert!(!is_normal_form(&q("{ for $x in $ROOT/a/b return {$x} }")));
    }

    #[test]
    fn idempotent_and_strategy_independent() {
        for text in [
            FILTERED_BOOKS,
            "{$ROOT/a/b}",
            "{ if $ROOT/p then a {$ROOT/x/y} b }",
            "pre { for $x in $ROOT/a where $x/b = 1 return { if $x/c then {$x} } } post",
        ] {
            let (once, _) = normalize(&q(text));
            let (twice, report) = normalize(&once);
            assert_eq!(once, twice, "not idempotent on {text}");
            assert_eq!(report.rule_applications, 0);
            let (inner, _) = normalize_innermost(&q(text));
            assert!(
                alpha_eq(&once, &inner),
                "strategies disagree on {text}:\nouter: {once}\ninner: {inner}"
            );
        }
    }

    #[test]
    fn rule_count_scales_linearly() {
        let family = |n: usize| {
            let body = "{$ROOT/a/b} ".repeat(n);
            q(&body)
        };
        for n in [4, 8, 16] {
            let (_, report) = normalize(&family(n));
            assert_eq!(report.rule_applications, 2 * n);
        }
    }
}
