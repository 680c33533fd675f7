//! Static analyses over query expressions: free variables, parent binders,
//! condition paths, dependencies, and equality modulo binder renaming.

use std::collections::{BTreeMap, BTreeSet};

use super::ast::{Cond, Query, VarPath};

/// Free variables per the usual binding rules: `for` binds its variable in
/// its body (but its source variable is free), conditions contribute the
/// variables of their paths.
pub fn free_vars(q: &Query) -> BTreeSet<String> {
    match q {
        Query::Empty | Query::Str(_) => BTreeSet::new(),
        Query::Seq(items) => items.iter().flat_map(free_vars).collect(),
        Query::For {
            var, source, body, ..
        } => {
            let mut f = free_vars(body);
            f.remove(var);
            f.insert(source.clone());
            f
        }
        Query::ForWhere {
            var,
            source,
            cond,
            body,
            ..
        } => {
            let mut f = free_vars(body);
            f.extend(cond.vars());
            f.remove(var);
            f.insert(source.clone());
            f
        }
        Query::PathOut(p) => [p.var.clone()].into(),
        Query::VarOut(v) => [v.clone()].into(),
        Query::If { cond, body } => {
            let mut f = free_vars(body);
            f.extend(cond.vars());
            f
        }
    }
}

/// The variable bound by the nearest enclosing binder of the subexpression
/// at `addr` (a child-index path, see [`Query::children`]), or `ROOT` when
/// none exists. `None` if the address is invalid.
pub fn parent_var(q: &Query, addr: &[usize]) -> Option<String> {
    let mut current = q;
    let mut binder = "ROOT".to_string();
    for &i in addr {
        if let Query::For { var, .. } | Query::ForWhere { var, .. } = current {
            binder = var.clone();
        }
        current = *current.children().get(i)?;
    }
    Some(binder)
}

/// All `(variable, path)` pairs appearing in conditions anywhere in `q`.
pub fn condition_paths(q: &Query) -> BTreeSet<(String, Vec<String>)> {
    let mut out = BTreeSet::new();
    walk_conds(q, &mut |c| {
        for p in c.paths() {
            out.insert((p.var.clone(), p.path.steps().to_vec()));
        }
    });
    out
}

fn walk_conds(q: &Query, f: &mut impl FnMut(&Cond)) {
    match q {
        Query::Empty | Query::Str(_) | Query::PathOut(_) | Query::VarOut(_) => {}
        Query::Seq(items) => items.iter().for_each(|i| walk_conds(i, f)),
        Query::For { body, .. } => walk_conds(body, f),
        Query::ForWhere { cond, body, .. } => {
            f(cond);
            walk_conds(body, f);
        }
        Query::If { cond, body } => {
            f(cond);
            walk_conds(body, f);
        }
    }
}

/// Dependencies of `q` on children of `$y`: the first steps of condition
/// paths rooted at `$y`, plus the first steps of for-loop sources over `$y`,
/// anywhere in `q`.
pub fn dependencies(y: &str, q: &Query) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    collect_dependencies(y, q, &mut out);
    out
}

fn collect_dependencies(y: &str, q: &Query, out: &mut BTreeSet<String>) {
    fn conds(y: &str, c: &Cond, out: &mut BTreeSet<String>) {
        for p in c.paths() {
            if p.var == y {
                out.insert(p.path.first().to_string());
            }
        }
    }
    match q {
        Query::Empty | Query::Str(_) | Query::PathOut(_) | Query::VarOut(_) => {}
        Query::Seq(items) => {
            for item in items {
                collect_dependencies(y, item, out);
            }
        }
        Query::For {
            source, path, body, ..
        } => {
            if source == y {
                out.insert(path.first().to_string());
            }
            collect_dependencies(y, body, out);
        }
        Query::ForWhere {
            source,
            path,
            cond,
            body,
            ..
        } => {
            if source == y {
                out.insert(path.first().to_string());
            }
            conds(y, cond, out);
            collect_dependencies(y, body, out);
        }
        Query::If { cond, body } => {
            conds(y, cond, out);
            collect_dependencies(y, body, out);
        }
    }
}

/// Structural equality modulo consistent renaming of bound variables. Free
/// variables must match exactly.
pub fn alpha_eq(a: &Query, b: &Query) -> bool {
    queries_alpha_eq(a, b, &mut VarMap::new())
}

/// Left-to-right renaming accumulated during an alpha-equality walk.
pub(crate) type VarMap = BTreeMap<String, String>;

pub(crate) fn vars_alpha_eq(x: &str, y: &str, map: &VarMap) -> bool {
    match map.get(x) {
        Some(mapped) => mapped == y,
        None => x == y && !map.values().any(|v| v == y),
    }
}

fn paths_alpha_eq(p: &VarPath, q: &VarPath, map: &VarMap) -> bool {
    vars_alpha_eq(&p.var, &q.var, map) && p.path == q.path
}

fn conds_alpha_eq(c: &Cond, d: &Cond, map: &VarMap) -> bool {
    match (c, d) {
        (Cond::True, Cond::True) => true,
        (Cond::And(a1, b1), Cond::And(a2, b2)) | (Cond::Or(a1, b1), Cond::Or(a2, b2)) => {
            conds_alpha_eq(a1, a2, map) && conds_alpha_eq(b1, b2, map)
        }
        (Cond::Not(a1), Cond::Not(a2)) => conds_alpha_eq(a1, a2, map),
        (Cond::Exists(p), Cond::Exists(q)) => paths_alpha_eq(p, q, map),
        (
            Cond::CmpLit { lhs, op, rhs },
            Cond::CmpLit {
                lhs: l2,
                op: o2,
                rhs: r2,
            },
        ) => paths_alpha_eq(lhs, l2, map) && op == o2 && rhs == r2,
        (
            Cond::CmpPath { lhs, op, rhs },
            Cond::CmpPath {
                lhs: l2,
                op: o2,
                rhs: r2,
            },
        ) => paths_alpha_eq(lhs, l2, map) && op == o2 && paths_alpha_eq(rhs, r2, map),
        _ => false,
    }
}

/// Runs `f` with `from → to` added to the renaming, restoring the previous
/// entry afterwards.
pub(crate) fn with_renaming<T>(
    map: &mut VarMap,
    from: &str,
    to: &str,
    f: impl FnOnce(&mut VarMap) -> T,
) -> T {
    let old = map.insert(from.to_string(), to.to_string());
    let out = f(map);
    match old {
        Some(o) => map.insert(from.to_string(), o),
        None => map.remove(from),
    };
    out
}

pub(crate) fn queries_alpha_eq(a: &Query, b: &Query, map: &mut VarMap) -> bool {
    match (a, b) {
        (Query::Empty, Query::Empty) => true,
        (Query::Str(s), Query::Str(t)) => s == t,
        (Query::Seq(xs), Query::Seq(ys)) => {
            xs.len() == ys.len()
                && xs.iter().zip(ys).all(|(x, y)| queries_alpha_eq(x, y, map))
        }
        (Query::PathOut(p), Query::PathOut(q)) => paths_alpha_eq(p, q, map),
        (Query::VarOut(x), Query::VarOut(y)) => vars_alpha_eq(x, y, map),
        (Query::If { cond: c1, body: b1 }, Query::If { cond: c2, body: b2 }) => {
            conds_alpha_eq(c1, c2, map) && queries_alpha_eq(b1, b2, map)
        }
        (
            Query::For {
                var: v1,
                source: s1,
                path: p1,
                body: b1,
            },
            Query::For {
                var: v2,
                source: s2,
                path: p2,
                body: b2,
            },
        ) => {
            vars_alpha_eq(s1, s2, map)
                && p1 == p2
                && with_renaming(map, v1, v2, |map| queries_alpha_eq(b1, b2, map))
        }
        (
            Query::ForWhere {
                var: v1,
                source: s1,
                path: p1,
                cond: c1,
                body: b1,
            },
            Query::ForWhere {
                var: v2,
                source: s2,
                path: p2,
                cond: c2,
                body: b2,
            },
        ) => {
            vars_alpha_eq(s1, s2, map)
                && p1 == p2
                && with_renaming(map, v1, v2, |map| {
                    conds_alpha_eq(c1, c2, map) && queries_alpha_eq(b1, b2, map)
                })
        }
        _ => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::query::parse_query;

    fn q(text: &str) -> Query {
        parse_query(text).unwrap()
    }

    #[test]
    fn free_vars_examples() {
        // A bound loop variable is not free; its source is.
        let f = q("{ for $x in $ROOT/a return {$x} }");
        assert_eq!(free_vars(&f), ["ROOT".to_string()].into());
        // Conditions contribute their variables.
        let c = q("{ if $ROOT/p = $ROOT/q then s }");
        assert_eq!(free_vars(&c), ["ROOT".to_string()].into());
        assert!(free_vars(&Query::str("x")).is_empty());
        assert_eq!(free_vars(&Query::var_out("z")), ["z".to_string()].into());
    }

    #[test]
    fn parent_var_walks_to_the_nearest_binder() {
        let query = q("<results> { for $b in $ROOT/bib/book return <r> {$b} </r> } </results>");
        // Top-level items have the root as parent.
        assert_eq!(parent_var(&query, &[0]).unwrap(), "ROOT");
        // The for-node itself is still under ROOT...
        assert_eq!(parent_var(&query, &[1]).unwrap(), "ROOT");
        // ...but everything inside its body is under $b.
        assert_eq!(parent_var(&query, &[1, 0]).unwrap(), "b");
        assert_eq!(parent_var(&query, &[1, 0, 1]).unwrap(), "b");
        let nested = q("{ for $a in $ROOT/x return { for $c in $a/y return {$c} } }");
        assert_eq!(parent_var(&nested, &[0, 0]).unwrap(), "c");
        assert_eq!(parent_var(&nested, &[9]), None);
    }

    #[test]
    fn dependencies_collect_condition_roots_and_loop_steps() {
        let body = q("{ for $a in $ROOT/author return {$a} }");
        // Rebind the source so we can ask about a non-ROOT variable.
        let Query::For { path, body: b, .. } = body else {
            panic!()
        };
        let e = Query::For {
            var: "a".into(),
            source: "book".into(),
            path,
            body: b,
        };
        assert_eq!(dependencies("book", &e), ["author".to_string()].into());
        assert!(dependencies("z", &e).is_empty());
    }

    #[test]
    fn dependencies_cover_shared_conditions_across_branches() {
        // Shape of a normalized filtered query: condition mentioning
        // publisher and year, loops over year and title.
        let e = q(
            "{ for $b in $ROOT/book return \
               { if $b/publisher = \"A\" and $b/year > 1991 then <book> } \
               { for $y in $b/year return { if $b/publisher = \"A\" then {$y} } } \
               { for $t in $b/title return {$t} } }",
        );
        let Query::For { body, .. } = e else { panic!() };
        assert_eq!(
            dependencies("b", &body),
            ["publisher", "year", "title"]
                .into_iter()
                .map(String::from)
                .collect()
        );
    }

    #[test]
    fn condition_paths_reports_var_path_pairs() {
        let e = q("{ if $ROOT/year > 1991 then s }");
        assert_eq!(
            condition_paths(&e),
            [("ROOT".to_string(), vec!["year".to_string()])].into()
        );
        assert!(condition_paths(&Query::str("s")).is_empty());
    }

    #[test]
    fn alpha_equality_ignores_binder_names_only() {
        let a = q("{ for $x in $ROOT/a return {$x} }");
        let b = q("{ for $y in $ROOT/a return {$y} }");
        let c = q("{ for $y in $ROOT/a return {$ROOT} }");
        assert!(alpha_eq(&a, &b));
        assert!(!alpha_eq(&a, &c));
        // Free variables must match exactly.
        assert!(!alpha_eq(&Query::var_out("p"), &Query::var_out("q")));
        // Nested binders with crossed names.
        let d = q("{ for $x in $ROOT/a return { for $y in $x/b return {$y} {$x} } }");
        let e = q("{ for $y in $ROOT/a return { for $x in $y/b return {$x} {$y} } }");
        assert!(alpha_eq(&d, &e));
        let f = q("{ for $y in $ROOT/a return { for $x in $y/b return {$y} {$x} } }");
        assert!(!alpha_eq(&d, &f));
    }
}
