//! Scheduling of normalized queries into event-handler plans.
//!
//! [`rewrite`] turns a normal-form query into a [`Flux`] plan whose handlers
//! fire while the input document streams by: `on` handlers run a nested plan
//! inside each matching child element, and `on-first past(S)` handlers delay
//! a subexpression only until the schema guarantees that no further `S`-child
//! can appear. The child-order constraints come from a [`Schema`], so the
//! same query compiles to an eager, low-buffering plan under a strict DTD and
//! to a conservative one under a permissive DTD. [`compile`] bundles the full
//! text-to-plan pipeline (parse, normalize, rewrite, safety check).

use std::collections::{BTreeSet, HashMap};
use std::rc::Rc;

use thiserror::Error;

use crate::flux::{check_safety_with, hsymb, is_simple, Flux, Handler, PastSpec, SafetyOptions};
use crate::normalize::{is_normal_form, normalize, NormalizeReport};
use crate::query::{dependencies, parse_query, ParseError, Query};
use crate::schema::{DtdError, NodeKind, Schema};

/// Where a sequence is split before the two halves are scheduled
/// independently. The handler lists produced are identical either way
/// (handler symbol sets accumulate by plain union); the knob exists so tests
/// can cross-check that.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SeqSplit {
    /// First item vs. everything after it.
    #[default]
    HeadFirst,
    /// Everything before the last item vs. the last item.
    LastFirst,
}

#[derive(Debug, Clone, Default)]
pub struct RewriteOptions {
    /// Turn loops whose step element cannot occur under their source
    /// variable into never-firing `on` handlers (plus a warning) instead of
    /// rejecting the query.
    pub allow_dead_loops: bool,
    pub split: SeqSplit,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RewriteError {
    #[error("query is not in normal form: {detail}")]
    NotNormalForm { detail: String },
    /// The step element of a loop cannot occur among the children of the
    /// loop's source variable, so the loop can never produce output. Almost
    /// always a query/DTD mismatch; see [`RewriteOptions::allow_dead_loops`].
    #[error("`{element}` cannot occur among the children of {under}: the loop over it is dead")]
    ElementNotInSchema { element: String, under: String },
    #[error("variable ${var} is not bound")]
    UnboundVariable { var: String },
}

/// Schedules a normal-form query against the document root. Strict mode:
/// dead loops are errors.
pub fn rewrite(query: &Query, schema: &Schema) -> Result<Flux, RewriteError> {
    rewrite_with(query, schema, &RewriteOptions::default()).map(|(flux, _)| flux)
}

/// [`rewrite`] with options; also returns the warnings emitted for dead
/// loops when they are allowed.
///
/// The query must be in normal form (see [`crate::normalize`]) with binders
/// renamed apart, as the query parser guarantees.
pub fn rewrite_with(
    query: &Query,
    schema: &Schema,
    options: &RewriteOptions,
) -> Result<(Flux, Vec<String>), RewriteError> {
    if !is_normal_form(query) {
        return Err(RewriteError::NotNormalForm {
            detail: "it contains where-clauses, multi-step loop paths, or compound \
                     conditional bodies; normalize the query first"
                .into(),
        });
    }
    let mut env = HashMap::new();
    env.insert("ROOT".to_string(), NodeKind::Document);
    let mut rw = Rewriter { schema, options, env, deps_memo: HashMap::new(), warnings: Vec::new() };
    let flux = rw.rewrite("ROOT", &BTreeSet::new(), query)?;
    Ok((flux, rw.warnings))
}

struct Rewriter<'a> {
    schema: &'a Schema,
    options: &'a RewriteOptions,
    /// Variable bindings along the current descent (plus `$ROOT`).
    env: HashMap<String, NodeKind>,
    /// `dependencies(var, subquery)` cache, keyed by the subquery's address
    /// within the input tree (stable for the duration of the borrow).
    deps_memo: HashMap<(usize, String), Rc<BTreeSet<String>>>,
    warnings: Vec<String>,
}

impl Rewriter<'_> {
    fn rewrite(
        &mut self,
        x: &str,
        h: &BTreeSet<String>,
        beta: &Query,
    ) -> Result<Flux, RewriteError> {
        if mentions_subtree_output(x, beta) {
            // The subtree bound to $x is still streaming by while handlers
            // run, so a plan that copies it must wait for the subtree's end.
            if is_simple(beta) && self.deps(x, beta).is_empty() {
                return Ok(Flux::Simple(beta.clone()));
            }
            return Ok(ps(x, vec![Handler::OnFirst { past: PastSpec::All, body: beta.clone() }]));
        }
        self.schedule(x, h, beta)
    }

    /// The no-`{$x}` branches. Callers guarantee `beta` does not output the
    /// subtree of `x` itself, which makes every result a `Ps` block.
    fn schedule(
        &mut self,
        x: &str,
        h: &BTreeSet<String>,
        beta: &Query,
    ) -> Result<Flux, RewriteError> {
        match beta {
            Query::Seq(items) => self.schedule_seq(x, h, items),
            _ if is_simple(beta) => {
                let mut wait: BTreeSet<String> = self.deps(x, beta).as_ref().clone();
                wait.extend(h.iter().cloned());
                Ok(ps(x, vec![Handler::OnFirst { past: PastSpec::Set(wait), body: beta.clone() }]))
            }
            Query::For { var: y, source: z, path, body: alpha } => {
                debug_assert!(path.is_single());
                let a = path.first();
                let Some(source_kind) = self.env.get(z).cloned() else {
                    return Err(RewriteError::UnboundVariable { var: z.clone() });
                };
                let source_children = self.schema.symb(&source_kind).unwrap_or_default();
                if !source_children.iter().any(|c| c == a) {
                    if !self.options.allow_dead_loops {
                        return Err(RewriteError::ElementNotInSchema {
                            element: a.to_string(),
                            under: kind_label(&source_kind),
                        });
                    }
                    self.warnings.push(format!(
                        "loop `for ${y} in ${z}/{a}` is dead: `{a}` cannot occur among \
                         the children of {}; its handler will never fire",
                        kind_label(&source_kind)
                    ));
                    return self.on_handler(x, a, y, alpha);
                }

                let x_kind = match self.env.get(x) {
                    Some(kind) => kind.clone(),
                    None => return Err(RewriteError::UnboundVariable { var: x.to_string() }),
                };
                let mut deps: BTreeSet<String> = self.deps(x, alpha).as_ref().clone();
                deps.extend(h.iter().cloned());
                let wait: BTreeSet<String> =
                    deps.into_iter().filter(|b| !self.settled(&x_kind, b, a)).collect();

                if z != x {
                    // The loop reads some outer variable's children; its
                    // own dependencies on $x are all that must be waited on.
                    Ok(ps(x, vec![Handler::OnFirst { past: PastSpec::Set(wait), body: beta.clone() }]))
                } else if !wait.is_empty() {
                    let mut wait = wait;
                    wait.insert(a.to_string());
                    Ok(ps(x, vec![Handler::OnFirst { past: PastSpec::Set(wait), body: beta.clone() }]))
                } else {
                    self.on_handler(x, a, y, alpha)
                }
            }
            // Remaining shapes either violate normal form (`ForWhere`,
            // `PathOut`) or guard their own subtree output, which scoped
            // queries only exhibit under the binder that line 5 intercepts.
            other => Err(RewriteError::NotNormalForm {
                detail: format!("subexpression `{other}` cannot be scheduled"),
            }),
        }
    }

    /// Concatenation: schedule one part, then the other under the first
    /// part's handler symbols, and merge the handler lists.
    fn schedule_seq(
        &mut self,
        x: &str,
        h: &BTreeSet<String>,
        items: &[Query],
    ) -> Result<Flux, RewriteError> {
        debug_assert!(items.len() >= 2);
        let (first, second) = match self.options.split {
            SeqSplit::HeadFirst => (&items[..1], &items[1..]),
            SeqSplit::LastFirst => items.split_at(items.len() - 1),
        };
        let mut handlers = expect_handlers(self.part(x, h, first)?);
        let mut h2 = h.clone();
        match hsymb(&handlers) {
            PastSpec::Set(symbols) => h2.extend(symbols),
            PastSpec::All => unreachable!("scheduled handlers carry concrete past sets"),
        }
        let tail = expect_handlers(self.part(x, &h2, second)?);
        handlers.extend(tail);
        Ok(ps(x, handlers))
    }

    fn part(&mut self, x: &str, h: &BTreeSet<String>, items: &[Query]) -> Result<Flux, RewriteError> {
        match items {
            [single] => self.schedule(x, h, single),
            many => self.schedule_seq(x, h, many),
        }
    }

    fn on_handler(
        &mut self,
        x: &str,
        a: &str,
        y: &str,
        alpha: &Query,
    ) -> Result<Flux, RewriteError> {
        let shadowed = self.env.insert(y.to_string(), NodeKind::element(a));
        let inner = self.rewrite(y, &BTreeSet::new(), alpha)?;
        match shadowed {
            Some(kind) => self.env.insert(y.to_string(), kind),
            None => self.env.remove(y),
        };
        Ok(ps(
            x,
            vec![Handler::On { sym: a.to_string(), var: y.to_string(), body: Box::new(inner) }],
        ))
    }

    /// Whether every `b` child is guaranteed over once an `a` child arrives.
    /// A symbol that cannot occur under `kind` at all never settles anything:
    /// waiting for it would never end, so it must stay in the waited-on set.
    fn settled(&self, kind: &NodeKind, b: &str, a: &str) -> bool {
        match self.schema.symb(kind) {
            Some(children) if children.iter().any(|c| c == a) => {
                self.schema.ord(kind, b, a).unwrap_or(true)
            }
            _ => false,
        }
    }

    fn deps(&mut self, var: &str, q: &Query) -> Rc<BTreeSet<String>> {
        let key = (q as *const Query as usize, var.to_string());
        if let Some(hit) = self.deps_memo.get(&key) {
            return Rc::clone(hit);
        }
        let computed = Rc::new(dependencies(var, q));
        self.deps_memo.insert(key, Rc::clone(&computed));
        computed
    }
}

fn ps(var: &str, handlers: Vec<Handler>) -> Flux {
    Flux::Ps { prefix: String::new(), var: var.to_string(), handlers, suffix: String::new() }
}

fn expect_handlers(flux: Flux) -> Vec<Handler> {
    match flux {
        Flux::Ps { handlers, .. } => handlers,
        Flux::Simple(q) => unreachable!(
            "scheduling without a subtree output always yields a handler block, got `{q}`"
        ),
    }
}

fn kind_label(kind: &NodeKind) -> String {
    match kind {
        NodeKind::Document => "the document root".to_string(),
        NodeKind::Element(name) => format!("`{name}` elements"),
    }
}

fn mentions_subtree_output(x: &str, q: &Query) -> bool {
    match q {
        Query::VarOut(v) => v == x,
        Query::Empty | Query::Str(_) | Query::PathOut(_) => false,
        Query::Seq(items) => items.iter().any(|item| mentions_subtree_output(x, item)),
        Query::For { body, .. } | Query::ForWhere { body, .. } | Query::If { body, .. } => {
            mentions_subtree_output(x, body)
        }
    }
}

/// Everything [`compile`] reports besides the plan itself.
#[derive(Debug, Clone, Default)]
pub struct CompileReport {
    pub normalization: NormalizeReport,
    /// One entry per dead loop when they are allowed.
    pub warnings: Vec<String>,
}

#[derive(Debug, Error)]
pub enum CompileError {
    #[error("query: {0}")]
    Query(#[from] ParseError),
    #[error("schema: {0}")]
    Schema(#[from] DtdError),
    #[error(transparent)]
    Rewrite(#[from] RewriteError),
    /// The scheduled plan failed the final safety audit. Unreachable for
    /// well-formed query/DTD pairs; degenerate DTDs (a declared element
    /// whose children are never declared) can trip it.
    #[error("scheduled plan failed the safety audit: {detail}")]
    UnsafePlan { detail: String },
}

/// Full pipeline: parse the query and the DTD, normalize, schedule, and
/// audit the resulting plan for safety.
pub fn compile(query_text: &str, dtd_text: &str) -> Result<(Flux, CompileReport), CompileError> {
    compile_with(query_text, dtd_text, &RewriteOptions::default())
}

pub fn compile_with(
    query_text: &str,
    dtd_text: &str,
    options: &RewriteOptions,
) -> Result<(Flux, CompileReport), CompileError> {
    let query = parse_query(query_text)?;
    let schema = Schema::parse(dtd_text)?;
    let (normalized, normalization) = normalize(&query);
    let (flux, warnings) = rewrite_with(&normalized, &schema, options)?;
    let audit = SafetyOptions { ignore_unknown_handlers: options.allow_dead_loops };
    let violations = check_safety_with(&flux, &schema, audit)
        .map_err(|e| CompileError::UnsafePlan { detail: e.to_string() })?;
    if let Some(first) = violations.first() {
        return Err(CompileError::UnsafePlan { detail: first.to_string() });
    }
    Ok((flux, CompileReport { normalization, warnings }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flux::{alpha_eq, parse_flux};

    const WEAK_DTD: &str = "\
        <!ELEMENT bib (book)*>\n\
        <!ELEMENT book (title|author)*>\n\
        <!ELEMENT title (#PCDATA)>\n\
        <!ELEMENT author (#PCDATA)>\n";

    const AUTHORS_THEN_TITLES_DTD: &str = "\
        <!ELEMENT bib (book)*>\n\
        <!ELEMENT book (author*,title*)>\n\
        <!ELEMENT title (#PCDATA)>\n\
        <!ELEMENT author (#PCDATA)>\n";

    const XMP_DTD: &str = "\
        <!ELEMENT bib (book*)>\n\
        <!ELEMENT book (title, (author+ | editor+), publisher, price)>\n\
        <!ELEMENT title (#PCDATA)>\n\
        <!ELEMENT author (#PCDATA)>\n\
        <!ELEMENT editor (#PCDATA)>\n\
        <!ELEMENT publisher (#PCDATA)>\n\
        <!ELEMENT price (#PCDATA)>\n";

    const FILTER_DTD: &str = "\
        <!ELEMENT bib (book)*>\n\
        <!ELEMENT book (title|publisher|year)*>\n\
        <!ELEMENT title (#PCDATA)>\n\
        <!ELEMENT publisher (#PCDATA)>\n\
        <!ELEMENT year (#PCDATA)>\n";

    const FILTER_TITLES_LAST_DTD: &str = "\
        <!ELEMENT bib (book)*>\n\
        <!ELEMENT book ((publisher|year)*,title*)>\n\
        <!ELEMENT title (#PCDATA)>\n\
        <!ELEMENT publisher (#PCDATA)>\n\
        <!ELEMENT year (#PCDATA)>\n";

    const JOIN_FREE_DTD: &str = "\
        <!ELEMENT bib (book|article)*>\n\
        <!ELEMENT book (title, (author+ | editor+), publisher)>\n\
        <!ELEMENT article (title, author+, journal)>\n\
        <!ELEMENT title (#PCDATA)>\n\
        <!ELEMENT author (#PCDATA)>\n\
        <!ELEMENT editor (#PCDATA)>\n\
        <!ELEMENT publisher (#PCDATA)>\n\
        <!ELEMENT journal (#PCDATA)>\n";

    const JOIN_ORDERED_DTD: &str = "\
        <!ELEMENT bib (book*,article*)>\n\
        <!ELEMENT book (title, (author+ | editor+), publisher)>\n\
        <!ELEMENT article (title, author+, journal)>\n\
        <!ELEMENT title (#PCDATA)>\n\
        <!ELEMENT author (#PCDATA)>\n\
        <!ELEMENT editor (#PCDATA)>\n\
        <!ELEMENT publisher (#PCDATA)>\n\
        <!ELEMENT journal (#PCDATA)>\n";

    const PAIRS_QUERY: &str = "\
        <results>\n\
        { for $bib in $ROOT/bib return\n\
          { for $b in $bib/book return\n\
            { for $t in $b/title return\n\
              { for $a in $b/author return\n\
                <result> {$t} {$a} </result> } } } }\n\
        </results>";

    const FILTER_QUERY: &str = "\
        <bib>\n\
        { for $b in $ROOT/bib/book\n\
          where $b/publisher = \"Addison-Wesley\" and $b/year > 1991\n\
          return <book> {$b/year} {$b/title} </book> }\n\
        </bib>";

    const JOIN_QUERY: &str = "\
        <results>\n\
        { for $bib in $ROOT/bib return\n\
          { for $article in $bib/article return\n\
            { for $book in $bib/book\n\
              where $article/author = $book/editor\n\
              return <result> {$article/author} </result> } } }\n\
        </results>";

    const LISTING_QUERY: &str = "\
        <results>\n\
        { for $b in /bib/book return\n\
          <result> {$b/title} {$b/author} </result> }\n\
        </results>";

    fn compiled(query: &str, dtd: &str) -> Flux {
        let (flux, _) = compile(query, dtd).expect("query compiles");
        flux
    }

    fn assert_plan(query: &str, dtd: &str, expected: &str) {
        let flux = compiled(query, dtd);
        let want = parse_flux(expected).expect("expected plan parses");
        assert!(alpha_eq(&flux, &want), "got:\n{flux}\n\nwant:\n{want}");
    }

    #[test]
    fn pairing_query_buffers_both_loops_under_a_free_schema() {
        assert_plan(
            PAIRS_QUERY,
            WEAK_DTD,
            "{ ps $ROOT:
               on-first past() return <results>;
               on bib as $bib return
                 { ps $bib:
                   on book as $b return
                     { ps $b:
                       on-first past(author,title) return
                         { for $t in $b/title return
                           { for $a in $b/author return
                             <result> {$t} {$a} </result> } } } };
               on-first past(bib) return </results> }",
        );
    }

    #[test]
    fn pairing_query_streams_titles_once_authors_come_first() {
        assert_plan(
            PAIRS_QUERY,
            AUTHORS_THEN_TITLES_DTD,
            "{ ps $ROOT:
               on-first past() return <results>;
               on bib as $bib return
                 { ps $bib:
                   on book as $b return
                     { ps $b:
                       on title as $t return
                         { ps $t:
                           on-first past(*) return
                             { for $a in $b/author return
                               <result> {$t} {$a} </result> } } } };
               on-first past(bib) return </results> }",
        );
    }

    #[test]
    fn filter_query_waits_on_both_condition_elements() {
        assert_plan(
            FILTER_QUERY,
            FILTER_DTD,
            "{ ps $ROOT:
               on-first past() return <bib>;
               on bib as $bib return
                 { ps $bib:
                   on book as $b return
                     { ps $b:
                       on-first past(publisher,year) return
                         { if $b/publisher = \"Addison-Wesley\" and $b/year > 1991 then <book> };
                       on-first past(publisher,year) return
                         { for $year in $b/year return
                           { if $b/publisher = \"Addison-Wesley\" and $b/year > 1991 then {$year} } };
                       on-first past(publisher,year,title) return
                         { for $title in $b/title return
                           { if $b/publisher = \"Addison-Wesley\" and $b/year > 1991 then {$title} } };
                       on-first past(publisher,year,title) return
                         { if $b/publisher = \"Addison-Wesley\" and $b/year > 1991 then </book> } } };
               on-first past(bib) return </bib> }",
        );
    }

    #[test]
    fn filter_query_streams_titles_when_they_come_last() {
        assert_plan(
            FILTER_QUERY,
            FILTER_TITLES_LAST_DTD,
            "{ ps $ROOT:
               on-first past() return <bib>;
               on bib as $bib return
                 { ps $bib:
                   on book as $b return
                     { ps $b:
                       on-first past(publisher,year) return
                         { if $b/publisher = \"Addison-Wesley\" and $b/year > 1991 then <book> };
                       on-first past(publisher,year) return
                         { for $year in $b/year return
                           { if $b/publisher = \"Addison-Wesley\" and $b/year > 1991 then {$year} } };
                       on title as $title return
                         { if $b/publisher = \"Addison-Wesley\" and $b/year > 1991 then {$title} };
                       on-first past(publisher,year,title) return
                         { if $b/publisher = \"Addison-Wesley\" and $b/year > 1991 then </book> } } };
               on-first past(bib) return </bib> }",
        );
    }

    #[test]
    fn join_query_buffers_articles_and_books_under_a_free_schema() {
        assert_plan(
            JOIN_QUERY,
            JOIN_FREE_DTD,
            "{ ps $ROOT:
               on-first past() return <results>;
               on bib as $bib return
                 { ps $bib:
                   on-first past(book,article) return
                     { for $article in $bib/article return
                       { for $book in $bib/book return
                         { if $article/author = $book/editor then <result> }
                         { for $author in $article/author return
                           { if $article/author = $book/editor then {$author} } }
                         { if $article/author = $book/editor then </result> } } } };
               on-first past(bib) return </results> }",
        );
    }

    #[test]
    fn join_query_streams_articles_once_books_come_first() {
        assert_plan(
            JOIN_QUERY,
            JOIN_ORDERED_DTD,
            "{ ps $ROOT:
               on-first past() return <results>;
               on bib as $bib return
                 { ps $bib:
                   on article as $article return
                     { ps $article:
                       on-first past(author) return
                         { for $book in $bib/book return
                           { if $article/author = $book/editor then <result> }
                           { for $author in $article/author return
                             { if $article/author = $book/editor then {$author} } }
                           { if $article/author = $book/editor then </result> } } } };
               on-first past(bib) return </results> }",
        );
    }

    #[test]
    fn listing_query_buffers_authors_under_the_free_schema() {
        assert_plan(
            LISTING_QUERY,
            WEAK_DTD,
            "{ ps $ROOT:
               on-first past() return <results>;
               on bib as $bib return
                 { ps $bib:
                   on book as $b return
                     { ps $b:
                       on-first past() return <result>;
                       on title as $t return {$t};
                       on-first past(title,author) return
                         { for $a in $b/author return {$a} };
                       on-first past(title,author) return </result> } };
               on-first past(bib) return </results> }",
        );
    }

    #[test]
    fn listing_query_is_fully_streaming_under_the_ordered_schema() {
        assert_plan(
            LISTING_QUERY,
            XMP_DTD,
            "{ ps $ROOT:
               on-first past() return <results>;
               on bib as $bib return
                 { ps $bib:
                   on book as $b return
                     { ps $b:
                       on-first past() return <result>;
                       on title as $t return {$t};
                       on author as $a return {$a};
                       on-first past(title,author) return </result> } };
               on-first past(bib) return </results> }",
        );
    }

    #[test]
    fn literal_becomes_a_single_immediate_handler() {
        let schema = Schema::parse(WEAK_DTD).unwrap();
        let flux = rewrite(&Query::str("<results>"), &schema).unwrap();
        let want = parse_flux("{ ps $ROOT: on-first past() return <results> }").unwrap();
        assert!(alpha_eq(&flux, &want), "got:\n{flux}");
    }

    #[test]
    fn empty_query_becomes_a_single_empty_handler() {
        let (flux, report) = compile("", WEAK_DTD).unwrap();
        match &flux {
            Flux::Ps { var, handlers, .. } => {
                assert_eq!(var, "ROOT");
                assert_eq!(
                    handlers.as_slice(),
                    &[Handler::OnFirst { past: PastSpec::empty(), body: Query::Empty }]
                );
            }
            other => panic!("expected a handler block, got `{other}`"),
        }
        assert_eq!(report.normalization.rule_applications, 0);
    }

    #[test]
    fn whole_document_echo_is_returned_raw() {
        let (flux, _) = compile("{$ROOT}", WEAK_DTD).unwrap();
        assert_eq!(flux, Flux::Simple(Query::var_out("ROOT")));
    }

    #[test]
    fn mixed_document_echo_waits_for_the_end() {
        let (flux, _) = compile(
            "<all> { for $b in /bib return {$b} } {$ROOT} </all>",
            WEAK_DTD,
        )
        .unwrap();
        match &flux {
            Flux::Ps { handlers, .. } => match handlers.as_slice() {
                [Handler::OnFirst { past: PastSpec::All, .. }] => {}
                other => panic!("expected one wait-for-everything handler, got {other:?}"),
            },
            other => panic!("expected a handler block, got `{other}`"),
        }
    }

    #[test]
    fn unnormalized_queries_are_rejected() {
        let schema = Schema::parse(WEAK_DTD).unwrap();
        let query = parse_query(
            "{ for $b in /bib/book where $b/title = \"T\" return <hit/> }",
        )
        .unwrap();
        assert!(matches!(
            rewrite(&query, &schema),
            Err(RewriteError::NotNormalForm { .. })
        ));
    }

    #[test]
    fn unbound_source_variables_are_rejected() {
        let schema = Schema::parse(WEAK_DTD).unwrap();
        let query = Query::For {
            var: "y".into(),
            source: "nowhere".into(),
            path: crate::query::FixedPath::single("book"),
            body: Box::new(Query::str("x")),
        };
        assert_eq!(
            rewrite(&query, &schema),
            Err(RewriteError::UnboundVariable { var: "nowhere".into() })
        );
    }

    #[test]
    fn dead_loops_error_strictly_and_warn_when_allowed() {
        let query = "{ for $c in /chapter return {$c} }";
        match compile(query, WEAK_DTD) {
            Err(CompileError::Rewrite(RewriteError::ElementNotInSchema { element, .. })) => {
                assert_eq!(element, "chapter");
            }
            other => panic!("expected a dead-loop error, got {other:?}"),
        }

        let options = RewriteOptions { allow_dead_loops: true, ..Default::default() };
        let (flux, report) = compile_with(query, WEAK_DTD, &options).unwrap();
        assert_eq!(report.warnings.len(), 1, "one warning for the dead loop");
        match &flux {
            Flux::Ps { handlers, .. } => match handlers.as_slice() {
                [Handler::On { sym, body, .. }] => {
                    assert_eq!(sym, "chapter");
                    assert!(matches!(body.as_ref(), Flux::Simple(Query::VarOut(_))));
                }
                other => panic!("expected one never-firing handler, got {other:?}"),
            },
            other => panic!("expected a handler block, got `{other}`"),
        }
    }

    #[test]
    fn sequence_split_direction_does_not_change_the_plan() {
        let corpus = [
            (PAIRS_QUERY, WEAK_DTD),
            (PAIRS_QUERY, AUTHORS_THEN_TITLES_DTD),
            (FILTER_QUERY, FILTER_DTD),
            (FILTER_QUERY, FILTER_TITLES_LAST_DTD),
            (JOIN_QUERY, JOIN_FREE_DTD),
            (JOIN_QUERY, JOIN_ORDERED_DTD),
            (LISTING_QUERY, WEAK_DTD),
            (LISTING_QUERY, XMP_DTD),
        ];
        for (query, dtd) in corpus {
            let head = RewriteOptions { split: SeqSplit::HeadFirst, ..Default::default() };
            let last = RewriteOptions { split: SeqSplit::LastFirst, ..Default::default() };
            let (a, _) = compile_with(query, dtd, &head).unwrap();
            let (b, _) = compile_with(query, dtd, &last).unwrap();
            assert!(alpha_eq(&a, &b), "split direction changed the plan:\n{a}\n\nvs:\n{b}");
        }
    }

    #[test]
    fn scheduling_scales_subquadratically_in_the_query_size() {
        use std::time::Instant;

        let schema = Schema::parse(WEAK_DTD).unwrap();
        let family = |n: usize| {
            Query::seq(
                (0..n)
                    .map(|i| Query::For {
                        var: format!("b{i}"),
                        source: "ROOT".into(),
                        path: crate::query::FixedPath::single("bib"),
                        body: Box::new(Query::str(format!("<x{i}/>"))),
                    })
                    .collect(),
            )
        };
        let time = |n: usize| {
            let q = family(n);
            let mut best = std::time::Duration::MAX;
            for _ in 0..3 {
                let start = Instant::now();
                rewrite(&q, &schema).unwrap();
                best = best.min(start.elapsed());
            }
            best
        };
        let small = time(150).max(std::time::Duration::from_micros(200));
        let big = time(600);
        // 4x the input: quadratic growth predicts 16x the time; anything
        // worse than ~double that is a complexity regression, not noise.
        assert!(
            big < small * 40,
            "rewriting 600 loops took {big:?}, 150 took {small:?}"
        );
    }

    #[test]
    fn compiled_plans_pass_the_safety_audit() {
        // compile() audits internally; this locks the postcondition in
        // explicitly for the whole corpus, including the tolerant mode.
        use crate::flux::check_safety;
        let corpus = [
            (PAIRS_QUERY, WEAK_DTD),
            (PAIRS_QUERY, AUTHORS_THEN_TITLES_DTD),
            (FILTER_QUERY, FILTER_DTD),
            (FILTER_QUERY, FILTER_TITLES_LAST_DTD),
            (JOIN_QUERY, JOIN_FREE_DTD),
            (JOIN_QUERY, JOIN_ORDERED_DTD),
            (LISTING_QUERY, WEAK_DTD),
            (LISTING_QUERY, XMP_DTD),
        ];
        for (query, dtd) in corpus {
            let (flux, _) = compile(query, dtd).unwrap();
            let schema = Schema::parse(dtd).unwrap();
            assert_eq!(check_safety(&flux, &schema).unwrap(), vec![]);
        }
    }
}
