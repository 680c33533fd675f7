//! Parser for the plan syntax.
//!
//! A plan is either a plain query template, or literal text around a single
//! stream block:
//!
//! ```text
//! prefix { process-stream $y:
//!   on-first past(a,b) return TEMPLATE;
//!   on a as $x return PLAN } suffix
//! ```
//!
//! `ps` abbreviates `process-stream`; `past(*)` waits on every child symbol
//! and `past()` on none. Handler bodies end at the next `;` or `}` at their
//! own depth, so literal text directly inside a handler cannot contain a
//! bare `;` (put it inside a nested block's body instead). Prefix and suffix
//! must be literal text. Scoping follows the query parser: `on … as $x`
//! binds `$x`, the stream variable must already be in scope, and re-used
//! binder names are renamed apart.

use super::ast::{Flux, Handler, PastSpec};
use crate::query::parser::{Parser, Stop};
use crate::query::ParseError;

pub fn parse_flux(text: &str) -> Result<Flux, ParseError> {
    let mut p = Parser::new(text);
    let f = flux_expr(&mut p, true)?;
    p.skip_ws();
    if !p.at_end() {
        return Err(p.err("unexpected trailing input after the plan"));
    }
    Ok(f)
}

pub(crate) fn flux_expr(p: &mut Parser, top: bool) -> Result<Flux, ParseError> {
    match ps_lookahead(p.rest(), top) {
        Some(brace) => {
            let prefix = p.rest()[..brace].trim().to_string();
            if let Some(off) = p.rest()[..brace].find('}') {
                p.advance_bytes(off);
                return Err(p.err("unexpected `}` before the stream block"));
            }
            p.advance_bytes(brace);
            ps_block(p, prefix, top)
        }
        None => {
            let q = p.template(if top { Stop::Eof } else { Stop::Handler })?;
            Flux::simple(q).map_err(|e| p.err(e.to_string()))
        }
    }
}

/// Byte offset of a `{` opening a stream block (i.e. followed by
/// `ps`/`process-stream`), if the input from here on has the shape
/// `literal { ps …`. At nested depth the preceding literal may not contain
/// `;` or `}` — those end the surrounding handler instead.
fn ps_lookahead(rest: &str, top: bool) -> Option<usize> {
    for (i, c) in rest.char_indices() {
        match c {
            '{' => {
                let word: String = rest[i + 1..]
                    .trim_start()
                    .chars()
                    .take_while(|c| c.is_ascii_alphanumeric() || *c == '-' || *c == '_')
                    .collect();
                return (word == "ps" || word == "process-stream").then_some(i);
            }
            ';' | '}' if !top => return None,
            _ => {}
        }
    }
    None
}

fn ps_block(p: &mut Parser, prefix: String, top: bool) -> Result<Flux, ParseError> {
    p.skip_ws();
    if !p.eat("{") {
        return Err(p.err("expected `{` to open the stream block"));
    }
    if !(p.keyword("process-stream") || p.keyword("ps")) {
        return Err(p.err("expected `process-stream`"));
    }
    p.skip_ws();
    if !p.eat("$") {
        return Err(p.err("expected the stream variable, e.g. `ps $x:`"));
    }
    let name = p.ident()?;
    let var = p
        .resolve(&name)
        .ok_or_else(|| p.err(format!("stream variable `${name}` is not in scope")))?;
    p.skip_ws();
    if !p.eat(":") {
        return Err(p.err("expected `:` after the stream variable"));
    }

    let mut handlers = vec![handler(p)?];
    loop {
        p.skip_ws();
        if p.eat(";") {
            handlers.push(handler(p)?);
        } else {
            break;
        }
    }
    if !p.eat("}") {
        return Err(p.err("expected `;` or `}` after an event handler"));
    }

    let suffix = suffix_literal(p, top)?;
    Ok(Flux::Ps {
        prefix,
        var,
        handlers,
        suffix,
    })
}

fn handler(p: &mut Parser) -> Result<Handler, ParseError> {
    p.skip_ws();
    if p.keyword("on-first") {
        p.expect_keyword("past")?;
        p.skip_ws();
        if !p.eat("(") {
            return Err(p.err("expected `(` after `past`"));
        }
        p.skip_ws();
        let past = if p.eat("*") {
            PastSpec::All
        } else if p.rest().starts_with(')') {
            PastSpec::empty()
        } else {
            let mut set = std::collections::BTreeSet::new();
            loop {
                p.skip_ws();
                set.insert(p.ident()?);
                p.skip_ws();
                if !p.eat(",") {
                    break;
                }
            }
            PastSpec::Set(set)
        };
        p.skip_ws();
        if !p.eat(")") {
            return Err(p.err("expected `)` to close the `past(…)` set"));
        }
        p.expect_keyword("return")?;
        let body = p.template(Stop::Handler)?;
        Ok(Handler::OnFirst { past, body })
    } else if p.keyword("on") {
        p.skip_ws();
        let sym = p.ident()?;
        p.expect_keyword("as")?;
        p.skip_ws();
        if !p.eat("$") {
            return Err(p.err("expected a variable like `$x` after `as`"));
        }
        let name = p.ident()?;
        let var = p.bind(&name)?;
        p.expect_keyword("return")?;
        let body = flux_expr(p, false);
        p.pop_scope();
        Ok(Handler::On {
            sym,
            var,
            body: Box::new(body?),
        })
    } else {
        Err(p.err("expected an event handler (`on` or `on-first`)"))
    }
}

/// Literal text after a stream block: runs to end of input at the top, or to
/// the `;`/`}` ending the surrounding handler when nested.
fn suffix_literal(p: &mut Parser, top: bool) -> Result<String, ParseError> {
    let rest = p.rest();
    let mut end = rest.len();
    for (i, c) in rest.char_indices() {
        match c {
            '{' => {
                p.advance_bytes(i);
                return Err(p.err("only literal text may follow a stream block"));
            }
            '}' if top => {
                p.advance_bytes(i);
                return Err(p.err("unexpected `}` after the stream block"));
            }
            ';' | '}' => {
                end = i;
                break;
            }
            _ => {}
        }
    }
    let suffix = rest[..end].trim().to_string();
    p.advance_bytes(end);
    Ok(suffix)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flux::ast::{alpha_eq, maximal_query_subexprs};
    use crate::query::{parse_query, Query};

    /// The streaming form of the title/author pairing query under a schema
    /// with no order among a book's children.
    const PAIRS_BUFFERED: &str = "<results>\n\
         { process-stream $ROOT: on bib as $bib return\n\
           { process-stream $bib: on book as $book return\n\
             <result>\n\
             { process-stream $book:\n\
               on title as $t return {$t};\n\
               on-first past(title,author) return\n\
                 { for $a in $book/author return {$a} } }\n\
             </result> } }\n\
         </results>";

    #[test]
    fn parses_the_nested_listing_with_prefix_and_suffix() {
        let f = parse_flux(PAIRS_BUFFERED).unwrap();
        let Flux::Ps {
            prefix,
            var,
            handlers,
            suffix,
        } = &f
        else {
            panic!("expected a stream plan")
        };
        assert_eq!((prefix.as_str(), suffix.as_str()), ("<results>", "</results>"));
        assert_eq!(var, "ROOT");
        assert_eq!(handlers.len(), 1);
        let Handler::On { sym, var, body } = &handlers[0] else {
            panic!()
        };
        assert_eq!((sym.as_str(), var.as_str()), ("bib", "bib"));
        let Flux::Ps { handlers, .. } = &**body else {
            panic!()
        };
        let Handler::On { body, .. } = &handlers[0] else {
            panic!()
        };
        let Flux::Ps {
            prefix,
            handlers,
            suffix,
            ..
        } = &**body
        else {
            panic!()
        };
        assert_eq!((prefix.as_str(), suffix.as_str()), ("<result>", "</result>"));
        assert_eq!(handlers.len(), 2);
        assert!(matches!(
            &handlers[0],
            Handler::On { sym, body, .. }
                if sym == "title" && matches!(&**body, Flux::Simple(Query::VarOut(v)) if v == "t")
        ));
        let Handler::OnFirst { past, body } = &handlers[1] else {
            panic!()
        };
        assert_eq!(*past, PastSpec::set(["title", "author"]));
        assert!(matches!(body, Query::For { .. }));
    }

    #[test]
    fn maximal_subexpressions_of_the_listing() {
        let f = parse_flux(PAIRS_BUFFERED).unwrap();
        let subs = maximal_query_subexprs(&f);
        let texts: Vec<String> = subs.iter().map(|(_, q)| q.to_string()).collect();
        assert_eq!(
            texts,
            vec![
                "{$t}",
                "{ for $a in $book/author return {$a} }",
            ]
        );
        assert_eq!(subs[0].0, vec![0, 0, 0]);
        assert_eq!(subs[1].0, vec![0, 0, 1]);
    }

    #[test]
    fn machine_form_with_multiple_top_handlers() {
        let f = parse_flux(
            "{ ps $ROOT:\n\
               on-first past() return <results>;\n\
               on bib as $bib return\n\
                 { ps $bib: on-first past(book,article) return\n\
                   { for $article in $bib/article return {$article} } };\n\
               on-first past(bib) return </results> }",
        )
        .unwrap();
        let Flux::Ps {
            prefix,
            handlers,
            suffix,
            ..
        } = &f
        else {
            panic!()
        };
        assert!(prefix.is_empty() && suffix.is_empty());
        assert_eq!(handlers.len(), 3);
        assert!(
            matches!(&handlers[0], Handler::OnFirst { past, body }
                if *past == PastSpec::empty() && *body == Query::str("<results>"))
        );
        assert!(
            matches!(&handlers[2], Handler::OnFirst { past, body }
                if *past == PastSpec::set(["bib"]) && *body == Query::str("</results>"))
        );
    }

    #[test]
    fn past_star_and_shorthand_round_trip() {
        let f = parse_flux(
            "{ ps $ROOT: on a as $x return { ps $x: on-first past(*) return {$x} } }",
        )
        .unwrap();
        let printed = f.to_string();
        assert!(printed.contains("past(*)"), "{printed}");
        let again = parse_flux(&printed).unwrap();
        assert_eq!(f, again);
    }

    #[test]
    fn round_trips_through_display() {
        for text in [
            PAIRS_BUFFERED,
            "<a/>",
            "()",
            "{ ps $ROOT: on-first past() return () }",
            "{ ps $ROOT: on x as $x return pre { ps $x: on-first past(*) return {$x} } post;\n\
                         on-first past(x) return done }",
        ] {
            let once = parse_flux(text).unwrap();
            let again = parse_flux(&once.to_string()).unwrap();
            assert_eq!(once, again, "round-trip failed for {text}");
        }
    }

    #[test]
    fn plain_templates_parse_as_simple_plans() {
        assert_eq!(parse_flux("<hello/>").unwrap(), Flux::Simple(Query::str("<hello/>")));
        assert_eq!(parse_flux("()").unwrap(), Flux::Simple(Query::Empty));
        // Escaped-looking text containing "ps" stays a template.
        let f = parse_flux("<a> {$ROOT} </a>").unwrap();
        assert!(matches!(f, Flux::Simple(Query::Seq(_))));
    }

    #[test]
    fn rejects_non_simple_plain_queries() {
        let err = parse_flux("{ for $x in $ROOT/a return {$x} }").unwrap_err();
        assert!(err.msg.contains("not a simple expression"), "{err}");
        let err = parse_flux("{$ROOT} {$ROOT}").unwrap_err();
        assert!(err.msg.contains("not a simple expression"), "{err}");
    }

    #[test]
    fn rejects_malformed_blocks() {
        // No handlers.
        assert!(parse_flux("{ ps $ROOT: }").is_err());
        // Unknown stream variable.
        let err = parse_flux("{ ps $nope: on-first past() return () }").unwrap_err();
        assert!(err.msg.contains("$nope"), "{err}");
        // Handler keyword misspelled.
        assert!(parse_flux("{ ps $ROOT: on-firstpast() return () }").is_err());
        // Expression after the block.
        let err = parse_flux("{ ps $ROOT: on-first past() return () } {$ROOT}").unwrap_err();
        assert!(err.msg.contains("literal text"), "{err}");
        // A ps block in expression position.
        let err =
            parse_flux("<a> {$ROOT} { ps $ROOT: on-first past() return () }").unwrap_err();
        assert!(err.msg.contains("sole block"), "{err}");
        // past set must close.
        assert!(parse_flux("{ ps $ROOT: on-first past(a, return () }").is_err());
    }

    #[test]
    fn binders_rename_apart_across_handlers() {
        let f = parse_flux(
            "{ ps $ROOT: on a as $x return {$x}; on b as $x return {$x} }",
        )
        .unwrap();
        let Flux::Ps { handlers, .. } = &f else { panic!() };
        let names: Vec<&str> = handlers
            .iter()
            .map(|h| match h {
                Handler::On { var, .. } => var.as_str(),
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(names, ["x", "x_2"]);
        // Each body outputs its own binder.
        assert!(alpha_eq(
            &f,
            &parse_flux("{ ps $ROOT: on a as $u return {$u}; on b as $v return {$v} }").unwrap()
        ));
    }

    #[test]
    fn alpha_eq_distinguishes_sets_and_symbols() {
        let base = "{ ps $ROOT: on a as $x return {$x} }";
        let f = parse_flux(base).unwrap();
        assert!(!alpha_eq(
            &f,
            &parse_flux("{ ps $ROOT: on b as $x return {$x} }").unwrap()
        ));
        assert!(!alpha_eq(
            &f,
            &parse_flux("{ ps $ROOT: on-first past(a) return () }").unwrap()
        ));
        let g = parse_flux("{ ps $ROOT: on-first past(a,b) return x }").unwrap();
        let h = parse_flux("{ ps $ROOT: on-first past(b,a) return x }").unwrap();
        assert!(alpha_eq(&g, &h), "past sets are unordered");
    }

    #[test]
    fn free_variable_accounting() {
        use crate::flux::ast::free_vars;
        let f = parse_flux(PAIRS_BUFFERED).unwrap();
        assert_eq!(
            free_vars(&f).into_iter().collect::<Vec<_>>(),
            vec!["ROOT".to_string()]
        );
    }

    #[test]
    fn handler_bodies_may_hold_full_templates() {
        let f = parse_flux(
            "{ ps $ROOT: on-first past() return <a> {$ROOT} <b> { if $ROOT/p then c } }",
        )
        .unwrap();
        let Flux::Ps { handlers, .. } = &f else { panic!() };
        let Handler::OnFirst { body, .. } = &handlers[0] else {
            panic!()
        };
        let expected = parse_query("<a> {$ROOT} <b> { if $ROOT/p then c }").unwrap();
        assert_eq!(*body, expected);
    }
}
