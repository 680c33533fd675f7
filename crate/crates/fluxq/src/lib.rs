//! Schema-aware streaming engine for an XQuery fragment.
//!
//! The pipeline: a DTD is parsed into content-model regular expressions, from
//! which position automata are built. Those automata yield two static
//! relations per element — "a is always past once b has been read" and
//! "all a-children precede all b-children" — plus runtime punctuation that
//! marks the earliest point where a set of child labels can no longer occur.
//!
//! Queries (a small XQuery fragment) are normalized and then rewritten into
//! an event-handler language: each handler either reacts to a child element
//! (`on a as $x`) or to a punctuation mark (`on-first past(S)`). The rewrite
//! consults the order relations so that handlers only run when the data they
//! read has provably arrived, which is what makes single-pass streaming with
//! minimal buffering possible. A projection pass computes, per variable, the
//! exact tree of descendant paths that must be buffered; everything else is
//! forwarded or dropped as it streams by.

pub mod engine;
pub mod flux;
pub mod normalize;
pub mod projection;
pub mod query;
pub mod rewrite;
pub mod schema;
