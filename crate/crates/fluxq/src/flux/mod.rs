//! Event-handler plans: AST, concrete-syntax parser, and the static safety
//! check that ties a plan to a schema.

pub mod ast;
pub mod parser;
pub mod safety;

pub use ast::{
    alpha_eq, free_vars, hsymb, is_simple, maximal_query_subexprs, Flux, Handler, NotSimple,
    PastSpec,
};
pub use parser::parse_flux;
pub use safety::{
    check_safety, check_safety_with, SafetyError, SafetyOptions, SafetyViolation, ViolationKind,
};
