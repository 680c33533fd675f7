//! The query fragment: AST, concrete-syntax parser, and static analyses.

pub mod analysis;
pub mod ast;
pub mod parser;

pub use analysis::{alpha_eq, condition_paths, dependencies, free_vars, parent_var};
pub use ast::{Cond, FixedPath, Query, RelOp, VarPath};
pub use parser::{parse_query, ParseError};
