//! Streaming execution: tokenizer, validating punctuator, plan builder,
//! event dispatcher with buffer management, the tree-materializing
//! reference evaluators, and the synthetic data generators.

pub mod buffer;
pub mod plan;
pub mod punctuate;
pub mod reference;
pub mod run;
pub mod token;

use crate::query::RelOp;

/// The comparison rule used by both engines: if both sides parse as
/// floating-point numbers after trimming, compare numerically (comparisons
/// involving NaN are false); otherwise compare the raw strings
/// lexicographically.
pub fn compare(lhs: &str, op: RelOp, rhs: &str) -> bool {
    let ord = match (lhs.trim().parse::<f64>(), rhs.trim().parse::<f64>()) {
        (Ok(a), Ok(b)) => match a.partial_cmp(&b) {
            Some(o) => o,
            None => return false,
        },
        _ => lhs.cmp(rhs),
    };
    match op {
        RelOp::Eq => ord.is_eq(),
        RelOp::Lt => ord.is_lt(),
        RelOp::Le => ord.is_le(),
        RelOp::Gt => ord.is_gt(),
        RelOp::Ge => ord.is_ge(),
    }
}
