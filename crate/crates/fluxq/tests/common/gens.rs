//! Random generators for the differential test suites.

use fluxq::schema::RegExpr;
use rand::prelude::*;

/// Random expression over `alphabet` with roughly `budget` atom occurrences.
/// Symbols may repeat, so the result is frequently not one-unambiguous;
/// build it relaxed.
pub fn random_regex(rng: &mut impl Rng, alphabet: &[&str], budget: usize) -> RegExpr {
    if budget <= 1 {
        return if rng.gen_ratio(1, 10) {
            RegExpr::Epsilon
        } else {
            RegExpr::atom(*alphabet.choose(rng).unwrap())
        };
    }
    match rng.gen_range(0..100) {
        0..=29 => {
            let parts = rng.gen_range(2..=3.min(budget));
            let each = (budget / parts).max(1);
            RegExpr::seq(
                (0..parts)
                    .map(|_| random_regex(rng, alphabet, each))
                    .collect(),
            )
        }
        30..=54 => {
            let parts = rng.gen_range(2..=3.min(budget));
            let each = (budget / parts).max(1);
            RegExpr::alt(
                (0..parts)
                    .map(|_| random_regex(rng, alphabet, each))
                    .collect(),
            )
        }
        55..=69 => RegExpr::star(random_regex(rng, alphabet, budget - 1)),
        70..=79 => RegExpr::plus(random_regex(rng, alphabet, budget - 1)),
        80..=89 => RegExpr::opt(random_regex(rng, alphabet, budget - 1)),
        _ => RegExpr::atom(*alphabet.choose(rng).unwrap()),
    }
}

/// Random expression in which every symbol of `pool` occurs exactly once.
/// One atom occurrence per symbol means the position automaton cannot have
/// two targets for the same symbol anywhere, so the result is always
/// one-unambiguous.
pub fn random_distinct_regex(rng: &mut impl Rng, pool: &[String]) -> RegExpr {
    let body = distinct_inner(rng, pool);
    maybe_postfix(rng, body)
}

fn distinct_inner(rng: &mut impl Rng, pool: &[String]) -> RegExpr {
    match pool.len() {
        0 => RegExpr::Epsilon,
        1 => maybe_postfix(rng, RegExpr::atom(pool[0].clone())),
        n => {
            let split = rng.gen_range(1..n);
            let left = distinct_inner(rng, &pool[..split]);
            let right = distinct_inner(rng, &pool[split..]);
            let joined = if rng.gen_bool(0.6) {
                RegExpr::seq(vec![left, right])
            } else {
                RegExpr::alt(vec![left, right])
            };
            maybe_postfix(rng, joined)
        }
    }
}

fn maybe_postfix(rng: &mut impl Rng, re: RegExpr) -> RegExpr {
    match rng.gen_range(0..10) {
        0 => RegExpr::star(re),
        1 => RegExpr::plus(re),
        2 => RegExpr::opt(re),
        _ => re,
    }
}
