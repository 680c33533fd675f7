//! Differential tests: the Glushkov-based analyses against independent
//! Brzozowski-derivative oracles, on directed examples and random models.

mod common;

use std::collections::BTreeSet;

use common::{gens, oracle};
use fluxq::schema::{Glushkov, PastTable, RegExpr, ValidatorState};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn strs(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

/// `(a*,b,c*,d | e*),a*`
fn mixed() -> RegExpr {
    RegExpr::seq(vec![
        RegExpr::alt(vec![
            RegExpr::seq(vec![
                RegExpr::star(RegExpr::atom("a")),
                RegExpr::atom("b"),
                RegExpr::star(RegExpr::atom("c")),
                RegExpr::atom("d"),
            ]),
            RegExpr::star(RegExpr::atom("e")),
        ]),
        RegExpr::star(RegExpr::atom("a")),
    ])
}

#[test]
fn derivative_oracle_basics() {
    use oracle::{can_contain, deriv, from_regex, matches, Rx};
    let rx = from_regex(&mixed());
    assert!(matches(&rx, &["a", "b", "c", "d", "a"]));
    assert!(matches(&rx, &["e", "e", "a"]));
    assert!(matches::<&str>(&rx, &[])); // e* with zero e's
    assert!(!matches(&rx, &["b", "a"]));
    assert!(!matches(&rx, &["d"]));

    let after_d = ["a", "b", "d"]
        .iter()
        .fold(rx.clone(), |r, s| deriv(&r, s));
    assert!(!can_contain(&after_d, "b"));
    assert!(!can_contain(&after_d, "c"));
    assert!(can_contain(&after_d, "a"));
    assert_eq!(deriv(&rx, "d"), Rx::Void);
}

#[test]
fn ord_oracle_reproduces_the_frozen_relation() {
    let re = mixed();
    let rx = oracle::from_regex(&re);
    let alphabet = strs(&["a", "b", "c", "d", "e"]);
    let mut got = BTreeSet::new();
    for a in &alphabet {
        for b in &alphabet {
            if oracle::ord(&rx, a, b, &alphabet) {
                got.insert((a.clone(), b.clone()));
            }
        }
    }
    let expected: BTreeSet<(String, String)> = [
        ("b", "b"),
        ("d", "d"),
        ("b", "c"),
        ("b", "d"),
        ("c", "d"),
        ("e", "a"),
        ("b", "e"),
        ("e", "b"),
        ("c", "e"),
        ("e", "c"),
        ("d", "e"),
        ("e", "d"),
    ]
    .into_iter()
    .map(|(a, b)| (a.to_string(), b.to_string()))
    .collect();
    assert_eq!(got, expected);
    // Foreign symbols are vacuously ordered both ways.
    assert!(oracle::ord(&rx, "zz", "a", &alphabet));
    assert!(oracle::ord(&rx, "a", "zz", &alphabet));
}

#[test]
fn random_automata_accept_the_same_language_as_the_expression() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xF1);
    for _ in 0..300 {
        let re = gens::random_regex(&mut rng, &["a", "b", "c"], 10);
        let g = Glushkov::build_relaxed(&re);
        oracle::assert_same_language(&re, &g, "zz");
    }
}

#[test]
fn random_order_relations_match_the_word_level_definition() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xF2);
    let pairs = ["a", "b", "c", "zz"];
    for _ in 0..200 {
        let re = gens::random_regex(&mut rng, &["a", "b", "c"], 8);
        let g = Glushkov::build_relaxed(&re);
        let rx = oracle::from_regex(&re);
        let alphabet = strs(&["a", "b", "c"]);
        for a in pairs {
            for b in pairs {
                assert_eq!(
                    g.ord(a, b),
                    oracle::ord(&rx, a, b, &alphabet),
                    "ord({a},{b}) disagrees for {re}"
                );
            }
        }
    }
}

#[test]
fn past_means_no_extension_contains_the_symbol() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xF3);
    let alphabet = strs(&["a", "b", "c"]);
    for _ in 0..150 {
        let re = gens::random_regex(&mut rng, &["a", "b", "c"], 8);
        let g = Glushkov::build_relaxed(&re);
        let rx = oracle::from_regex(&re);
        for word in oracle::accepted_words(&rx, &alphabet, 6, 80) {
            let mut states: BTreeSet<usize> = [0usize].into();
            let mut dv = rx.clone();
            for i in 0..=word.len() {
                for sym in ["a", "b", "c", "zz"] {
                    let auto_past = states.iter().all(|&q| g.past(q, sym));
                    let oracle_past = !oracle::can_contain(&dv, sym);
                    assert_eq!(
                        auto_past, oracle_past,
                        "past({sym}) after {:?} disagrees for {re}",
                        &word[..i]
                    );
                }
                if i < word.len() {
                    let sym = &word[i];
                    states = states
                        .iter()
                        .flat_map(|&q| g.targets(q, sym).iter().copied())
                        .collect();
                    dv = oracle::deriv(&dv, sym);
                }
            }
        }
    }
}

#[test]
fn distinct_symbol_models_are_always_one_unambiguous() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xF4);
    for _ in 0..200 {
        let mut pool = strs(&["a", "b", "c", "d", "e"]);
        pool.truncate(rng.gen_range(1..=5));
        let re = gens::random_distinct_regex(&mut rng, &pool);
        let g = Glushkov::build(&re)
            .unwrap_or_else(|e| panic!("distinct regex {re} should be deterministic: {e}"));
        oracle::assert_same_language(&re, &g, "zz");
    }
}

#[test]
fn validator_fires_exactly_at_the_earliest_past_prefix() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xF5);
    for _ in 0..200 {
        let mut pool = strs(&["a", "b", "c", "d"]);
        pool.truncate(rng.gen_range(1..=4));
        let re = gens::random_distinct_regex(&mut rng, &pool);
        let Ok(g) = Glushkov::build(&re) else {
            panic!("distinct regexes are deterministic")
        };
        let rx = oracle::from_regex(&re);
        let words = oracle::accepted_words(&rx, &pool, 6, 40);

        // A random target set, sometimes with a symbol the model never uses.
        let mut set: BTreeSet<String> = pool
            .iter()
            .filter(|_| rng.gen_bool(0.5))
            .cloned()
            .collect();
        if rng.gen_bool(0.2) {
            set.insert("zz".to_string());
        }
        let tables = vec![PastTable::new(&g, set.clone())];

        for word in &words {
            let expected = oracle::first_past_position(&rx, word, &set);
            let (mut v, fired0) = ValidatorState::start(&tables);
            let mut actual = if fired0.contains(&0) { Some(0) } else { None };
            for (i, sym) in word.iter().enumerate() {
                let fired = v
                    .step("elem", &g, &tables, sym)
                    .unwrap_or_else(|e| panic!("word {word:?} must validate against {re}: {e}"));
                if actual.is_none() && fired.contains(&0) {
                    actual = Some(i + 1);
                }
            }
            v.finish("elem", &g)
                .unwrap_or_else(|e| panic!("word {word:?} must be complete for {re}: {e}"));
            assert_eq!(
                actual, expected,
                "first firing position for set {set:?} on word {word:?} under {re}"
            );
        }
    }
}
