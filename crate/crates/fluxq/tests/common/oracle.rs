//! Independent reference implementations used to cross-check the engine's
//! analyses. Everything here works on Brzozowski derivatives of a private
//! regex type, deliberately sharing no code with the Glushkov construction.

use std::collections::{BTreeSet, HashSet, VecDeque};

use fluxq::schema::{Glushkov, RegExpr};

/// Canonical regular expression: `Alt` is a set (associative, commutative,
/// idempotent), `Seq` is flattened with units removed, `Star` is collapsed.
/// With these invariants a non-`Void` value always has a nonempty language,
/// and the set of derivatives of any expression is finite.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Rx {
    /// The empty language.
    Void,
    Eps,
    Sym(String),
    Seq(Vec<Rx>),
    Alt(BTreeSet<Rx>),
    Star(Box<Rx>),
}

pub fn seq(items: Vec<Rx>) -> Rx {
    let mut out = Vec::new();
    for x in items {
        match x {
            Rx::Void => return Rx::Void,
            Rx::Eps => {}
            Rx::Seq(inner) => out.extend(inner),
            other => out.push(other),
        }
    }
    match out.len() {
        0 => Rx::Eps,
        1 => out.pop().unwrap(),
        _ => Rx::Seq(out),
    }
}

pub fn alt(items: impl IntoIterator<Item = Rx>) -> Rx {
    let mut set = BTreeSet::new();
    for x in items {
        match x {
            Rx::Void => {}
            Rx::Alt(inner) => set.extend(inner),
            other => {
                set.insert(other);
            }
        }
    }
    match set.len() {
        0 => Rx::Void,
        1 => set.into_iter().next().unwrap(),
        _ => Rx::Alt(set),
    }
}

pub fn star(x: Rx) -> Rx {
    match x {
        Rx::Void | Rx::Eps => Rx::Eps,
        s @ Rx::Star(_) => s,
        other => Rx::Star(Box::new(other)),
    }
}

pub fn from_regex(re: &RegExpr) -> Rx {
    match re {
        RegExpr::Epsilon => Rx::Eps,
        RegExpr::Atom(s) => Rx::Sym(s.clone()),
        RegExpr::Seq(items) => seq(items.iter().map(from_regex).collect()),
        RegExpr::Alt(items) => alt(items.iter().map(from_regex)),
        RegExpr::Star(x) => star(from_regex(x)),
        RegExpr::Plus(x) => {
            let r = from_regex(x);
            seq(vec![r.clone(), star(r)])
        }
        RegExpr::Opt(x) => alt([from_regex(x), Rx::Eps]),
    }
}

pub fn nullable(rx: &Rx) -> bool {
    match rx {
        Rx::Void | Rx::Sym(_) => false,
        Rx::Eps | Rx::Star(_) => true,
        Rx::Seq(items) => items.iter().all(nullable),
        Rx::Alt(set) => set.iter().any(nullable),
    }
}

pub fn deriv(rx: &Rx, sym: &str) -> Rx {
    match rx {
        Rx::Void | Rx::Eps => Rx::Void,
        Rx::Sym(s) => {
            if s == sym {
                Rx::Eps
            } else {
                Rx::Void
            }
        }
        Rx::Seq(items) => {
            let first = &items[0];
            let rest = seq(items[1..].to_vec());
            let head = seq(vec![deriv(first, sym), rest.clone()]);
            if nullable(first) {
                alt([head, deriv(&rest, sym)])
            } else {
                head
            }
        }
        Rx::Alt(set) => alt(set.iter().map(|x| deriv(x, sym))),
        Rx::Star(inner) => seq(vec![deriv(inner, sym), rx.clone()]),
    }
}

pub fn nonempty(rx: &Rx) -> bool {
    match rx {
        Rx::Void => false,
        Rx::Eps | Rx::Sym(_) | Rx::Star(_) => true,
        Rx::Seq(items) => items.iter().all(nonempty),
        Rx::Alt(set) => set.iter().any(nonempty),
    }
}

/// Some word of `L(rx)` contains `sym`.
pub fn can_contain(rx: &Rx, sym: &str) -> bool {
    match rx {
        Rx::Void | Rx::Eps => false,
        Rx::Sym(s) => s == sym,
        Rx::Seq(items) => items.iter().all(nonempty) && items.iter().any(|x| can_contain(x, sym)),
        Rx::Alt(set) => set.iter().any(|x| can_contain(x, sym)),
        Rx::Star(inner) => can_contain(inner, sym),
    }
}

pub fn matches<S: AsRef<str>>(rx: &Rx, word: &[S]) -> bool {
    let mut cur = rx.clone();
    for sym in word {
        cur = deriv(&cur, sym.as_ref());
        if cur == Rx::Void {
            return false;
        }
    }
    nullable(&cur)
}

/// Word-level order: true iff no word of `L(rx)` has a `b` strictly before
/// an `a`. Searches for a witness `... b ... a ...` with a completion, over
/// states (derivative, seen-a-`b`); derivatives are finite, so this halts.
pub fn ord(rx: &Rx, a: &str, b: &str, alphabet: &[String]) -> bool {
    let mut syms: Vec<String> = alphabet.to_vec();
    for extra in [a, b] {
        if !syms.iter().any(|s| s == extra) {
            syms.push(extra.to_string());
        }
    }
    let mut seen: HashSet<(Rx, bool)> = HashSet::new();
    let mut queue: VecDeque<(Rx, bool)> = VecDeque::new();
    let start = (rx.clone(), false);
    seen.insert(start.clone());
    queue.push_back(start);
    while let Some((cur, seen_b)) = queue.pop_front() {
        for sym in &syms {
            let d = deriv(&cur, sym);
            if d == Rx::Void {
                continue;
            }
            if seen_b && sym == a {
                // A valid word extends this prefix because `d` is nonempty.
                return false;
            }
            let next = (d, seen_b || sym == b);
            if seen.insert(next.clone()) {
                queue.push_back(next);
            }
        }
    }
    true
}

/// Earliest prefix length (0 = before any symbol) of `word` after which no
/// extension can contain any symbol of `set`; `None` if that never happens
/// before the word ends.
pub fn first_past_position(rx: &Rx, word: &[String], set: &BTreeSet<String>) -> Option<usize> {
    let mut cur = rx.clone();
    for i in 0..=word.len() {
        if set.iter().all(|s| !can_contain(&cur, s)) {
            return Some(i);
        }
        if i < word.len() {
            cur = deriv(&cur, &word[i]);
        }
    }
    None
}

/// Up to `cap` accepted words of length <= `max_len`, shortest first.
pub fn accepted_words(rx: &Rx, alphabet: &[String], max_len: usize, cap: usize) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    let mut queue: VecDeque<(Rx, Vec<String>)> = VecDeque::new();
    queue.push_back((rx.clone(), Vec::new()));
    let mut explored = 0usize;
    while let Some((cur, word)) = queue.pop_front() {
        explored += 1;
        if explored > 100_000 {
            break;
        }
        if nullable(&cur) {
            out.push(word.clone());
            if out.len() >= cap {
                break;
            }
        }
        if word.len() < max_len {
            for sym in alphabet {
                let d = deriv(&cur, sym);
                if d != Rx::Void {
                    let mut w = word.clone();
                    w.push(sym.clone());
                    queue.push_back((d, w));
                }
            }
        }
    }
    out
}

fn nfa_step(g: &Glushkov, states: &BTreeSet<usize>, sym: &str) -> BTreeSet<usize> {
    states
        .iter()
        .flat_map(|&q| g.targets(q, sym).iter().copied())
        .collect()
}

/// Full language-equivalence check between an expression and an automaton via
/// a memoized product walk over (derivative, reachable-state-set) pairs.
/// Panics with context on the first disagreement.
pub fn assert_same_language(re: &RegExpr, g: &Glushkov, foreign: &str) {
    let rx = from_regex(re);
    let mut syms: Vec<String> = g.alphabet().to_vec();
    syms.push(foreign.to_string());

    let mut start_states = BTreeSet::new();
    start_states.insert(0usize);
    let start = (rx, start_states);
    let mut seen: HashSet<(Rx, BTreeSet<usize>)> = HashSet::new();
    seen.insert(start.clone());
    let mut queue = VecDeque::from([start]);

    while let Some((cur, states)) = queue.pop_front() {
        let expr_accepts = nullable(&cur);
        let auto_accepts = states.iter().any(|&q| g.is_final(q));
        assert_eq!(
            expr_accepts, auto_accepts,
            "acceptance mismatch for {re} at derivative {cur:?} / states {states:?}"
        );
        for sym in &syms {
            let d = deriv(&cur, sym);
            let next = nfa_step(g, &states, sym);
            assert_eq!(
                d == Rx::Void,
                next.is_empty(),
                "emptiness mismatch for {re} on `{sym}` at {cur:?} / {states:?}"
            );
            if d == Rx::Void {
                continue;
            }
            let pair = (d, next);
            if seen.insert(pair.clone()) {
                queue.push_back(pair);
            }
        }
    }
}
