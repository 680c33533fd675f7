//! Position automata for content models, and the analyses derived from them:
//! which labels can still occur after reaching a state (`past`), and which
//! label pairs are globally ordered in every valid child sequence (`ord`).

use std::collections::{BTreeMap, BTreeSet, HashMap};

use thiserror::Error;

use super::regex::{MarkedRegExpr, RegExpr};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GlushkovError {
    /// Two distinct atom occurrences of the same symbol compete for the same
    /// transition, so a validator cannot pick a successor without lookahead.
    #[error("content model is not one-unambiguous on symbol `{symbol}`")]
    NotOneUnambiguous { symbol: String },
}

/// Position automaton of a content model.
///
/// State `0` is the initial state; states `1..=n` correspond one-to-one to
/// the atom occurrences of the expression in marking order. Every transition
/// into state `p` reads the symbol of occurrence `p`, which is what makes the
/// past/order analyses simple reachability questions.
#[derive(Debug, Clone)]
pub struct Glushkov {
    alphabet: Vec<String>,
    sym_ids: HashMap<String, usize>,
    /// Symbol id of state `i + 1`.
    state_syms: Vec<usize>,
    /// Per state: symbol id -> target states (sorted, usually a single one).
    delta: Vec<BTreeMap<usize, Vec<usize>>>,
    finals: Vec<bool>,
    deterministic: bool,
    /// `past[q][s]`: no path of length >= 1 from `q` reaches an `s`-state,
    /// i.e. once `q` is reached no later child can be labelled `s`.
    past: Vec<Vec<bool>>,
}

struct Facts {
    nullable: bool,
    first: Vec<u32>,
    last: Vec<u32>,
}

fn union(a: &[u32], b: &[u32]) -> Vec<u32> {
    let mut out: Vec<u32> = a.iter().chain(b.iter()).copied().collect();
    out.sort_unstable();
    out.dedup();
    out
}

fn facts(e: &MarkedRegExpr, follow: &mut Vec<BTreeSet<u32>>) -> Facts {
    match e {
        MarkedRegExpr::Epsilon => Facts {
            nullable: true,
            first: vec![],
            last: vec![],
        },
        MarkedRegExpr::Atom(_, i) => Facts {
            nullable: false,
            first: vec![*i],
            last: vec![*i],
        },
        MarkedRegExpr::Seq(items) => {
            let mut iter = items.iter();
            let mut acc = facts(iter.next().expect("Seq holds >= 2 items"), follow);
            for item in iter {
                let next = facts(item, follow);
                for &l in &acc.last {
                    follow[(l - 1) as usize].extend(next.first.iter().copied());
                }
                if acc.nullable {
                    acc.first = union(&acc.first, &next.first);
                }
                acc.last = if next.nullable {
                    union(&acc.last, &next.last)
                } else {
                    next.last.clone()
                };
                acc.nullable &= next.nullable;
            }
            acc
        }
        MarkedRegExpr::Alt(items) => {
            let mut acc = Facts {
                nullable: false,
                first: vec![],
                last: vec![],
            };
            for item in items {
                let next = facts(item, follow);
                acc.nullable |= next.nullable;
                acc.first = union(&acc.first, &next.first);
                acc.last = union(&acc.last, &next.last);
            }
            acc
        }
        MarkedRegExpr::Star(inner) | MarkedRegExpr::Plus(inner) => {
            let f = facts(inner, follow);
            for &l in &f.last {
                follow[(l - 1) as usize].extend(f.first.iter().copied());
            }
            Facts {
                nullable: matches!(e, MarkedRegExpr::Star(_)) || f.nullable,
                first: f.first,
                last: f.last,
            }
        }
        MarkedRegExpr::Opt(inner) => {
            let f = facts(inner, follow);
            Facts {
                nullable: true,
                first: f.first,
                last: f.last,
            }
        }
    }
}

impl Glushkov {
    /// Build the automaton, requiring a deterministic result (the normal case
    /// for DTD content models, which must be one-unambiguous).
    pub fn build(expr: &RegExpr) -> Result<Glushkov, GlushkovError> {
        let g = Self::build_relaxed(expr);
        if let Some(symbol) = g.first_conflict() {
            return Err(GlushkovError::NotOneUnambiguous { symbol });
        }
        Ok(g)
    }

    /// Build the automaton even if it is nondeterministic. The past and
    /// order analyses are reachability properties of the position graph and
    /// stay exact; only stepwise validation needs determinism.
    pub fn build_relaxed(expr: &RegExpr) -> Glushkov {
        let marked = expr.mark();
        let positions = marked.positions();
        let n = positions.len();

        let mut alphabet: Vec<String> = Vec::new();
        let mut sym_ids: HashMap<String, usize> = HashMap::new();
        let mut state_syms = Vec::with_capacity(n);
        for (sym, idx) in &positions {
            debug_assert_eq!(*idx as usize, state_syms.len() + 1);
            let id = *sym_ids.entry(sym.clone()).or_insert_with(|| {
                alphabet.push(sym.clone());
                alphabet.len() - 1
            });
            state_syms.push(id);
        }

        let mut follow: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); n];
        let f = facts(&marked, &mut follow);

        let mut delta: Vec<BTreeMap<usize, Vec<usize>>> = vec![BTreeMap::new(); n + 1];
        let add_edge = |delta: &mut Vec<BTreeMap<usize, Vec<usize>>>, from: usize, to: u32| {
            let to = to as usize;
            let sym = state_syms[to - 1];
            let targets = delta[from].entry(sym).or_default();
            if !targets.contains(&to) {
                targets.push(to);
                targets.sort_unstable();
            }
        };
        for &p in &f.first {
            add_edge(&mut delta, 0, p);
        }
        for (i, fl) in follow.iter().enumerate() {
            for &p in fl {
                add_edge(&mut delta, i + 1, p);
            }
        }

        let mut finals = vec![false; n + 1];
        finals[0] = f.nullable;
        for &l in &f.last {
            finals[l as usize] = true;
        }

        let deterministic = delta
            .iter()
            .all(|m| m.values().all(|targets| targets.len() == 1));

        let past = compute_past(n + 1, alphabet.len(), &state_syms, &delta);

        let g = Glushkov {
            alphabet,
            sym_ids,
            state_syms,
            delta,
            finals,
            deterministic,
            past,
        };
        debug_assert!(g.past_is_monotone());
        g
    }

    fn first_conflict(&self) -> Option<String> {
        for m in &self.delta {
            for (&sym, targets) in m {
                if targets.len() > 1 {
                    return Some(self.alphabet[sym].clone());
                }
            }
        }
        None
    }

    pub fn state_count(&self) -> usize {
        self.state_syms.len() + 1
    }

    pub fn alphabet(&self) -> &[String] {
        &self.alphabet
    }

    pub fn sym_id(&self, symbol: &str) -> Option<usize> {
        self.sym_ids.get(symbol).copied()
    }

    /// Symbol read by every transition into `state`; `None` for the initial state.
    pub fn state_symbol(&self, state: usize) -> Option<&str> {
        if state == 0 {
            None
        } else {
            Some(&self.alphabet[self.state_syms[state - 1]])
        }
    }

    pub fn is_final(&self, state: usize) -> bool {
        self.finals[state]
    }

    pub fn is_deterministic(&self) -> bool {
        self.deterministic
    }

    pub fn targets(&self, state: usize, symbol: &str) -> &[usize] {
        self.sym_id(symbol)
            .and_then(|id| self.delta[state].get(&id))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Unique successor on `symbol`, for deterministic automata.
    pub fn step(&self, state: usize, symbol: &str) -> Option<usize> {
        match self.targets(state, symbol) {
            [t] => Some(*t),
            _ => None,
        }
    }

    /// No later child can be labelled `symbol` once `state` has been reached.
    /// Symbols outside the alphabet can trivially never occur.
    pub fn past(&self, state: usize, symbol: &str) -> bool {
        match self.sym_id(symbol) {
            Some(id) => self.past[state][id],
            None => true,
        }
    }

    /// All (state, symbol) pairs over the alphabet where [`Glushkov::past`] holds.
    pub fn past_relation(&self) -> BTreeSet<(usize, String)> {
        let mut out = BTreeSet::new();
        for state in 0..self.state_count() {
            for (id, sym) in self.alphabet.iter().enumerate() {
                if self.past[state][id] {
                    out.insert((state, sym.clone()));
                }
            }
        }
        out
    }

    /// `ord(a, b)`: in every valid child sequence, all `a`-children precede
    /// all `b`-children (equivalently: no sequence has a `b` before an `a`).
    /// Vacuously true when the two labels never co-occur, and for labels
    /// outside the alphabet.
    pub fn ord(&self, a: &str, b: &str) -> bool {
        let (Some(a_id), Some(_)) = (self.sym_id(a), self.sym_id(b)) else {
            return true;
        };
        // Every b-state must have `a` in its past: after reading any b, no
        // further a can occur, hence no b strictly precedes an a.
        (1..self.state_count())
            .filter(|&q| self.state_symbol(q) == Some(b))
            .all(|q| self.past[q][a_id])
    }

    /// All ordered pairs over the alphabet, including vacuous ones.
    pub fn ord_relation(&self) -> BTreeSet<(String, String)> {
        let mut out = BTreeSet::new();
        for a in &self.alphabet {
            for b in &self.alphabet {
                if self.ord(a, b) {
                    out.insert((a.clone(), b.clone()));
                }
            }
        }
        out
    }

    /// Per-state table: true where every symbol of `set` is past. Symbols
    /// outside the alphabet are vacuously past everywhere.
    pub fn past_table(&self, set: &BTreeSet<String>) -> Vec<bool> {
        (0..self.state_count())
            .map(|q| set.iter().all(|s| self.past(q, s)))
            .collect()
    }

    /// NFA-style acceptance; used by analyses and tests, not the hot path.
    pub fn accepts<S: AsRef<str>>(&self, word: &[S]) -> bool {
        let mut states: BTreeSet<usize> = BTreeSet::new();
        states.insert(0);
        for sym in word {
            let Some(id) = self.sym_id(sym.as_ref()) else {
                return false;
            };
            let mut next = BTreeSet::new();
            for &q in &states {
                if let Some(targets) = self.delta[q].get(&id) {
                    next.extend(targets.iter().copied());
                }
            }
            if next.is_empty() {
                return false;
            }
            states = next;
        }
        states.iter().any(|&q| self.finals[q])
    }

    /// Once a symbol is past it stays past along every run. The stepwise
    /// punctuation logic relies on this.
    fn past_is_monotone(&self) -> bool {
        for q in 0..self.state_count() {
            for targets in self.delta[q].values() {
                for &q2 in targets {
                    for s in 0..self.alphabet.len() {
                        if self.past[q][s] && !self.past[q2][s] {
                            return false;
                        }
                    }
                }
            }
        }
        true
    }
}

fn compute_past(
    states: usize,
    syms: usize,
    state_syms: &[usize],
    delta: &[BTreeMap<usize, Vec<usize>>],
) -> Vec<Vec<bool>> {
    // Reflexive-transitive reachability, then shift by one step: a symbol is
    // in the strict future of q iff some direct successor can (reflexively)
    // reach a state carrying it.
    let succ: Vec<Vec<usize>> = delta
        .iter()
        .map(|m| {
            let mut v: Vec<usize> = m.values().flatten().copied().collect();
            v.sort_unstable();
            v.dedup();
            v
        })
        .collect();

    let mut reach: Vec<Vec<bool>> = Vec::with_capacity(states);
    for q in 0..states {
        let mut seen = vec![false; states];
        let mut stack = vec![q];
        seen[q] = true;
        while let Some(x) = stack.pop() {
            for &y in &succ[x] {
                if !seen[y] {
                    seen[y] = true;
                    stack.push(y);
                }
            }
        }
        reach.push(seen);
    }

    let mut past = vec![vec![true; syms]; states];
    for q in 0..states {
        for &s in &succ[q] {
            for p in 0..states {
                if reach[s][p] && p > 0 {
                    past[q][state_syms[p - 1]] = false;
                }
            }
        }
    }
    past
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::regex::RegExpr;

    fn seq_ab() -> RegExpr {
        RegExpr::seq(vec![RegExpr::atom("a"), RegExpr::atom("b")])
    }

    /// `(a*,b,c*,d | e*),a*` — deliberately not one-unambiguous (an initial
    /// `a` could be either occurrence), but the order analysis is exact on
    /// the position graph regardless.
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
    fn seq_automaton_shape() {
        let g = Glushkov::build(&seq_ab()).unwrap();
        assert_eq!(g.state_count(), 3);
        assert!(g.is_deterministic());
        assert_eq!(g.step(0, "a"), Some(1));
        assert_eq!(g.step(1, "b"), Some(2));
        assert_eq!(g.step(0, "b"), None);
        assert!(!g.is_final(0));
        assert!(!g.is_final(1));
        assert!(g.is_final(2));
        assert!(g.accepts(&["a", "b"]));
        assert!(!g.accepts(&["a"]));
        assert!(!g.accepts(&["a", "b", "a"]));
    }

    #[test]
    fn past_is_about_the_strict_future() {
        let g = Glushkov::build(&seq_ab()).unwrap();
        // After reading the `a`, no further `a` can come, even though we sit
        // on the a-state itself.
        assert!(g.past(1, "a"));
        assert!(!g.past(1, "b"));
        assert!(g.past(2, "a"));
        assert!(g.past(2, "b"));
        assert!(!g.past(0, "a"));
        // Symbols the model never mentions are past everywhere.
        assert!(g.past(0, "zzz"));
    }

    #[test]
    fn past_on_a_loop_never_fires() {
        let g = Glushkov::build(&RegExpr::star(RegExpr::atom("a"))).unwrap();
        assert!(!g.past(0, "a"));
        assert!(!g.past(1, "a"));
    }

    #[test]
    fn ambiguous_model_is_rejected_strictly() {
        let e = RegExpr::alt(vec![RegExpr::atom("a"), RegExpr::atom("a")]);
        assert_eq!(
            Glushkov::build(&e).err(),
            Some(GlushkovError::NotOneUnambiguous {
                symbol: "a".into()
            })
        );
        let g = Glushkov::build_relaxed(&e);
        assert!(!g.is_deterministic());
        assert!(g.accepts(&["a"]));
    }

    #[test]
    fn mixed_example_order_relation() {
        let g = Glushkov::build_relaxed(&mixed());
        assert!(!g.is_deterministic());

        // The four pairs called out for this model...
        assert!(g.ord("b", "c"));
        assert!(g.ord("c", "d"));
        assert!(g.ord("c", "e"));
        assert!(g.ord("b", "d"));
        // ...and the counterexample: "bca" has a c before the trailing a.
        assert!(!g.ord("a", "c"));

        // Full relation, frozen from the word-level definition: pairs (x,y)
        // such that no valid sequence has a y strictly before an x.
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
        assert_eq!(g.ord_relation(), expected);
    }

    #[test]
    fn past_tables_handle_foreign_symbols() {
        let g = Glushkov::build(&seq_ab()).unwrap();
        let table = g.past_table(&["a".to_string(), "zzz".to_string()].into_iter().collect());
        assert_eq!(table, vec![false, true, true]);
        let empty = g.past_table(&BTreeSet::new());
        assert_eq!(empty, vec![true, true, true]);
    }

    #[test]
    fn state_count_matches_atom_count() {
        let e = mixed();
        let g = Glushkov::build_relaxed(&e);
        assert_eq!(g.state_count(), e.atom_count() + 1);
    }
}
