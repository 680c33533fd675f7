//! Schema layer: DTD parsing, position automata for content models, and the
//! order/past analyses derived from them.

pub mod dtd;
pub mod glushkov;
pub mod regex;
pub mod validator;

use std::collections::HashMap;

pub use dtd::{ContentModel, Dtd, DtdError};
pub use glushkov::Glushkov;
pub use regex::RegExpr;
pub use validator::{PastTable, ValidationStepError, ValidatorState};

/// What a query variable ranges over.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum NodeKind {
    /// The document node (`$ROOT`); its single child is the root element.
    Document,
    Element(String),
}

impl NodeKind {
    pub fn element(name: impl Into<String>) -> NodeKind {
        NodeKind::Element(name.into())
    }
}

impl std::fmt::Display for NodeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NodeKind::Document => write!(f, "(document)"),
            NodeKind::Element(name) => write!(f, "{name}"),
        }
    }
}

/// A parsed DTD together with one position automaton per declared element,
/// plus a synthetic automaton for the document node whose content model is
/// exactly the root element.
///
/// Automata are built without the one-unambiguity restriction: the order and
/// past analyses are reachability properties that hold for nondeterministic
/// position automata too. Input validation, however, needs deterministic
/// stepping; [`Schema::require_deterministic`] checks that up front.
#[derive(Debug)]
pub struct Schema {
    dtd: Dtd,
    automata: HashMap<String, Glushkov>,
    document: Glushkov,
}

impl Schema {
    pub fn new(dtd: Dtd) -> Schema {
        let automata = dtd
            .elements
            .iter()
            .map(|(name, model)| {
                let re = match model {
                    ContentModel::Text => &RegExpr::Epsilon,
                    ContentModel::Children(re) => re,
                };
                (name.clone(), Glushkov::build_relaxed(re))
            })
            .collect();
        let document = Glushkov::build_relaxed(&RegExpr::Atom(dtd.root().to_string()));
        Schema {
            dtd,
            automata,
            document,
        }
    }

    pub fn parse(text: &str) -> Result<Schema, DtdError> {
        Ok(Schema::new(dtd::parse_dtd(text)?))
    }

    pub fn dtd(&self) -> &Dtd {
        &self.dtd
    }

    pub fn root(&self) -> &str {
        self.dtd.root()
    }

    pub fn is_declared(&self, element: &str) -> bool {
        self.dtd.elements.contains_key(element)
    }

    pub fn is_text(&self, element: &str) -> bool {
        self.dtd
            .content_model(element)
            .is_some_and(ContentModel::is_text)
    }

    /// The content-model automaton for nodes of the given kind. `None` only
    /// for undeclared elements.
    pub fn automaton(&self, kind: &NodeKind) -> Option<&Glushkov> {
        match kind {
            NodeKind::Document => Some(&self.document),
            NodeKind::Element(name) => self.automata.get(name),
        }
    }

    /// The child symbols that may occur under a node of this kind.
    pub fn symb(&self, kind: &NodeKind) -> Option<Vec<String>> {
        self.automaton(kind)
            .map(|g| g.alphabet().to_vec())
    }

    /// Order between child symbols of `kind`: true iff in no valid child
    /// sequence does a `b` precede an `a`.
    pub fn ord(&self, kind: &NodeKind, a: &str, b: &str) -> Option<bool> {
        self.automaton(kind).map(|g| g.ord(a, b))
    }

    /// Errors with the names of all elements whose content models need
    /// lookahead to validate; empty result means stepwise validation works.
    pub fn require_deterministic(&self) -> Result<(), Vec<String>> {
        let mut bad: Vec<String> = self
            .dtd
            .elements
            .keys()
            .filter(|name| {
                self.automata
                    .get(*name)
                    .is_some_and(|g| !g.is_deterministic())
            })
            .cloned()
            .collect();
        bad.sort();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(bad)
        }
    }
}
