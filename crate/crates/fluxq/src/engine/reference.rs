//! A direct, tree-building interpreter. It materializes the whole document
//! and evaluates queries by structural recursion; event-handler plans are
//! run by scanning each scope's child sequence position by position (the
//! positions before the first child and after the last one included). The
//! streaming engine is differentially tested against this module, so it is
//! written for obviousness, not speed.

use std::collections::HashMap;

use crate::engine::compare;
use crate::engine::token::{escape_text, XmlEvent};
use crate::flux::{Flux, Handler};
use crate::query::{Cond, FixedPath, Query};
use crate::schema::{NodeKind, Schema};

/// One node of the materialized document. The document itself is a node
/// with an empty label whose content holds the root element.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeNode {
    pub label: String,
    pub content: Vec<TreeItem>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TreeItem {
    Elem(TreeNode),
    Text(String),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("malformed event stream: {0}")]
pub struct TreeError(pub String);

/// Builds the document node from a balanced event stream.
pub fn parse_tree(events: &[XmlEvent]) -> Result<TreeNode, TreeError> {
    let mut stack = vec![TreeNode {
        label: String::new(),
        content: Vec::new(),
    }];
    for ev in events {
        match ev {
            XmlEvent::Start(name) => stack.push(TreeNode {
                label: name.clone(),
                content: Vec::new(),
            }),
            XmlEvent::End(name) => {
                let node = stack.pop().unwrap();
                if node.label.is_empty() {
                    return Err(TreeError(format!("unmatched end tag </{name}>")));
                }
                if node.label != *name {
                    return Err(TreeError(format!(
                        "end tag </{}> closes <{}>",
                        name, node.label
                    )));
                }
                stack.last_mut().unwrap().content.push(TreeItem::Elem(node));
            }
            XmlEvent::Text(s) => {
                let top = stack.last_mut().unwrap();
                if top.label.is_empty() {
                    return Err(TreeError("character data outside the root".into()));
                }
                top.content.push(TreeItem::Text(s.clone()));
            }
        }
    }
    if stack.len() != 1 {
        return Err(TreeError(format!(
            "input ended inside <{}>",
            stack.last().unwrap().label
        )));
    }
    Ok(stack.pop().unwrap())
}

impl TreeNode {
    pub fn is_document(&self) -> bool {
        self.label.is_empty()
    }

    pub fn kind(&self) -> NodeKind {
        if self.is_document() {
            NodeKind::Document
        } else {
            NodeKind::Element(self.label.clone())
        }
    }

    /// Element children in order (text runs are not children).
    pub fn children(&self) -> impl Iterator<Item = &TreeNode> {
        self.content.iter().filter_map(|item| match item {
            TreeItem::Elem(n) => Some(n),
            TreeItem::Text(_) => None,
        })
    }

    /// All nodes matching a downward path, in document order.
    pub fn resolve<'t>(&'t self, path: &FixedPath) -> Vec<&'t TreeNode> {
        let mut frontier = vec![self];
        for step in path.steps() {
            let mut next = Vec::new();
            for node in frontier {
                next.extend(node.children().filter(|c| c.label == *step));
            }
            frontier = next;
        }
        frontier
    }

    /// The node's value: the concatenation of every text run in its
    /// subtree, in document order.
    pub fn text_value(&self) -> String {
        let mut out = String::new();
        self.collect_text(&mut out);
        out
    }

    fn collect_text(&self, out: &mut String) {
        for item in &self.content {
            match item {
                TreeItem::Text(s) => out.push_str(s),
                TreeItem::Elem(n) => n.collect_text(out),
            }
        }
    }

    pub fn serialize_into(&self, out: &mut String) {
        if !self.is_document() {
            out.push('<');
            out.push_str(&self.label);
            out.push('>');
        }
        for item in &self.content {
            match item {
                TreeItem::Text(s) => escape_text(s, out),
                TreeItem::Elem(n) => n.serialize_into(out),
            }
        }
        if !self.is_document() {
            out.push_str("</");
            out.push_str(&self.label);
            out.push('>');
        }
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        self.serialize_into(&mut out);
        out
    }
}

pub type Env<'t> = HashMap<String, &'t TreeNode>;

/// Evaluates a query against materialized bindings.
pub fn eval_query(q: &Query, env: &Env<'_>) -> String {
    let mut out = String::new();
    eval_query_into(q, env, &mut out);
    out
}

fn eval_query_into(q: &Query, env: &Env<'_>, out: &mut String) {
    match q {
        Query::Empty => {}
        Query::Str(s) => out.push_str(s),
        Query::Seq(items) => {
            for item in items {
                eval_query_into(item, env, out);
            }
        }
        Query::For {
            var,
            source,
            path,
            body,
        } => {
            let src = binding(env, source);
            for node in src.resolve(path) {
                let mut inner = env.clone();
                inner.insert(var.clone(), node);
                eval_query_into(body, &inner, out);
            }
        }
        Query::ForWhere {
            var,
            source,
            path,
            cond,
            body,
        } => {
            let src = binding(env, source);
            for node in src.resolve(path) {
                let mut inner = env.clone();
                inner.insert(var.clone(), node);
                if eval_cond(cond, &inner) {
                    eval_query_into(body, &inner, out);
                }
            }
        }
        Query::PathOut(vp) => {
            for node in binding(env, &vp.var).resolve(&vp.path) {
                node.serialize_into(out);
            }
        }
        Query::VarOut(var) => binding(env, var).serialize_into(out),
        Query::If { cond, body } => {
            if eval_cond(cond, env) {
                eval_query_into(body, env, out);
            }
        }
    }
}

fn binding<'t>(env: &Env<'t>, var: &str) -> &'t TreeNode {
    env.get(var)
        .unwrap_or_else(|| panic!("unbound variable ${var}"))
}

pub fn eval_cond(cond: &Cond, env: &Env<'_>) -> bool {
    match cond {
        Cond::True => true,
        Cond::And(a, b) => eval_cond(a, env) && eval_cond(b, env),
        Cond::Or(a, b) => eval_cond(a, env) || eval_cond(b, env),
        Cond::Not(a) => !eval_cond(a, env),
        Cond::Exists(vp) => !binding(env, &vp.var).resolve(&vp.path).is_empty(),
        Cond::CmpLit { lhs, op, rhs } => binding(env, &lhs.var)
            .resolve(&lhs.path)
            .iter()
            .any(|n| compare(&n.text_value(), *op, rhs)),
        Cond::CmpPath { lhs, op, rhs } => {
            let left = binding(env, &lhs.var).resolve(&lhs.path);
            let right = binding(env, &rhs.var).resolve(&rhs.path);
            left.iter().any(|a| {
                let av = a.text_value();
                right.iter().any(|b| compare(&av, *op, &b.text_value()))
            })
        }
    }
}

/// Runs an event-handler plan over a materialized document. Each
/// `process-stream` block scans its scope's children position by position:
/// position 0 comes before the first child, positions 1..=n carry the
/// children, and position n+1 follows the last one. At every position the
/// handler list is walked in order; an `on-first` handler fires at the
/// first position where its symbol set is past (position n+1 at the
/// latest), an `on` handler fires at every position whose child carries its
/// symbol.
pub fn eval_flux(schema: &Schema, flux: &Flux, env: &Env<'_>) -> String {
    let mut out = String::new();
    eval_flux_into(schema, flux, env, &mut out);
    out
}

fn eval_flux_into(schema: &Schema, flux: &Flux, env: &Env<'_>, out: &mut String) {
    match flux {
        Flux::Simple(q) => eval_query_into(q, env, out),
        Flux::Ps {
            prefix,
            var,
            handlers,
            suffix,
        } => {
            out.push_str(prefix);
            let scope = binding(env, var);
            let children: Vec<&TreeNode> = scope.children().collect();
            let n = children.len();
            let fire_at = first_past_positions(schema, &scope.kind(), handlers, &children);
            for i in 0..=n + 1 {
                for (h, handler) in handlers.iter().enumerate() {
                    match handler {
                        Handler::OnFirst { body, .. } => {
                            if fire_at[h] == Some(i) {
                                eval_query_into(body, env, out);
                            }
                        }
                        Handler::On { sym, var, body } => {
                            if (1..=n).contains(&i) && children[i - 1].label == *sym {
                                let mut inner = env.clone();
                                inner.insert(var.clone(), children[i - 1]);
                                eval_flux_into(schema, body, &inner, out);
                            }
                        }
                    }
                }
            }
            out.push_str(suffix);
        }
    }
}

/// For each handler, the position at which it fires (`None` for `on`
/// handlers, which fire per matching child instead). Scopes whose kind the
/// schema does not describe degrade to end-of-children firing.
fn first_past_positions(
    schema: &Schema,
    kind: &NodeKind,
    handlers: &[Handler],
    children: &[&TreeNode],
) -> Vec<Option<usize>> {
    let n = children.len();
    let automaton = schema.automaton(kind);
    let states: Option<Vec<usize>> = automaton.and_then(|g| {
        let mut states = vec![0usize];
        for child in children {
            states.push(g.step(*states.last().unwrap(), &child.label)?);
        }
        Some(states)
    });
    handlers
        .iter()
        .map(|handler| match handler {
            Handler::On { .. } => None,
            Handler::OnFirst { past, .. } => {
                let fallback = Some(n + 1);
                let (Some(g), Some(states)) = (automaton, states.as_ref()) else {
                    return fallback;
                };
                let set = past.resolve(&g.alphabet().iter().cloned().collect());
                let table = g.past_table(&set);
                match (0..=n).find(|&i| table[states[i]]) {
                    Some(i) => Some(i),
                    None => fallback,
                }
            }
        })
        .collect()
}
