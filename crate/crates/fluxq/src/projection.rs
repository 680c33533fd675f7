//! Static buffer planning for event-handler plans.
//!
//! A handler body may dereference data that streamed by before the handler
//! fires, so the engine must buffer exactly those parts of the input. This
//! module computes, per variable, the set of paths whose targets are needed
//! later ([`buffer_paths`]), merges them into a prefix tree, marks the nodes
//! whose whole subtree must be stored (join operands and subtree outputs),
//! and prunes everything below a marked node ([`build_buffer_tree`]). The
//! resulting buffer trees are the runtime's storage schema: unmarked nodes
//! store only element boundaries, marked nodes store full subtrees.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::flux::{maximal_query_subexprs, Flux};
use crate::query::{free_vars, Cond, Query};

/// Why a path's target is buffered. Join operands and output subtrees need
/// the full content; structural entries only exist so loops can iterate and
/// need just the element boundaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum PathKind {
    Structural,
    OutputSubtree,
    JoinOperand,
}

/// A path rooted at a variable whose matching nodes must be buffered.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct BufferPath {
    pub var: String,
    /// Child steps from the variable's node; empty means the variable's own
    /// subtree.
    pub steps: Vec<String>,
    pub kind: PathKind,
}

impl BufferPath {
    pub fn new<S: Into<String>>(
        var: impl Into<String>,
        steps: impl IntoIterator<Item = S>,
        kind: PathKind,
    ) -> BufferPath {
        BufferPath {
            var: var.into(),
            steps: steps.into_iter().map(Into::into).collect(),
            kind,
        }
    }
}

impl fmt::Display for BufferPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "${}", self.var)?;
        for step in &self.steps {
            write!(f, "/{step}")?;
        }
        Ok(())
    }
}

/// The paths in `alpha` rooted at `r` whose targets must be buffered.
///
/// Defined inductively: literals contribute nothing; `{$r}` contributes the
/// empty path as an output subtree; a loop `for $x in $r/a return α`
/// contributes `r/a` (structural) when the body buffers nothing under `$x`,
/// and `r/a/w` for every buffered `$x/w` otherwise; a conditional
/// contributes its path-versus-path operands rooted at `r`. Comparisons
/// against constants and existence tests contribute nothing — they are
/// evaluated on the fly as flags.
pub fn buffer_paths(r: &str, alpha: &Query) -> BTreeSet<BufferPath> {
    match alpha {
        Query::Empty | Query::Str(_) => BTreeSet::new(),
        Query::VarOut(v) => {
            if v == r {
                [BufferPath::new(r, Vec::<String>::new(), PathKind::OutputSubtree)].into()
            } else {
                BTreeSet::new()
            }
        }
        Query::PathOut(vp) => {
            if vp.var == r {
                [BufferPath::new(r, vp.path.steps().to_vec(), PathKind::OutputSubtree)].into()
            } else {
                BTreeSet::new()
            }
        }
        Query::Seq(items) => items.iter().flat_map(|item| buffer_paths(r, item)).collect(),
        Query::If { cond, body } => {
            let mut out = buffer_paths(r, body);
            out.extend(join_operands(r, cond));
            out
        }
        Query::For { var, source, path, body } => {
            loop_paths(r, var, source, path.steps(), body, None)
        }
        Query::ForWhere { var, source, path, cond, body } => {
            loop_paths(r, var, source, path.steps(), body, Some(cond))
        }
    }
}

/// Loop contribution. `cond`, when present, counts as a guard wrapped
/// around the body (which is how normalization would rewrite it).
fn loop_paths(
    r: &str,
    var: &str,
    source: &str,
    steps: &[String],
    body: &Query,
    cond: Option<&Cond>,
) -> BTreeSet<BufferPath> {
    let inner = |v: &str| -> BTreeSet<BufferPath> {
        let mut out = buffer_paths(v, body);
        if let Some(c) = cond {
            out.extend(join_operands(v, c));
        }
        out
    };
    let mut out = inner(r);
    if source != r {
        return out;
    }
    let under_binder = inner(var);
    if under_binder.is_empty() {
        out.insert(BufferPath::new(r, steps.to_vec(), PathKind::Structural));
    } else {
        for sub in under_binder {
            let mut full = steps.to_vec();
            full.extend(sub.steps);
            out.insert(BufferPath::new(r, full, sub.kind));
        }
    }
    out
}

/// Operands of path-versus-path comparisons in `cond` that are rooted at
/// `r`, anywhere in the boolean structure.
fn join_operands(r: &str, cond: &Cond) -> BTreeSet<BufferPath> {
    let mut out = BTreeSet::new();
    collect_join_operands(r, cond, &mut out);
    out
}

fn collect_join_operands(r: &str, cond: &Cond, out: &mut BTreeSet<BufferPath>) {
    match cond {
        Cond::True | Cond::Exists(_) | Cond::CmpLit { .. } => {}
        Cond::And(a, b) | Cond::Or(a, b) => {
            collect_join_operands(r, a, out);
            collect_join_operands(r, b, out);
        }
        Cond::Not(a) => collect_join_operands(r, a, out),
        Cond::CmpPath { lhs, rhs, .. } => {
            for side in [lhs, rhs] {
                if side.var == r {
                    out.insert(BufferPath::new(
                        r,
                        side.path.steps().to_vec(),
                        PathKind::JoinOperand,
                    ));
                }
            }
        }
    }
}

/// The variables a plan buffers under: everything free in some maximal
/// query subexpression. A variable bound by an enclosing `on` handler
/// counts — it is free *in the subexpression* — because its buffer is what
/// the subexpression reads from.
pub fn buffered_vars(plan: &Flux) -> BTreeSet<String> {
    maximal_query_subexprs(plan)
        .into_iter()
        .flat_map(|(_, q)| free_vars(q))
        .collect()
}

/// `buffer_paths` unioned over every maximal query subexpression of a plan.
pub fn plan_buffer_paths(plan: &Flux, r: &str) -> BTreeSet<BufferPath> {
    maximal_query_subexprs(plan)
        .into_iter()
        .flat_map(|(_, q)| buffer_paths(r, q))
        .collect()
}

/// One node of a buffer tree; the tree root is the variable's own node.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BufferNode {
    /// Whole subtrees reaching this node are stored. Unmarked nodes store
    /// only the element's boundaries.
    pub marked: bool,
    pub children: BTreeMap<String, BufferNode>,
}

/// The storage schema for one variable's buffer: the merged prefixes of its
/// buffered paths, marked where full subtrees are kept, with everything
/// below a marked node pruned (a stored subtree subsumes its descendants).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BufferTree {
    pub var: String,
    pub root: BufferNode,
}

/// Merges `paths` into a prefix tree, marks nodes where a join-operand or
/// output-subtree path ends, and prunes below every marked node.
pub fn build_buffer_tree(r: &str, paths: &BTreeSet<BufferPath>) -> BufferTree {
    let mut root = BufferNode::default();
    for path in paths {
        debug_assert_eq!(path.var, r, "buffer paths must all share the tree's variable");
        let mut node = &mut root;
        for step in &path.steps {
            node = node.children.entry(step.clone()).or_default();
        }
        if matches!(path.kind, PathKind::JoinOperand | PathKind::OutputSubtree) {
            node.marked = true;
        }
    }
    prune(&mut root);
    BufferTree { var: r.to_string(), root }
}

fn prune(node: &mut BufferNode) {
    if node.marked {
        node.children.clear();
    } else {
        for child in node.children.values_mut() {
            prune(child);
        }
    }
}

/// The complete buffer plan: one tree per buffered variable that has a
/// nonempty path set, in variable order.
pub fn buffer_trees(plan: &Flux) -> Vec<BufferTree> {
    buffered_vars(plan)
        .iter()
        .filter_map(|var| {
            let paths = plan_buffer_paths(plan, var);
            if paths.is_empty() {
                None
            } else {
                Some(build_buffer_tree(var, &paths))
            }
        })
        .collect()
}

impl BufferTree {
    pub fn is_empty(&self) -> bool {
        !self.root.marked && self.root.children.is_empty()
    }
}

impl fmt::Display for BufferTree {
    /// Indented tree, one node per line, `•` on nodes that store full
    /// subtrees.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "${}", self.var)?;
        if self.root.marked {
            write!(f, " •")?;
        }
        fmt_children(&self.root, 1, f)
    }
}

fn fmt_children(node: &BufferNode, depth: usize, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    for (label, child) in &node.children {
        write!(f, "\n{:indent$}{label}", "", indent = depth * 2)?;
        if child.marked {
            write!(f, " •")?;
        }
        fmt_children(child, depth + 1, f)?;
    }
    Ok(())
}
