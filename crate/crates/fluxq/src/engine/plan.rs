//! Compilation of an event-handler plan into an executable form: flat scope
//! specs, first-past registrations for the punctuator, per-scope storage
//! schemas, and pre-assigned slots for the condition atoms that are
//! evaluated on the fly while data streams by.
//!
//! Building a plan also proves it *executable in one forward pass*: beyond
//! the static safety conditions, every `on` handler must only read data
//! that the schema guarantees has fully streamed before any child with the
//! handler's symbol starts (its dependencies must be ordered strictly
//! before the symbol, the symbol itself excluded). Plans that fail are
//! rejected with [`PlanError::NotStreamable`] rather than executed
//! incorrectly.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::rc::Rc;

use thiserror::Error;

use crate::engine::punctuate::Registration;
use crate::flux::{maximal_query_subexprs, Flux, Handler, PastSpec};
use crate::projection::{buffer_trees, BufferNode, BufferTree};
use crate::query::{dependencies, Cond, Query, RelOp};
use crate::schema::{NodeKind, Schema};

#[derive(Debug, Clone)]
pub struct ExecutionPlan {
    /// Scope 0 is the document scope; children follow in pre-order.
    pub scopes: Vec<ScopeSpec>,
    /// Punctuator registrations, deduplicated by (kind, symbol set).
    pub regs: Vec<Registration>,
}

#[derive(Debug, Clone)]
pub struct ScopeSpec {
    pub var: String,
    pub kind: NodeKind,
    pub prefix: String,
    pub suffix: String,
    pub handlers: Vec<HandlerSpec>,
    /// Storage schema rooted at the scope's own node (node 0).
    pub tree: PlanTree,
    /// Indices of `on` handlers per child symbol, in handler order.
    pub by_symbol: BTreeMap<String, Vec<usize>>,
    /// Whether running the scope allocates buffer storage at all.
    pub has_buffer: bool,
    /// The enclosing scope; `None` for the document scope. Following the
    /// chain upward yields every variable visible inside this scope.
    pub parent: Option<usize>,
}

#[derive(Debug, Clone)]
pub enum HandlerSpec {
    OnFirst { reg: usize, body: Query },
    OnScope { sym: String, scope: usize },
    OnSimple { sym: String, var: String, simple: SimpleSpec },
}

/// A simple handler body split at its subtree output: `pre` runs when the
/// child starts, the guarded copy streams the child through, `post` runs
/// when it ends (its guards may test the child's own content, collected
/// into `atoms` while it streams).
#[derive(Debug, Clone, Default)]
pub struct SimpleSpec {
    pub pre: Vec<GuardedItem>,
    pub copy: Option<CopyOut>,
    pub post: Vec<GuardedItem>,
    pub atoms: Vec<AtomSpec>,
    pub trie: FlagTrie,
    /// Paths compared against another variable's data: their target values
    /// are collected per child instance for the comparison at the end event.
    pub value_paths: Vec<Vec<String>>,
    pub value_trie: FlagTrie,
}

#[derive(Debug, Clone)]
pub struct CopyOut {
    pub guard: Option<Rc<Cond>>,
}

#[derive(Debug, Clone)]
pub struct GuardedItem {
    pub guard: Option<Rc<Cond>>,
    pub text: String,
}

/// The storage schema for one scope: an arena of nodes, node 0 standing for
/// the scope's own element. Marked nodes store whole subtrees, unmarked
/// nodes only element boundaries. Each node carries the condition atoms
/// whose flags are evaluated per instance of that node.
#[derive(Debug, Clone)]
pub struct PlanTree {
    pub nodes: Vec<PlanTreeNode>,
}

#[derive(Debug, Clone, Default)]
pub struct PlanTreeNode {
    pub label: String,
    pub marked: bool,
    pub children: BTreeMap<String, usize>,
    pub atoms: Vec<AtomSpec>,
    pub trie: FlagTrie,
}

/// A condition atom evaluated on the fly: a downward path from its owner
/// node plus a test on the targets. The flag is the existential disjunction
/// over every matching target within one owner instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AtomSpec {
    pub path: Vec<String>,
    pub test: AtomTest,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AtomTest {
    Exists,
    Cmp(RelOp, String),
}

/// Atom paths compiled for a single owner: walked in lock-step with the
/// element stack; `ending` lists the atom slots whose path ends at a node.
#[derive(Debug, Clone, Default)]
pub struct FlagTrie {
    pub children: BTreeMap<String, FlagTrie>,
    pub ending: Vec<usize>,
}

impl FlagTrie {
    fn insert(&mut self, path: &[String], slot: usize) {
        let mut node = self;
        for step in path {
            node = node.children.entry(step.clone()).or_default();
        }
        node.ending.push(slot);
    }

    pub fn is_empty(&self) -> bool {
        self.children.is_empty() && self.ending.is_empty()
    }
}

impl PlanTree {
    fn trivial() -> PlanTree {
        PlanTree {
            nodes: vec![PlanTreeNode::default()],
        }
    }

    fn from_buffer_tree(tree: &BufferTree) -> PlanTree {
        fn add(nodes: &mut Vec<PlanTreeNode>, label: &str, src: &BufferNode) -> usize {
            let id = nodes.len();
            nodes.push(PlanTreeNode {
                label: label.to_string(),
                marked: src.marked,
                ..PlanTreeNode::default()
            });
            for (child_label, child) in &src.children {
                let cid = add(nodes, child_label, child);
                nodes[id].children.insert(child_label.clone(), cid);
            }
            id
        }
        let mut nodes = Vec::new();
        add(&mut nodes, "", &tree.root);
        PlanTree { nodes }
    }

    pub fn root(&self) -> &PlanTreeNode {
        &self.nodes[0]
    }

    fn stores_anything(&self) -> bool {
        self.nodes[0].marked || !self.nodes[0].children.is_empty()
    }
}

impl PlanTreeNode {
    /// Slot of an atom already registered on this node.
    pub fn atom_slot(&self, path: &[String], test: &AtomTest) -> Option<usize> {
        self.atoms
            .iter()
            .position(|a| a.path == path && a.test == *test)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlanError {
    #[error("plan cannot stream: {detail}")]
    NotStreamable { detail: String },
    #[error("malformed plan: {detail}")]
    Malformed { detail: String },
    #[error("internal planning error: {detail}")]
    Internal { detail: String },
}

fn not_streamable(detail: impl Into<String>) -> PlanError {
    PlanError::NotStreamable {
        detail: detail.into(),
    }
}

fn malformed(detail: impl Into<String>) -> PlanError {
    PlanError::Malformed {
        detail: detail.into(),
    }
}

fn internal(detail: impl Into<String>) -> PlanError {
    PlanError::Internal {
        detail: detail.into(),
    }
}

pub fn build_plan(schema: &Schema, flux: &Flux) -> Result<ExecutionPlan, PlanError> {
    // A bare query runs as a document-scope plan waiting for the whole root.
    let desugared;
    let ps = match flux {
        Flux::Simple(q) => {
            desugared = Flux::Ps {
                prefix: String::new(),
                var: "ROOT".into(),
                handlers: vec![Handler::OnFirst {
                    past: PastSpec::All,
                    body: q.clone(),
                }],
                suffix: String::new(),
            };
            &desugared
        }
        ps => ps,
    };
    let Flux::Ps {
        prefix,
        var,
        handlers,
        suffix,
    } = ps
    else {
        unreachable!()
    };
    if var != "ROOT" {
        return Err(malformed(format!(
            "the outermost stream block must process $ROOT, not ${var}"
        )));
    }
    let mut b = Builder {
        schema,
        scopes: Vec::new(),
        regs: Vec::new(),
    };
    b.build_scope(var, NodeKind::Document, prefix, handlers, suffix, None)?;
    b.attach_trees(ps);
    let mut plan = ExecutionPlan {
        scopes: b.scopes,
        regs: b.regs,
    };
    assign_atoms(&mut plan, ps)?;
    Ok(plan)
}

struct Builder<'s> {
    schema: &'s Schema,
    scopes: Vec<ScopeSpec>,
    regs: Vec<Registration>,
}

impl Builder<'_> {
    fn build_scope(
        &mut self,
        var: &str,
        kind: NodeKind,
        prefix: &str,
        handlers: &[Handler],
        suffix: &str,
        parent: Option<usize>,
    ) -> Result<usize, PlanError> {
        let sid = self.scopes.len();
        self.scopes.push(ScopeSpec {
            var: var.to_string(),
            kind: kind.clone(),
            prefix: prefix.to_string(),
            suffix: suffix.to_string(),
            handlers: Vec::new(),
            tree: PlanTree::trivial(),
            by_symbol: BTreeMap::new(),
            has_buffer: false,
            parent,
        });
        let symbols: BTreeSet<String> = self
            .schema
            .symb(&kind)
            .unwrap_or_default()
            .into_iter()
            .collect();
        let declared = self.schema.automaton(&kind).is_some();

        let mut specs = Vec::with_capacity(handlers.len());
        let mut by_symbol: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, handler) in handlers.iter().enumerate() {
            match handler {
                Handler::OnFirst { past, body } => {
                    let resolved = past.resolve(&symbols);
                    if declared {
                        self.check_on_first(var, &kind, &symbols, &resolved, body)?;
                    }
                    let reg = self.intern_reg(var, &kind, resolved);
                    specs.push(HandlerSpec::OnFirst {
                        reg,
                        body: body.clone(),
                    });
                }
                Handler::On { sym, var: x, body } => {
                    for (_, alpha) in maximal_query_subexprs(body) {
                        for b in dependencies(var, alpha) {
                            let ordered = self.schema.ord(&kind, &b, sym);
                            if b == *sym || ordered != Some(true) {
                                return Err(not_streamable(format!(
                                    "a handler on `{sym}` reads `{b}` children of ${var}, \
                                     which are not guaranteed complete when it runs"
                                )));
                            }
                        }
                    }
                    by_symbol.entry(sym.clone()).or_default().push(i);
                    match &**body {
                        Flux::Simple(q) => {
                            let simple = split_simple(q, x)?;
                            specs.push(HandlerSpec::OnSimple {
                                sym: sym.clone(),
                                var: x.clone(),
                                simple,
                            });
                        }
                        Flux::Ps {
                            prefix,
                            var: pv,
                            handlers,
                            suffix,
                        } => {
                            if pv != x {
                                return Err(malformed(format!(
                                    "stream block over ${pv} does not process its \
                                     handler's binding ${x}"
                                )));
                            }
                            let scope = self.build_scope(
                                x,
                                NodeKind::element(sym),
                                prefix,
                                handlers,
                                suffix,
                                Some(sid),
                            )?;
                            specs.push(HandlerSpec::OnScope {
                                sym: sym.clone(),
                                scope,
                            });
                        }
                    }
                }
            }
        }
        self.scopes[sid].handlers = specs;
        self.scopes[sid].by_symbol = by_symbol;
        Ok(sid)
    }

    /// An `on-first` body may only read data that is past once its set is:
    /// every dependency must be covered, and a subtree output of the scope
    /// variable needs every child symbol covered (the instance's capture is
    /// closed off at fire time).
    fn check_on_first(
        &self,
        var: &str,
        kind: &NodeKind,
        symbols: &BTreeSet<String>,
        resolved: &BTreeSet<String>,
        body: &Query,
    ) -> Result<(), PlanError> {
        let covers = |b: &str| {
            resolved.contains(b)
                || resolved
                    .iter()
                    .any(|a| self.schema.ord(kind, b, a) == Some(true))
        };
        for b in dependencies(var, body) {
            if !covers(&b) {
                return Err(not_streamable(format!(
                    "an on-first handler reads `{b}` children of ${var} before \
                     they are guaranteed complete"
                )));
            }
        }
        for z in free_output_vars(body) {
            if z != var {
                return Err(not_streamable(format!(
                    "the subtree of ${z} is output inside a handler on ${var}"
                )));
            }
            if let Some(b) = symbols.iter().find(|b| !covers(b)) {
                return Err(not_streamable(format!(
                    "the subtree of ${var} is output while `{b}` children may \
                     still arrive"
                )));
            }
        }
        Ok(())
    }

    fn intern_reg(&mut self, var: &str, kind: &NodeKind, symbols: BTreeSet<String>) -> usize {
        if let Some(i) = self
            .regs
            .iter()
            .position(|r| r.kind == *kind && r.symbols == symbols)
        {
            return i;
        }
        self.regs.push(Registration {
            var: var.to_string(),
            kind: kind.clone(),
            symbols,
        });
        self.regs.len() - 1
    }

    fn attach_trees(&mut self, ps: &Flux) {
        let trees: HashMap<String, BufferTree> = buffer_trees(ps)
            .into_iter()
            .map(|t| (t.var.clone(), t))
            .collect();
        for scope in &mut self.scopes {
            if let Some(tree) = trees.get(&scope.var) {
                scope.tree = PlanTree::from_buffer_tree(tree);
                scope.has_buffer = scope.tree.stores_anything();
            }
        }
    }
}

/// Splits a simple handler body into pre-items, the optional guarded copy
/// of the handler variable, and post-items.
fn split_simple(q: &Query, hvar: &str) -> Result<SimpleSpec, PlanError> {
    let items: Vec<&Query> = match q {
        Query::Empty => Vec::new(),
        Query::Seq(items) => items.iter().collect(),
        single => vec![single],
    };
    let mut spec = SimpleSpec::default();
    for item in items {
        let (guard, inner) = match item {
            Query::If { cond, body } => (Some(cond.clone()), &**body),
            other => (None, other),
        };
        match inner {
            Query::Str(s) => {
                let item = GuardedItem {
                    guard,
                    text: s.clone(),
                };
                if spec.copy.is_none() {
                    spec.pre.push(item);
                } else {
                    spec.post.push(item);
                }
            }
            Query::VarOut(u) => {
                if u != hvar {
                    return Err(malformed(format!(
                        "a simple handler body for ${hvar} outputs ${u}"
                    )));
                }
                if spec.copy.is_some() {
                    return Err(malformed(format!(
                        "a simple handler body outputs ${hvar} twice"
                    )));
                }
                spec.copy = Some(CopyOut { guard });
            }
            other => {
                return Err(malformed(format!(
                    "handler body is not a simple expression: {other}"
                )));
            }
        }
    }
    Ok(spec)
}

/// Free `{$z}`/`{$z/π}` roots of a query.
fn free_output_vars(q: &Query) -> BTreeSet<String> {
    fn walk(q: &Query, bound: &mut Vec<String>, out: &mut BTreeSet<String>) {
        match q {
            Query::Empty | Query::Str(_) => {}
            Query::Seq(items) => items.iter().for_each(|i| walk(i, bound, out)),
            Query::For { var, body, .. } | Query::ForWhere { var, body, .. } => {
                bound.push(var.clone());
                walk(body, bound, out);
                bound.pop();
            }
            Query::If { body, .. } => walk(body, bound, out),
            Query::PathOut(vp) => {
                if !bound.contains(&vp.var) {
                    out.insert(vp.var.clone());
                }
            }
            Query::VarOut(v) => {
                if !bound.contains(v) {
                    out.insert(v.clone());
                }
            }
        }
    }
    let mut out = BTreeSet::new();
    walk(q, &mut Vec::new(), &mut out);
    out
}

/// Where a variable's data lives at handler-fire time.
#[derive(Clone)]
enum SymPos {
    /// A stream variable's own scope (storage node 0).
    Scope(usize),
    /// A loop variable bound to instances of a storage node.
    Node(usize, usize),
    /// Inside fully stored data; conditions are evaluated directly on it.
    Resolvable,
    /// The handler variable of a simple body.
    SimpleLocal,
}

/// Second pass: registers every on-the-fly condition atom on the node whose
/// instances own its flag, mirroring the scope numbering of the first pass.
fn assign_atoms(plan: &mut ExecutionPlan, ps: &Flux) -> Result<(), PlanError> {
    let mut ctx = AtomCtx {
        plan,
        next_scope: 0,
    };
    let mut env = HashMap::new();
    ctx.walk_flux(ps, &mut env)
}

struct AtomCtx<'p> {
    plan: &'p mut ExecutionPlan,
    next_scope: usize,
}

impl AtomCtx<'_> {
    fn walk_flux(
        &mut self,
        f: &Flux,
        env: &mut HashMap<String, SymPos>,
    ) -> Result<(), PlanError> {
        let Flux::Ps { var, handlers, .. } = f else {
            return Err(internal("simple plan reached atom assignment unexpanded"));
        };
        let sid = self.next_scope;
        self.next_scope += 1;
        env.insert(var.clone(), SymPos::Scope(sid));
        for (i, handler) in handlers.iter().enumerate() {
            match handler {
                Handler::OnFirst { body, .. } => {
                    self.walk_query(body, env, None)?;
                }
                Handler::On { var: x, body, .. } => match &**body {
                    Flux::Simple(q) => {
                        env.insert(x.clone(), SymPos::SimpleLocal);
                        let conds = simple_guards(q);
                        for cond in conds {
                            self.collect_cond(&cond, env, Some((sid, i)))?;
                        }
                        env.remove(x);
                    }
                    nested @ Flux::Ps { .. } => {
                        self.walk_flux(nested, env)?;
                        env.remove(x);
                    }
                },
            }
        }
        env.remove(var);
        Ok(())
    }

    fn walk_query(
        &mut self,
        q: &Query,
        env: &mut HashMap<String, SymPos>,
        simple: Option<(usize, usize)>,
    ) -> Result<(), PlanError> {
        match q {
            Query::Empty | Query::Str(_) | Query::PathOut(_) | Query::VarOut(_) => Ok(()),
            Query::Seq(items) => {
                for item in items {
                    self.walk_query(item, env, simple)?;
                }
                Ok(())
            }
            Query::For {
                var,
                source,
                path,
                body,
            } => {
                let pos = self.descend(env, source, path.steps())?;
                env.insert(var.clone(), pos);
                self.walk_query(body, env, simple)?;
                env.remove(var);
                Ok(())
            }
            Query::ForWhere {
                var,
                source,
                path,
                cond,
                body,
            } => {
                let pos = self.descend(env, source, path.steps())?;
                env.insert(var.clone(), pos);
                self.collect_cond(cond, env, simple)?;
                self.walk_query(body, env, simple)?;
                env.remove(var);
                Ok(())
            }
            Query::If { cond, body } => {
                self.collect_cond(cond, env, simple)?;
                self.walk_query(body, env, simple)
            }
        }
    }

    /// The position a loop variable is bound to when its loop runs over
    /// buffered data.
    fn descend(
        &self,
        env: &HashMap<String, SymPos>,
        source: &str,
        steps: &[String],
    ) -> Result<SymPos, PlanError> {
        let (sid, mut nid) = match env.get(source) {
            Some(SymPos::Scope(sid)) => (*sid, 0),
            Some(SymPos::Node(sid, nid)) => (*sid, *nid),
            Some(SymPos::Resolvable) => return Ok(SymPos::Resolvable),
            Some(SymPos::SimpleLocal) => {
                return Err(internal(format!(
                    "a loop runs over the simple handler variable ${source}"
                )))
            }
            None => {
                return Err(internal(format!(
                    "loop source ${source} is not in scope"
                )))
            }
        };
        let tree = &self.plan.scopes[sid].tree;
        for step in steps {
            if tree.nodes[nid].marked {
                return Ok(SymPos::Resolvable);
            }
            match tree.nodes[nid].children.get(step) {
                Some(&c) => nid = c,
                None => {
                    return Err(internal(format!(
                        "loop path `{step}` under ${source} has no storage node"
                    )))
                }
            }
        }
        if tree.nodes[nid].marked {
            Ok(SymPos::Resolvable)
        } else {
            Ok(SymPos::Node(sid, nid))
        }
    }

    fn collect_cond(
        &mut self,
        cond: &Cond,
        env: &HashMap<String, SymPos>,
        simple: Option<(usize, usize)>,
    ) -> Result<(), PlanError> {
        match cond {
            Cond::True => Ok(()),
            // Both operands of a path comparison point at stored data, save
            // for a simple handler's own variable, whose values stream by and
            // must be collected.
            Cond::CmpPath { lhs, rhs, .. } => {
                self.register_values(env, lhs, simple)?;
                self.register_values(env, rhs, simple)
            }
            Cond::And(a, b) | Cond::Or(a, b) => {
                self.collect_cond(a, env, simple)?;
                self.collect_cond(b, env, simple)
            }
            Cond::Not(a) => self.collect_cond(a, env, simple),
            Cond::Exists(vp) => self.register(env, vp, AtomTest::Exists, simple),
            Cond::CmpLit { lhs, op, rhs } => {
                self.register(env, lhs, AtomTest::Cmp(*op, rhs.clone()), simple)
            }
        }
    }

    fn register_values(
        &mut self,
        env: &HashMap<String, SymPos>,
        vp: &crate::query::VarPath,
        simple: Option<(usize, usize)>,
    ) -> Result<(), PlanError> {
        if !matches!(env.get(&vp.var), Some(SymPos::SimpleLocal)) {
            return Ok(());
        }
        let (sid, h) = simple.ok_or_else(|| {
            internal(format!("${} used outside its simple handler", vp.var))
        })?;
        let HandlerSpec::OnSimple { simple: spec, .. } = &mut self.plan.scopes[sid].handlers[h]
        else {
            return Err(internal("value owner is not a simple handler"));
        };
        let steps: Vec<String> = vp.path.steps().to_vec();
        if spec.value_paths.contains(&steps) {
            return Ok(());
        }
        let slot = spec.value_paths.len();
        spec.value_paths.push(steps.clone());
        spec.value_trie.insert(&steps, slot);
        Ok(())
    }

    fn register(
        &mut self,
        env: &HashMap<String, SymPos>,
        vp: &crate::query::VarPath,
        test: AtomTest,
        simple: Option<(usize, usize)>,
    ) -> Result<(), PlanError> {
        let steps: Vec<String> = vp.path.steps().to_vec();
        match env.get(&vp.var) {
            Some(SymPos::Resolvable) => Ok(()),
            Some(SymPos::SimpleLocal) => {
                let (sid, h) = simple.ok_or_else(|| {
                    internal(format!("${} used outside its simple handler", vp.var))
                })?;
                let HandlerSpec::OnSimple { simple: spec, .. } =
                    &mut self.plan.scopes[sid].handlers[h]
                else {
                    return Err(internal("atom owner is not a simple handler"));
                };
                if spec
                    .atoms
                    .iter()
                    .any(|a| a.path == steps && a.test == test)
                {
                    return Ok(());
                }
                let slot = spec.atoms.len();
                spec.atoms.push(AtomSpec {
                    path: steps.clone(),
                    test,
                });
                spec.trie.insert(&steps, slot);
                Ok(())
            }
            Some(SymPos::Scope(sid)) => self.register_on_node(*sid, 0, steps, test),
            Some(SymPos::Node(sid, nid)) => self.register_on_node(*sid, *nid, steps, test),
            None => Err(internal(format!(
                "condition variable ${} is not in scope",
                vp.var
            ))),
        }
    }

    fn register_on_node(
        &mut self,
        sid: usize,
        nid: usize,
        steps: Vec<String>,
        test: AtomTest,
    ) -> Result<(), PlanError> {
        // If the path enters fully stored data the condition is evaluated
        // directly on the store at fire time; no flag is needed.
        {
            let tree = &self.plan.scopes[sid].tree;
            let mut cur = nid;
            if tree.nodes[cur].marked {
                return Ok(());
            }
            for step in &steps {
                match tree.nodes[cur].children.get(step) {
                    None => break,
                    Some(&c) => {
                        if tree.nodes[c].marked {
                            return Ok(());
                        }
                        cur = c;
                    }
                }
            }
        }
        let node = &mut self.plan.scopes[sid].tree.nodes[nid];
        if node.atom_slot(&steps, &test).is_some() {
            return Ok(());
        }
        let slot = node.atoms.len();
        node.atoms.push(AtomSpec {
            path: steps.clone(),
            test,
        });
        node.trie.insert(&steps, slot);
        Ok(())
    }
}

/// The guard conditions of a simple body, in order.
fn simple_guards(q: &Query) -> Vec<Rc<Cond>> {
    let items: Vec<&Query> = match q {
        Query::Seq(items) => items.iter().collect(),
        single => vec![single],
    };
    items
        .iter()
        .filter_map(|item| match item {
            Query::If { cond, .. } => Some(cond.clone()),
            _ => None,
        })
        .collect()
}
