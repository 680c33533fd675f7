//! Streaming execution of a compiled plan: one pass over the punctuated
//! event stream. Handlers fire at the positions the punctuation markers
//! pin down, scopes open and close with their elements, and storage fills
//! on the fly along the plan's buffer trees.
//!
//! Output-order discipline per scope, matching the positional semantics of
//! the plan interpreter: at a child's start event the scope first fires
//! every first-past handler already due (earlier positions), then fires the
//! handlers whose markers arrived just now and whose data needs nothing
//! from the child — provided they precede the child's own handler in the
//! handler list. Everything else waits for the child's end event, where the
//! remaining due handlers and the child's later matching handlers run in
//! list order. When a handler that must fire *before* the child's handler
//! still needs the child's own subtree (its marker says the set completes
//! with this child), the child is recorded instead of dispatched live and
//! the whole position is resolved at its end event, again in list order.
//! Recording also kicks in when several `on` handlers match one child: the
//! first processes the live stream, the rest replay the recording.

use std::collections::HashMap;
use std::rc::Rc;
use std::time::Instant;

use thiserror::Error;

use crate::query::{Cond, Query, VarPath};
use crate::schema::{NodeKind, Schema};

use super::buffer::{BufferInstance, BufferStats, Delta, RunStats};
use super::compare;
use super::plan::{AtomTest, ExecutionPlan, FlagTrie, HandlerSpec, SimpleSpec};
use super::punctuate::{MarkerTiming, Punctuated, Punctuator, StreamError};
use super::token::{write_event, Tokenizer, XmlEvent};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error("execution error: {detail}")]
    Internal { detail: String },
}

fn internal(detail: impl Into<String>) -> RunError {
    RunError::Internal {
        detail: detail.into(),
    }
}

pub struct RunOutcome {
    pub output: String,
    pub stats: RunStats,
}

/// Runs a compiled plan over a raw document in one pass.
pub fn run(schema: &Schema, plan: &ExecutionPlan, input: &str) -> Result<RunOutcome, RunError> {
    let started = Instant::now();
    let mut exec = Exec::new(schema, plan);
    exec.open_document()?;
    let punct = Punctuator::new(schema, &plan.regs, Tokenizer::new(input));
    for item in punct {
        exec.process(item?)?;
    }
    exec.finish()?;
    let stats = exec.stats.finish(plan, started.elapsed());
    Ok(RunOutcome {
        output: exec.out,
        stats,
    })
}

/// Where a variable's data lives during evaluation.
#[derive(Clone, Debug)]
enum RtVal {
    /// An open scope instance.
    Scope(usize),
    /// A stored element instance.
    Node { sid: usize, node: usize },
    /// A subtree `events[lo..=hi]` within a marked node's capture.
    Slice {
        sid: usize,
        node: usize,
        lo: usize,
        hi: usize,
    },
}

type Env = HashMap<String, RtVal>;

/// A storage position: children of the element at this frame extend buffer
/// node `node` of scope `sid` according to the plan tree.
#[derive(Clone, Copy, Debug)]
struct FillPos {
    sid: usize,
    node: usize,
    plan_node: usize,
}

/// Where a finished flag or collected value lands.
#[derive(Clone, Copy, Debug)]
enum Sink {
    /// Scope-level flag (atom of storage node 0).
    ScopeFlag(usize),
    /// Per-instance flag of a stored node: `(scope, buffer node)`.
    NodeFlag(usize, usize),
    /// Flag of the simple handler running at a frame.
    SimpleFlag(usize),
    /// Collected comparison values of the simple handler at a frame.
    SimpleValue(usize),
}

/// A flag-trie cursor: atom paths walked in lock-step with the element
/// stack below their owner.
#[derive(Clone, Copy)]
struct TrieCur<'p> {
    sink: Sink,
    trie: &'p FlagTrie,
}

/// Collects the character data of one target subtree for a comparison atom
/// or a value slot; closed when the element at `end_depth` ends.
struct Collector {
    end_depth: usize,
    sink: Sink,
    slot: usize,
    buf: String,
    level: usize,
}

/// An open capture: events stream into `node` of scope `sid`'s buffer.
#[derive(Clone, Copy)]
struct CapRef {
    sid: usize,
    node: usize,
    level: usize,
}

/// A subtree recording for handlers that run after the live pass.
struct Recorder {
    events: Vec<XmlEvent>,
    bytes: usize,
    level: usize,
}

/// Runtime state of the simple handler processing the current element.
struct SimpleRt {
    sid: usize,
    handler: usize,
    flags: Vec<bool>,
    values: Vec<Vec<String>>,
}

struct Frame<'p> {
    label: String,
    /// Scope instance opened at this element.
    scope: Option<usize>,
    fills: Vec<FillPos>,
    tries: Vec<TrieCur<'p>>,
    /// A guarded copy is streaming this subtree through to the output.
    copy: bool,
    simple: Option<SimpleRt>,
    /// Captures opened at this element (closed at its end, innermost last).
    caps_opened: usize,
    /// Root of a replayed subtree: its end returns to the replay driver
    /// instead of resuming the parent scope.
    replay_root: bool,
}

impl Frame<'_> {
    fn new(label: String) -> Frame<'static> {
        Frame {
            label,
            scope: None,
            fills: Vec::new(),
            tries: Vec::new(),
            copy: false,
            simple: None,
            caps_opened: 0,
            replay_root: false,
        }
    }
}

struct ScopeRt {
    fired: Vec<bool>,
    /// Due to fire at the next firing point (next child start, child end,
    /// or the scope's close).
    ready: Vec<bool>,
    /// Became due at the scope's entry (position before every child); at
    /// the close these still fire ahead of end-of-children handlers.
    entry: Vec<bool>,
    /// Scope-level condition flags (atoms of storage node 0).
    flags: Vec<bool>,
    buffer: Option<BufferInstance>,
    child: Option<ChildCtx>,
}

/// How the scope is treating the child element currently streaming.
struct ChildCtx {
    /// Handler processing the child live.
    gate: Option<usize>,
    /// Whole position deferred to the child's end (a handler that must fire
    /// first still needs the child's own data).
    suppressed: bool,
    recorder: Option<usize>,
}

struct Injection {
    depth: usize,
    sid: usize,
    handler: usize,
}

/// Per-run statistics ledger; `cur`/`hwm` track the concurrent total over
/// all buffer instances and recordings.
struct StatsBook {
    rows: Vec<BufferStats>,
    replay: BufferStats,
    replay_cur: Delta,
    cur: Delta,
    hwm: Delta,
}

impl StatsBook {
    fn new(plan: &ExecutionPlan) -> StatsBook {
        StatsBook {
            rows: plan
                .scopes
                .iter()
                .map(|s| BufferStats {
                    var: format!("buffer ${}", s.var),
                    ..BufferStats::default()
                })
                .collect(),
            replay: BufferStats {
                var: "(replay)".into(),
                ..BufferStats::default()
            },
            replay_cur: (0, 0),
            cur: (0, 0),
            hwm: (0, 0),
        }
    }

    fn add(&mut self, (de, db): Delta) {
        self.cur.0 += de;
        self.cur.1 += db;
        self.hwm.0 = self.hwm.0.max(self.cur.0);
        self.hwm.1 = self.hwm.1.max(self.cur.1);
    }

    fn fill(&mut self, sid: usize) {
        self.rows[sid].fills += 1;
    }

    fn free_instance(&mut self, sid: usize, inst: &BufferInstance) {
        self.rows[sid].frees += 1;
        self.rows[sid].events_hwm = self.rows[sid].events_hwm.max(inst.hwm_events);
        self.rows[sid].bytes_hwm = self.rows[sid].bytes_hwm.max(inst.hwm_bytes);
        self.cur.0 -= inst.cur_events();
        self.cur.1 -= inst.cur_bytes();
    }

    fn replay_start(&mut self) {
        self.replay.fills += 1;
    }

    fn replay_add(&mut self, (de, db): Delta) {
        self.replay_cur.0 += de;
        self.replay_cur.1 += db;
        self.replay.events_hwm = self.replay.events_hwm.max(self.replay_cur.0);
        self.replay.bytes_hwm = self.replay.bytes_hwm.max(self.replay_cur.1);
        self.add((de, db));
    }

    fn replay_free(&mut self, (de, db): Delta) {
        self.replay.frees += 1;
        self.replay_cur.0 -= de;
        self.replay_cur.1 -= db;
        self.cur.0 -= de;
        self.cur.1 -= db;
    }

    fn finish(&self, plan: &ExecutionPlan, elapsed: std::time::Duration) -> RunStats {
        let mut buffers: Vec<BufferStats> = self
            .rows
            .iter()
            .enumerate()
            .filter(|(sid, _)| plan.scopes[*sid].has_buffer)
            .map(|(_, row)| row.clone())
            .collect();
        buffers.push(self.replay.clone());
        RunStats {
            buffers,
            total_events_hwm: self.hwm.0,
            total_bytes_hwm: self.hwm.1,
            elapsed,
        }
    }
}

struct Exec<'p> {
    schema: &'p Schema,
    plan: &'p ExecutionPlan,
    out: String,
    frames: Vec<Frame<'p>>,
    scopes: Vec<ScopeRt>,
    /// Transition markers waiting for the start event they precede.
    pending: Vec<(usize, usize, bool)>,
    captures: Vec<CapRef>,
    recorders: Vec<Recorder>,
    collectors: Vec<Collector>,
    /// Replay nesting: captures, recordings and collectors opened before a
    /// replay must not see the replayed events a second time.
    level: usize,
    inject: Option<Injection>,
    stats: StatsBook,
}

impl<'p> Exec<'p> {
    fn new(schema: &'p Schema, plan: &'p ExecutionPlan) -> Exec<'p> {
        Exec {
            schema,
            plan,
            out: String::new(),
            frames: Vec::new(),
            scopes: plan
                .scopes
                .iter()
                .map(|s| ScopeRt {
                    fired: vec![false; s.handlers.len()],
                    ready: vec![false; s.handlers.len()],
                    entry: vec![false; s.handlers.len()],
                    flags: Vec::new(),
                    buffer: None,
                    child: None,
                })
                .collect(),
            pending: Vec::new(),
            captures: Vec::new(),
            recorders: Vec::new(),
            collectors: Vec::new(),
            level: 0,
            inject: None,
            stats: StatsBook::new(plan),
        }
    }

    fn open_document(&mut self) -> Result<(), RunError> {
        let mut frame = Frame::new(String::new());
        self.open_scope(0, &mut frame, 0)?;
        self.frames.push(frame);
        Ok(())
    }

    fn process(&mut self, item: Punctuated) -> Result<(), RunError> {
        match item {
            Punctuated::FirstPast { reg, depth, timing } => self.on_marker(reg, depth, timing),
            Punctuated::Event(XmlEvent::Start(name)) => self.on_start(name),
            Punctuated::Event(XmlEvent::End(name)) => self.on_end(name),
            Punctuated::Event(XmlEvent::Text(s)) => self.on_text(s),
        }
    }

    fn on_marker(
        &mut self,
        reg: usize,
        depth: usize,
        timing: MarkerTiming,
    ) -> Result<(), RunError> {
        if let MarkerTiming::Transition { completes } = timing {
            self.pending.push((reg, depth, completes));
            return Ok(());
        }
        // Entry and fallback markers make their handlers due immediately;
        // they fire at the next firing point.
        let Some(sid) = self.frames.get(depth).and_then(|f| f.scope) else {
            return Ok(());
        };
        let plan = self.plan;
        let at_entry = matches!(timing, MarkerTiming::Entry);
        for (i, h) in plan.scopes[sid].handlers.iter().enumerate() {
            if matches!(h, HandlerSpec::OnFirst { reg: r, .. } if *r == reg) {
                self.scopes[sid].ready[i] = true;
                if at_entry {
                    self.scopes[sid].entry[i] = true;
                }
            }
        }
        Ok(())
    }

    /// Fires every due, unfired first-past handler of the scope, in list
    /// order.
    fn pre_fire(&mut self, sid: usize) -> Result<(), RunError> {
        for i in 0..self.plan.scopes[sid].handlers.len() {
            if self.scopes[sid].ready[i] && !self.scopes[sid].fired[i] {
                self.fire_on_first(sid, i)?;
            }
        }
        Ok(())
    }

    /// Resolves the pending transition markers against the scope's handler
    /// list: `(handler index, completes)` in list order.
    fn take_marks(&mut self, sid: usize, owner_depth: usize) -> Vec<(usize, bool)> {
        let mut per_reg: HashMap<usize, bool> = HashMap::new();
        for (reg, depth, completes) in self.pending.drain(..) {
            if depth == owner_depth {
                per_reg.insert(reg, completes);
            }
        }
        let mut marks = Vec::new();
        for (i, h) in self.plan.scopes[sid].handlers.iter().enumerate() {
            if let HandlerSpec::OnFirst { reg, .. } = h {
                if let Some(&completes) = per_reg.get(reg) {
                    marks.push((i, completes));
                }
            }
        }
        marks
    }

    fn start_recorder(&mut self) -> usize {
        self.recorders.push(Recorder {
            events: Vec::new(),
            bytes: 0,
            level: self.level,
        });
        self.stats.replay_start();
        self.recorders.len() - 1
    }

    fn on_start(&mut self, name: String) -> Result<(), RunError> {
        let plan = self.plan;
        let depth = self.frames.len();
        let mut frame = Frame::new(name.clone());

        if self.inject.as_ref().is_some_and(|i| i.depth == depth) {
            // Root of a replayed subtree: it carries only the replayed
            // handler's obligations — the parent's storage was already
            // filled during the live pass.
            let inj = self.inject.take().expect("checked above");
            frame.replay_root = true;
            self.attach_handler(inj.sid, inj.handler, &mut frame, depth)?;
        } else {
            if depth == 0 {
                return Err(internal("element started before the document opened"));
            }
            let parent_scope = self.frames[depth - 1].scope;
            if let Some(sid) = parent_scope {
                self.pre_fire(sid)?;
                let marks = self.take_marks(sid, depth - 1);
                let matching: &[usize] = plan.scopes[sid]
                    .by_symbol
                    .get(&name)
                    .map(|v| v.as_slice())
                    .unwrap_or(&[]);
                let gate = matching.first().copied();
                let suppressed = gate.is_some_and(|g| marks.iter().any(|&(i, c)| c && i < g));
                let recorder = if suppressed || matching.len() > 1 {
                    Some(self.start_recorder())
                } else {
                    None
                };
                if suppressed {
                    for &(i, _) in &marks {
                        self.scopes[sid].ready[i] = true;
                    }
                } else {
                    for &(i, completes) in &marks {
                        if completes || gate.is_some_and(|g| i > g) {
                            // Fires at this child's end event, after the
                            // child's own handler in list order.
                            self.scopes[sid].ready[i] = true;
                        } else {
                            // Needs nothing from this child and precedes
                            // its handler: same position, earlier in the
                            // list.
                            self.fire_on_first(sid, i)?;
                        }
                    }
                }
                // Parent storage descends before the gate handler runs (the
                // child's stored instance must exist for its captures), but
                // after the firings above so handlers due before this child
                // do not see its data.
                self.descend_storage(depth - 1, &name, &mut frame, depth)?;
                frame.copy = self.frames[depth - 1].copy;
                if !suppressed {
                    if let Some(g) = gate {
                        self.attach_handler(sid, g, &mut frame, depth)?;
                    }
                }
                self.scopes[sid].child = Some(ChildCtx {
                    gate: if suppressed { None } else { gate },
                    suppressed,
                    recorder,
                });
            } else {
                self.pending.clear();
                self.descend_storage(depth - 1, &name, &mut frame, depth)?;
                frame.copy = self.frames[depth - 1].copy;
            }
        }

        self.frames.push(frame);
        self.apply_event(&XmlEvent::Start(name))?;
        Ok(())
    }

    fn on_text(&mut self, s: String) -> Result<(), RunError> {
        let level = self.level;
        for c in self.collectors.iter_mut().filter(|c| c.level == level) {
            c.buf.push_str(&s);
        }
        self.apply_event(&XmlEvent::Text(s))?;
        Ok(())
    }

    fn on_end(&mut self, name: String) -> Result<(), RunError> {
        let depth = self
            .frames
            .len()
            .checked_sub(1)
            .ok_or_else(|| internal("end event with no open element"))?;
        let ev = XmlEvent::End(name);
        self.apply_event(&ev)?;

        // Close this element's collectors before anything reads the flags.
        self.close_collectors(depth)?;

        // Complete this element's stored instances.
        let fills = self.frames[depth].fills.clone();
        for fp in fills {
            let buffer = self.scopes[fp.sid]
                .buffer
                .as_mut()
                .ok_or_else(|| internal("storage fill without buffer"))?;
            if fp.node == 0 {
                // The scope's own node is positional context, not data — it
                // is never charged.
                buffer.nodes[0].complete = true;
            } else {
                let delta = buffer.finish(fp.node, &ev);
                self.stats.add(delta);
            }
        }
        self.seal_captures(depth)?;

        // A simple handler's trailing items run once its child has fully
        // streamed: their guards may test the child's own content.
        if let Some(rt) = self.frames[depth].simple.take() {
            self.finish_simple(rt)?;
        }

        if let Some(s) = self.frames[depth].scope {
            self.close_scope(s)?;
        }

        let frame = self.frames.pop().expect("frame checked above");
        if frame.replay_root {
            return Ok(());
        }

        if let Some(ps) = self.frames.last().and_then(|f| f.scope) {
            if let Some(ctx) = self.scopes[ps].child.take() {
                self.resume(ps, ctx, &frame.label)?;
            }
        }
        Ok(())
    }

    fn close_collectors(&mut self, depth: usize) -> Result<(), RunError> {
        let mut closing = Vec::new();
        let mut i = 0;
        while i < self.collectors.len() {
            if self.collectors[i].end_depth == depth {
                closing.push(self.collectors.swap_remove(i));
            } else {
                i += 1;
            }
        }
        for col in closing {
            self.finish_collector(col)?;
        }
        Ok(())
    }

    fn seal_captures(&mut self, depth: usize) -> Result<(), RunError> {
        for _ in 0..self.frames[depth].caps_opened {
            let cap = self
                .captures
                .pop()
                .ok_or_else(|| internal("capture stack underflow"))?;
            self.scopes[cap.sid]
                .buffer
                .as_mut()
                .ok_or_else(|| internal("capture without buffer"))?
                .seal(cap.node);
        }
        self.frames[depth].caps_opened = 0;
        Ok(())
    }

    /// Generic event application: recordings, captures, and the guarded
    /// copy's echo. Only stores of the current replay level participate —
    /// the outer ones saw these events during the live pass.
    fn apply_event(&mut self, ev: &XmlEvent) -> Result<(), RunError> {
        let level = self.level;
        let mut delta = (0usize, 0usize);
        for r in self.recorders.iter_mut().filter(|r| r.level == level) {
            r.events.push(ev.clone());
            r.bytes += ev.byte_size();
            delta.0 += 1;
            delta.1 += ev.byte_size();
        }
        if delta.0 > 0 {
            self.stats.replay_add(delta);
        }
        let caps: Vec<CapRef> = self
            .captures
            .iter()
            .filter(|c| c.level == level)
            .copied()
            .collect();
        for cap in caps {
            let buffer = self.scopes[cap.sid]
                .buffer
                .as_mut()
                .ok_or_else(|| internal("capture without buffer"))?;
            let delta = buffer.append(cap.node, ev.clone());
            self.stats.add(delta);
        }
        if self.frames.last().is_some_and(|f| f.copy) {
            write_event(ev, &mut self.out);
        }
        Ok(())
    }

    /// Extends the parent's storage positions and flag tries into a child
    /// element: creates stored instances, opens captures, sets existence
    /// flags, and starts comparison collectors.
    fn descend_storage(
        &mut self,
        parent_idx: usize,
        name: &str,
        frame: &mut Frame<'p>,
        depth: usize,
    ) -> Result<(), RunError> {
        let plan = self.plan;
        let start = XmlEvent::Start(name.to_string());
        let parent_fills = self.frames[parent_idx].fills.clone();
        for fp in parent_fills {
            let tree = &plan.scopes[fp.sid].tree;
            let Some(&pc) = tree.nodes[fp.plan_node].children.get(name) else {
                continue;
            };
            let pcn = &tree.nodes[pc];
            let buffer = self.scopes[fp.sid]
                .buffer
                .as_mut()
                .ok_or_else(|| internal("storage fill without buffer"))?;
            let (id, delta) = buffer.add_child(fp.node, pc, pcn.atoms.len(), pcn.marked, &start);
            self.stats.add(delta);
            if pcn.marked {
                self.captures.push(CapRef {
                    sid: fp.sid,
                    node: id,
                    level: self.level,
                });
                frame.caps_opened += 1;
            } else {
                frame.fills.push(FillPos {
                    sid: fp.sid,
                    node: id,
                    plan_node: pc,
                });
                if !pcn.trie.is_empty() {
                    self.enter_trie(Sink::NodeFlag(fp.sid, id), &pcn.trie, frame, depth)?;
                }
            }
        }
        let parent_tries = self.frames[parent_idx].tries.clone();
        for tc in parent_tries {
            if let Some(sub) = tc.trie.children.get(name) {
                self.enter_trie(tc.sink, sub, frame, depth)?;
            }
        }
        Ok(())
    }

    /// Enters a trie node for the element at `depth`: atoms whose path ends
    /// here resolve (existence now, comparisons once the text is in), and
    /// the cursor descends with the frame.
    fn enter_trie(
        &mut self,
        sink: Sink,
        trie: &'p FlagTrie,
        frame: &mut Frame<'p>,
        depth: usize,
    ) -> Result<(), RunError> {
        for &slot in &trie.ending {
            match self.sink_test(sink, slot)? {
                None | Some(AtomTest::Cmp(..)) => self.collectors.push(Collector {
                    end_depth: depth,
                    sink,
                    slot,
                    buf: String::new(),
                    level: self.level,
                }),
                Some(AtomTest::Exists) => self.set_flag(sink, slot)?,
            }
        }
        if !trie.children.is_empty() {
            frame.tries.push(TrieCur { sink, trie });
        }
        Ok(())
    }

    /// The atom test backing a flag sink; `None` for value collection.
    fn sink_test(&self, sink: Sink, slot: usize) -> Result<Option<&'p AtomTest>, RunError> {
        let plan = self.plan;
        match sink {
            Sink::ScopeFlag(sid) => Ok(Some(&plan.scopes[sid].tree.nodes[0].atoms[slot].test)),
            Sink::NodeFlag(sid, node) => {
                let pn = self.scopes[sid]
                    .buffer
                    .as_ref()
                    .ok_or_else(|| internal("flag sink without buffer"))?
                    .nodes[node]
                    .plan_node;
                Ok(Some(&plan.scopes[sid].tree.nodes[pn].atoms[slot].test))
            }
            Sink::SimpleFlag(f) => {
                let spec = self.simple_spec_at(f)?;
                Ok(Some(&spec.atoms[slot].test))
            }
            Sink::SimpleValue(_) => Ok(None),
        }
    }

    fn simple_spec_at(&self, frame_idx: usize) -> Result<&'p SimpleSpec, RunError> {
        let rt = self.frames[frame_idx]
            .simple
            .as_ref()
            .ok_or_else(|| internal("simple sink without handler state"))?;
        let HandlerSpec::OnSimple { simple, .. } = &self.plan.scopes[rt.sid].handlers[rt.handler]
        else {
            return Err(internal("simple sink does not point at a simple handler"));
        };
        Ok(simple)
    }

    fn set_flag(&mut self, sink: Sink, slot: usize) -> Result<(), RunError> {
        match sink {
            Sink::ScopeFlag(sid) => self.scopes[sid].flags[slot] = true,
            Sink::NodeFlag(sid, node) => {
                self.scopes[sid]
                    .buffer
                    .as_mut()
                    .ok_or_else(|| internal("flag sink without buffer"))?
                    .nodes[node]
                    .flags[slot] = true;
            }
            Sink::SimpleFlag(f) => {
                let rt = self.frames[f]
                    .simple
                    .as_mut()
                    .ok_or_else(|| internal("simple sink without handler state"))?;
                rt.flags[slot] = true;
            }
            Sink::SimpleValue(_) => return Err(internal("a value slot cannot be set as a flag")),
        }
        Ok(())
    }

    fn finish_collector(&mut self, col: Collector) -> Result<(), RunError> {
        match col.sink {
            Sink::SimpleValue(f) => {
                let rt = self.frames[f]
                    .simple
                    .as_mut()
                    .ok_or_else(|| internal("value sink without handler state"))?;
                rt.values[col.slot].push(col.buf);
                Ok(())
            }
            sink => {
                let Some(AtomTest::Cmp(op, rhs)) = self.sink_test(sink, col.slot)? else {
                    return Err(internal("collector closed on a non-comparison atom"));
                };
                if compare(&col.buf, *op, rhs) {
                    self.set_flag(sink, col.slot)?;
                }
                Ok(())
            }
        }
    }

    fn attach_handler(
        &mut self,
        sid: usize,
        hidx: usize,
        frame: &mut Frame<'p>,
        depth: usize,
    ) -> Result<(), RunError> {
        match &self.plan.scopes[sid].handlers[hidx] {
            HandlerSpec::OnScope { scope, .. } => self.open_scope(*scope, frame, depth),
            HandlerSpec::OnSimple { .. } => self.start_simple(sid, hidx, frame, depth),
            HandlerSpec::OnFirst { .. } => {
                Err(internal("a first-past handler cannot process a child"))
            }
        }
    }

    fn open_scope(
        &mut self,
        s: usize,
        frame: &mut Frame<'p>,
        depth: usize,
    ) -> Result<(), RunError> {
        let plan = self.plan;
        let spec = &plan.scopes[s];
        self.out.push_str(&spec.prefix);
        if self.scopes[s].child.is_some() {
            return Err(internal(format!(
                "scope ${} re-entered while processing a child",
                spec.var
            )));
        }
        // The previous instance's storage lives until the scope re-enters.
        if let Some(old) = self.scopes[s].buffer.take() {
            self.stats.free_instance(s, &old);
        }
        let root = &spec.tree.nodes[0];
        self.scopes[s].fired = vec![false; spec.handlers.len()];
        self.scopes[s].ready = vec![false; spec.handlers.len()];
        self.scopes[s].entry = vec![false; spec.handlers.len()];
        self.scopes[s].flags = vec![false; root.atoms.len()];
        if spec.has_buffer {
            self.stats.fill(s);
            self.scopes[s].buffer = Some(BufferInstance::new(&spec.tree));
            if root.marked {
                self.captures.push(CapRef {
                    sid: s,
                    node: 0,
                    level: self.level,
                });
                frame.caps_opened += 1;
            } else {
                frame.fills.push(FillPos {
                    sid: s,
                    node: 0,
                    plan_node: 0,
                });
            }
        }
        if !root.marked && !root.trie.is_empty() {
            self.enter_trie(Sink::ScopeFlag(s), &root.trie, frame, depth)?;
        }
        frame.scope = Some(s);
        Ok(())
    }

    /// The scope's close: every handler not yet fired runs now, handlers
    /// due since the entry position ahead of the end-of-children rest.
    fn close_scope(&mut self, s: usize) -> Result<(), RunError> {
        let plan = self.plan;
        for entry_round in [true, false] {
            for i in 0..plan.scopes[s].handlers.len() {
                if !matches!(plan.scopes[s].handlers[i], HandlerSpec::OnFirst { .. }) {
                    continue;
                }
                if entry_round && !self.scopes[s].entry[i] {
                    continue;
                }
                if !self.scopes[s].fired[i] {
                    self.fire_on_first(s, i)?;
                }
            }
        }
        self.out.push_str(&plan.scopes[s].suffix);
        if self.scopes[s].child.is_some() {
            return Err(internal("scope closed while processing a child"));
        }
        Ok(())
    }

    fn start_simple(
        &mut self,
        sid: usize,
        hidx: usize,
        frame: &mut Frame<'p>,
        depth: usize,
    ) -> Result<(), RunError> {
        let plan = self.plan;
        let HandlerSpec::OnSimple {
            var, simple: spec, ..
        } = &plan.scopes[sid].handlers[hidx]
        else {
            return Err(internal("not a simple handler"));
        };
        let rt = SimpleRt {
            sid,
            handler: hidx,
            flags: vec![false; spec.atoms.len()],
            values: vec![Vec::new(); spec.value_paths.len()],
        };
        let env = scope_env(plan, sid);
        {
            let view = SimpleView {
                var,
                spec,
                rt: &rt,
            };
            for item in &spec.pre {
                if eval_guard(plan, &self.scopes, &item.guard, &env, Some(&view))? {
                    self.out.push_str(&item.text);
                }
            }
            if let Some(copy) = &spec.copy {
                if eval_guard(plan, &self.scopes, &copy.guard, &env, Some(&view))? {
                    frame.copy = true;
                }
            }
        }
        if !spec.trie.is_empty() {
            self.enter_trie(Sink::SimpleFlag(depth), &spec.trie, frame, depth)?;
        }
        if !spec.value_trie.is_empty() {
            self.enter_trie(Sink::SimpleValue(depth), &spec.value_trie, frame, depth)?;
        }
        frame.simple = Some(rt);
        Ok(())
    }

    fn finish_simple(&mut self, rt: SimpleRt) -> Result<(), RunError> {
        let plan = self.plan;
        let HandlerSpec::OnSimple {
            var, simple: spec, ..
        } = &plan.scopes[rt.sid].handlers[rt.handler]
        else {
            return Err(internal("not a simple handler"));
        };
        let env = scope_env(plan, rt.sid);
        let view = SimpleView {
            var,
            spec,
            rt: &rt,
        };
        for item in &spec.post {
            if eval_guard(plan, &self.scopes, &item.guard, &env, Some(&view))? {
                self.out.push_str(&item.text);
            }
        }
        Ok(())
    }

    fn fire_on_first(&mut self, sid: usize, idx: usize) -> Result<(), RunError> {
        let plan = self.plan;
        let HandlerSpec::OnFirst { body, .. } = &plan.scopes[sid].handlers[idx] else {
            return Err(internal("not a first-past handler"));
        };
        self.scopes[sid].fired[idx] = true;
        let mut env = scope_env(plan, sid);
        eval_query(plan, &self.scopes, body, &mut env, &mut self.out)
    }

    /// Finishes a child position at its end event: fires the handlers that
    /// had to wait for the child's data, and replays the recording through
    /// the child's remaining handlers, all in list order.
    fn resume(&mut self, ps: usize, ctx: ChildCtx, child_label: &str) -> Result<(), RunError> {
        let plan = self.plan;
        let mut recording: Option<(Rc<Vec<XmlEvent>>, Delta)> = None;
        if let Some(ridx) = ctx.recorder {
            if ridx + 1 != self.recorders.len() {
                return Err(internal("recordings closed out of order"));
            }
            let rec = self.recorders.pop().expect("checked above");
            let delta = (rec.events.len(), rec.bytes);
            recording = Some((Rc::new(rec.events), delta));
        }
        let from = if ctx.suppressed {
            0
        } else {
            ctx.gate.map_or(0, |g| g + 1)
        };
        for idx in from..plan.scopes[ps].handlers.len() {
            match &plan.scopes[ps].handlers[idx] {
                HandlerSpec::OnFirst { .. } => {
                    if self.scopes[ps].ready[idx] && !self.scopes[ps].fired[idx] {
                        self.fire_on_first(ps, idx)?;
                    }
                }
                HandlerSpec::OnScope { sym, .. } | HandlerSpec::OnSimple { sym, .. } => {
                    if sym == child_label {
                        let (events, _) = recording
                            .as_ref()
                            .ok_or_else(|| internal("handler replay without a recording"))?;
                        let events = Rc::clone(events);
                        self.replay(ps, idx, &events)?;
                    }
                }
            }
        }
        if let Some((_, delta)) = recording {
            self.stats.replay_free(delta);
        }
        Ok(())
    }

    /// Re-runs a recorded child subtree through one handler. The subtree is
    /// re-punctuated at its original depth, so nested scopes see the same
    /// markers they saw live.
    fn replay(
        &mut self,
        sid: usize,
        handler: usize,
        events: &Rc<Vec<XmlEvent>>,
    ) -> Result<(), RunError> {
        let schema = self.schema;
        let plan = self.plan;
        let depth = self.frames.len();
        self.inject = Some(Injection {
            depth,
            sid,
            handler,
        });
        self.level += 1;
        let punct = Punctuator::subtree(schema, &plan.regs, events.iter().cloned().map(Ok), depth);
        for item in punct {
            self.process(item?)?;
        }
        self.level -= 1;
        if self.inject.is_some() {
            return Err(internal("replayed subtree produced no element"));
        }
        Ok(())
    }

    /// End of input: the document scope closes without an end event.
    fn finish(&mut self) -> Result<(), RunError> {
        if self.frames.len() != 1 {
            return Err(internal("input ended with open elements"));
        }
        self.close_collectors(0)?;
        self.seal_captures(0)?;
        let fills = self.frames[0].fills.clone();
        for fp in fills {
            if fp.node == 0 {
                if let Some(buffer) = self.scopes[fp.sid].buffer.as_mut() {
                    buffer.nodes[0].complete = true;
                }
            }
        }
        self.close_scope(0)?;
        self.frames.pop();
        for sid in 0..self.scopes.len() {
            if let Some(inst) = self.scopes[sid].buffer.take() {
                self.stats.free_instance(sid, &inst);
            }
        }
        if !self.captures.is_empty() || !self.recorders.is_empty() || !self.collectors.is_empty() {
            return Err(internal("dangling stores at end of input"));
        }
        Ok(())
    }
}

/// The variables visible inside a scope: the scope chain up to the document
/// variable, inner bindings shadowing outer ones.
fn scope_env(plan: &ExecutionPlan, sid: usize) -> Env {
    let mut env = Env::new();
    let mut cur = Some(sid);
    while let Some(s) = cur {
        let spec = &plan.scopes[s];
        env.entry(spec.var.clone()).or_insert(RtVal::Scope(s));
        cur = spec.parent;
    }
    env
}

/// The simple handler whose variable may appear in a guard, with its live
/// flags and collected values.
struct SimpleView<'a> {
    var: &'a str,
    spec: &'a SimpleSpec,
    rt: &'a SimpleRt,
}

fn eval_guard(
    plan: &ExecutionPlan,
    scopes: &[ScopeRt],
    guard: &Option<Rc<Cond>>,
    env: &Env,
    simple: Option<&SimpleView<'_>>,
) -> Result<bool, RunError> {
    match guard {
        None => Ok(true),
        Some(c) => eval_cond(plan, scopes, c, env, simple),
    }
}

fn eval_query(
    plan: &ExecutionPlan,
    scopes: &[ScopeRt],
    q: &Query,
    env: &mut Env,
    out: &mut String,
) -> Result<(), RunError> {
    match q {
        Query::Empty => Ok(()),
        Query::Str(s) => {
            out.push_str(s);
            Ok(())
        }
        Query::Seq(items) => {
            for item in items {
                eval_query(plan, scopes, item, env, out)?;
            }
            Ok(())
        }
        Query::For {
            var,
            source,
            path,
            body,
        } => {
            let vals = resolve_var_path(plan, scopes, env, source, path.steps())?;
            for v in vals {
                let saved = env.insert(var.clone(), v);
                let r = eval_query(plan, scopes, body, env, out);
                restore(env, var, saved);
                r?;
            }
            Ok(())
        }
        Query::ForWhere {
            var,
            source,
            path,
            cond,
            body,
        } => {
            let vals = resolve_var_path(plan, scopes, env, source, path.steps())?;
            for v in vals {
                let saved = env.insert(var.clone(), v);
                let r = (|| -> Result<(), RunError> {
                    if eval_cond(plan, scopes, cond, env, None)? {
                        eval_query(plan, scopes, body, env, out)?;
                    }
                    Ok(())
                })();
                restore(env, var, saved);
                r?;
            }
            Ok(())
        }
        Query::If { cond, body } => {
            if eval_cond(plan, scopes, cond, env, None)? {
                eval_query(plan, scopes, body, env, out)?;
            }
            Ok(())
        }
        Query::VarOut(v) => {
            let val = env
                .get(v)
                .cloned()
                .ok_or_else(|| internal(format!("${v} is not bound")))?;
            serialize_val(plan, scopes, &val, out)
        }
        Query::PathOut(vp) => {
            let vals = resolve_var_path(plan, scopes, env, &vp.var, vp.path.steps())?;
            for v in vals {
                serialize_val(plan, scopes, &v, out)?;
            }
            Ok(())
        }
    }
}

fn restore(env: &mut Env, var: &str, saved: Option<RtVal>) {
    match saved {
        Some(v) => {
            env.insert(var.to_string(), v);
        }
        None => {
            env.remove(var);
        }
    }
}

fn resolve_var_path(
    plan: &ExecutionPlan,
    scopes: &[ScopeRt],
    env: &Env,
    var: &str,
    steps: &[String],
) -> Result<Vec<RtVal>, RunError> {
    let start = env
        .get(var)
        .cloned()
        .ok_or_else(|| internal(format!("${var} is not bound")))?;
    let mut frontier = vec![start];
    for step in steps {
        let mut next = Vec::new();
        for v in &frontier {
            next.extend(children_of(plan, scopes, v, step)?);
        }
        frontier = next;
    }
    Ok(frontier)
}

fn children_of(
    plan: &ExecutionPlan,
    scopes: &[ScopeRt],
    v: &RtVal,
    step: &str,
) -> Result<Vec<RtVal>, RunError> {
    match v {
        RtVal::Scope(sid) => {
            let spec = &plan.scopes[*sid];
            if spec.tree.nodes[0].marked {
                let buf = buffer_of(scopes, *sid)?;
                let events = &buf.nodes[0].events;
                let (lo, hi) = capture_interior(&spec.kind, events, buf.root_complete);
                slice_children(events, *sid, 0, lo, hi, step)
            } else {
                node_children(plan, scopes, *sid, 0, step)
            }
        }
        RtVal::Node { sid, node } => {
            let buf = buffer_of(scopes, *sid)?;
            let pn = buf.nodes[*node].plan_node;
            if plan.scopes[*sid].tree.nodes[pn].marked {
                let events = &buf.nodes[*node].events;
                if events.len() < 2 {
                    return Ok(Vec::new());
                }
                slice_children(events, *sid, *node, 1, events.len() - 1, step)
            } else {
                node_children(plan, scopes, *sid, *node, step)
            }
        }
        RtVal::Slice { sid, node, lo, hi } => {
            let buf = buffer_of(scopes, *sid)?;
            let events = &buf.nodes[*node].events;
            slice_children(events, *sid, *node, lo + 1, *hi, step)
        }
    }
}

fn buffer_of(scopes: &[ScopeRt], sid: usize) -> Result<&BufferInstance, RunError> {
    scopes[sid]
        .buffer
        .as_ref()
        .ok_or_else(|| internal("evaluation reached a scope without storage"))
}

/// The event range holding a captured root's children. The document node
/// has no tags of its own; an element capture starts with its start tag,
/// and ends with its end tag once complete.
fn capture_interior(kind: &NodeKind, events: &[XmlEvent], complete: bool) -> (usize, usize) {
    match kind {
        NodeKind::Document => (0, events.len()),
        NodeKind::Element(_) => {
            let hi = if complete {
                events.len().saturating_sub(1)
            } else {
                events.len()
            };
            (1.min(hi), hi)
        }
    }
}

/// Scans `events[lo..hi]` for complete top-level `step` elements.
fn slice_children(
    events: &[XmlEvent],
    sid: usize,
    node: usize,
    lo: usize,
    hi: usize,
    step: &str,
) -> Result<Vec<RtVal>, RunError> {
    let mut out = Vec::new();
    let mut depth = 0usize;
    let mut open: Option<usize> = None;
    for i in lo..hi {
        match &events[i] {
            XmlEvent::Start(name) => {
                if depth == 0 && name == step {
                    open = Some(i);
                }
                depth += 1;
            }
            XmlEvent::End(_) => {
                depth = depth
                    .checked_sub(1)
                    .ok_or_else(|| internal("captured subtree is unbalanced"))?;
                if depth == 0 {
                    if let Some(start) = open.take() {
                        out.push(RtVal::Slice {
                            sid,
                            node,
                            lo: start,
                            hi: i,
                        });
                    }
                }
            }
            XmlEvent::Text(_) => {}
        }
    }
    if open.is_some() {
        return Err(internal("captured subtree ends inside a child"));
    }
    Ok(out)
}

fn node_children(
    plan: &ExecutionPlan,
    scopes: &[ScopeRt],
    sid: usize,
    node: usize,
    step: &str,
) -> Result<Vec<RtVal>, RunError> {
    let buf = buffer_of(scopes, sid)?;
    let pn = buf.nodes[node].plan_node;
    let tree = &plan.scopes[sid].tree;
    let Some(&pc) = tree.nodes[pn].children.get(step) else {
        return Err(internal(format!(
            "no storage for `{step}` children along this path"
        )));
    };
    Ok(buf.nodes[node]
        .children
        .iter()
        .copied()
        .filter(|&c| buf.nodes[c].plan_node == pc)
        .map(|c| RtVal::Node { sid, node: c })
        .collect())
}

/// Concatenated character data of a value's whole subtree.
fn text_value(plan: &ExecutionPlan, scopes: &[ScopeRt], v: &RtVal) -> Result<String, RunError> {
    let buf;
    let (events, lo, hi) = match v {
        RtVal::Scope(sid) => {
            let spec = &plan.scopes[*sid];
            if !spec.tree.nodes[0].marked {
                return Err(internal("text of a scope whose subtree is not stored"));
            }
            buf = buffer_of(scopes, *sid)?;
            let events = &buf.nodes[0].events;
            (events, 0, events.len())
        }
        RtVal::Node { sid, node } => {
            buf = buffer_of(scopes, *sid)?;
            let pn = buf.nodes[*node].plan_node;
            if !plan.scopes[*sid].tree.nodes[pn].marked {
                return Err(internal("text of a node whose subtree is not stored"));
            }
            let events = &buf.nodes[*node].events;
            (events, 0, events.len())
        }
        RtVal::Slice { sid, node, lo, hi } => {
            buf = buffer_of(scopes, *sid)?;
            (&buf.nodes[*node].events, *lo, *hi + 1)
        }
    };
    let mut out = String::new();
    for ev in &events[lo..hi] {
        if let XmlEvent::Text(s) = ev {
            out.push_str(s);
        }
    }
    Ok(out)
}

/// Serializes a stored subtree. A marked scope root output before its end
/// event streamed gets its end tag synthesized — its remaining children
/// were all ruled out when the handler's set went past.
fn serialize_val(
    plan: &ExecutionPlan,
    scopes: &[ScopeRt],
    v: &RtVal,
    out: &mut String,
) -> Result<(), RunError> {
    match v {
        RtVal::Scope(sid) => {
            let spec = &plan.scopes[*sid];
            if !spec.tree.nodes[0].marked {
                return Err(internal("output of a scope whose subtree is not stored"));
            }
            let buf = buffer_of(scopes, *sid)?;
            for ev in &buf.nodes[0].events {
                write_event(ev, out);
            }
            if let NodeKind::Element(name) = &spec.kind {
                if !buf.root_complete {
                    write_event(&XmlEvent::End(name.clone()), out);
                }
            }
            Ok(())
        }
        RtVal::Node { sid, node } => {
            let buf = buffer_of(scopes, *sid)?;
            let pn = buf.nodes[*node].plan_node;
            if !plan.scopes[*sid].tree.nodes[pn].marked {
                return Err(internal("output of a node whose subtree is not stored"));
            }
            if !buf.nodes[*node].complete {
                return Err(internal("output of a subtree still streaming"));
            }
            for ev in &buf.nodes[*node].events {
                write_event(ev, out);
            }
            Ok(())
        }
        RtVal::Slice { sid, node, lo, hi } => {
            let buf = buffer_of(scopes, *sid)?;
            for ev in &buf.nodes[*node].events[*lo..=*hi] {
                write_event(ev, out);
            }
            Ok(())
        }
    }
}

fn eval_cond(
    plan: &ExecutionPlan,
    scopes: &[ScopeRt],
    cond: &Cond,
    env: &Env,
    simple: Option<&SimpleView<'_>>,
) -> Result<bool, RunError> {
    match cond {
        Cond::True => Ok(true),
        Cond::And(a, b) => {
            Ok(eval_cond(plan, scopes, a, env, simple)? && eval_cond(plan, scopes, b, env, simple)?)
        }
        Cond::Or(a, b) => {
            Ok(eval_cond(plan, scopes, a, env, simple)? || eval_cond(plan, scopes, b, env, simple)?)
        }
        Cond::Not(a) => Ok(!eval_cond(plan, scopes, a, env, simple)?),
        Cond::Exists(vp) => atom_value(plan, scopes, env, simple, vp, &AtomTest::Exists),
        Cond::CmpLit { lhs, op, rhs } => atom_value(
            plan,
            scopes,
            env,
            simple,
            lhs,
            &AtomTest::Cmp(*op, rhs.clone()),
        ),
        Cond::CmpPath { lhs, op, rhs } => {
            let ls = path_values(plan, scopes, env, simple, lhs)?;
            let rs = path_values(plan, scopes, env, simple, rhs)?;
            Ok(ls.iter().any(|a| rs.iter().any(|b| compare(a, *op, b))))
        }
    }
}

/// Resolves an existence or comparison atom: from its precomputed flag when
/// the plan assigned one, directly against stored data otherwise.
fn atom_value(
    plan: &ExecutionPlan,
    scopes: &[ScopeRt],
    env: &Env,
    simple: Option<&SimpleView<'_>>,
    vp: &VarPath,
    test: &AtomTest,
) -> Result<bool, RunError> {
    let steps = vp.path.steps();
    if let Some(sv) = simple {
        if vp.var == sv.var {
            let slot = sv
                .spec
                .atoms
                .iter()
                .position(|a| a.path == steps && a.test == *test)
                .ok_or_else(|| internal(format!("no flag for a test on ${}", vp.var)))?;
            return Ok(sv.rt.flags[slot]);
        }
    }
    match env.get(&vp.var) {
        Some(RtVal::Scope(sid)) => {
            if let Some(slot) = plan.scopes[*sid].tree.nodes[0].atom_slot(steps, test) {
                return Ok(scopes[*sid].flags[slot]);
            }
            direct_test(plan, scopes, &RtVal::Scope(*sid), steps, test)
        }
        Some(RtVal::Node { sid, node }) => {
            let buf = buffer_of(scopes, *sid)?;
            let pn = buf.nodes[*node].plan_node;
            if let Some(slot) = plan.scopes[*sid].tree.nodes[pn].atom_slot(steps, test) {
                return Ok(buf.nodes[*node].flags[slot]);
            }
            direct_test(
                plan,
                scopes,
                &RtVal::Node {
                    sid: *sid,
                    node: *node,
                },
                steps,
                test,
            )
        }
        Some(slice @ RtVal::Slice { .. }) => {
            let slice = slice.clone();
            direct_test(plan, scopes, &slice, steps, test)
        }
        None => Err(internal(format!("${} is not bound", vp.var))),
    }
}

fn direct_test(
    plan: &ExecutionPlan,
    scopes: &[ScopeRt],
    v: &RtVal,
    steps: &[String],
    test: &AtomTest,
) -> Result<bool, RunError> {
    let mut frontier = vec![v.clone()];
    for step in steps {
        let mut next = Vec::new();
        for f in &frontier {
            next.extend(children_of(plan, scopes, f, step)?);
        }
        frontier = next;
    }
    match test {
        AtomTest::Exists => Ok(!frontier.is_empty()),
        AtomTest::Cmp(op, rhs) => {
            for t in &frontier {
                if compare(&text_value(plan, scopes, t)?, *op, rhs) {
                    return Ok(true);
                }
            }
            Ok(false)
        }
    }
}

/// The value list of one comparison operand.
fn path_values(
    plan: &ExecutionPlan,
    scopes: &[ScopeRt],
    env: &Env,
    simple: Option<&SimpleView<'_>>,
    vp: &VarPath,
) -> Result<Vec<String>, RunError> {
    let steps = vp.path.steps();
    if let Some(sv) = simple {
        if vp.var == sv.var {
            let slot = sv
                .spec
                .value_paths
                .iter()
                .position(|p| p == steps)
                .ok_or_else(|| internal(format!("no collected values for ${}", vp.var)))?;
            return Ok(sv.rt.values[slot].clone());
        }
    }
    let targets = resolve_var_path(plan, scopes, env, &vp.var, steps)?;
    targets
        .iter()
        .map(|t| text_value(plan, scopes, t))
        .collect()
}
