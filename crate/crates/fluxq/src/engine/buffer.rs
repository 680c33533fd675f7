//! Runtime buffers: one arena per open scope instance, shaped by the plan's
//! storage tree. Unmarked nodes cost two events (their boundary tags),
//! marked nodes store their whole subtree. Statistics track high-water
//! marks per buffer and across the run.

use std::fmt;
use std::time::Duration;

use super::plan::PlanTree;
use super::token::XmlEvent;

/// One stored element instance.
#[derive(Debug)]
pub struct BufNode {
    /// The storage-tree node this instance belongs to.
    pub plan_node: usize,
    /// Child instances in document order.
    pub children: Vec<usize>,
    /// The instance's events; only marked nodes store any.
    pub events: Vec<XmlEvent>,
    /// Whether the instance's end event has been seen.
    pub complete: bool,
    /// Per-instance condition flags, one per atom of the plan node.
    pub flags: Vec<bool>,
}

/// The storage arena of one scope instance; node 0 stands for the scope's
/// own element (its boundaries are positional context and are not counted).
#[derive(Debug)]
pub struct BufferInstance {
    pub nodes: Vec<BufNode>,
    /// Set once a marked root's own end event has been captured.
    pub root_complete: bool,
    cur_events: usize,
    cur_bytes: usize,
    pub hwm_events: usize,
    pub hwm_bytes: usize,
}

/// An event/byte delta to roll into the run-wide accounting.
pub type Delta = (usize, usize);

impl BufferInstance {
    pub fn new(tree: &PlanTree) -> BufferInstance {
        BufferInstance {
            nodes: vec![BufNode {
                plan_node: 0,
                children: Vec::new(),
                events: Vec::new(),
                complete: false,
                flags: vec![false; tree.nodes[0].atoms.len()],
            }],
            root_complete: false,
            cur_events: 0,
            cur_bytes: 0,
            hwm_events: 0,
            hwm_bytes: 0,
        }
    }

    pub fn cur_events(&self) -> usize {
        self.cur_events
    }

    pub fn cur_bytes(&self) -> usize {
        self.cur_bytes
    }

    /// Adds a child instance under `parent`. Unmarked instances are charged
    /// their start tag here; marked ones are charged per captured event.
    pub fn add_child(
        &mut self,
        parent: usize,
        plan_node: usize,
        atoms: usize,
        marked: bool,
        start: &XmlEvent,
    ) -> (usize, Delta) {
        let id = self.nodes.len();
        self.nodes.push(BufNode {
            plan_node,
            children: Vec::new(),
            events: Vec::new(),
            complete: false,
            flags: vec![false; atoms],
        });
        self.nodes[parent].children.push(id);
        let delta = if marked {
            (0, 0)
        } else {
            (1, start.byte_size())
        };
        self.bump(delta);
        (id, delta)
    }

    /// Appends a captured event to a marked node.
    pub fn append(&mut self, node: usize, ev: XmlEvent) -> Delta {
        let delta = (1, ev.byte_size());
        self.nodes[node].events.push(ev);
        self.bump(delta);
        delta
    }

    /// Completes an unmarked node, charging its end tag.
    pub fn finish(&mut self, node: usize, end: &XmlEvent) -> Delta {
        let delta = (1, end.byte_size());
        self.nodes[node].complete = true;
        self.bump(delta);
        delta
    }

    /// Completes a marked node's capture (its end event is already stored).
    pub fn seal(&mut self, node: usize) {
        self.nodes[node].complete = true;
        if node == 0 {
            self.root_complete = true;
        }
    }

    fn bump(&mut self, (de, db): Delta) {
        self.cur_events += de;
        self.cur_bytes += db;
        self.hwm_events = self.hwm_events.max(self.cur_events);
        self.hwm_bytes = self.hwm_bytes.max(self.cur_bytes);
    }
}

/// Lifetime and peak-size counters for one buffer (or the replay store).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BufferStats {
    pub var: String,
    pub fills: usize,
    pub frees: usize,
    pub events_hwm: usize,
    pub bytes_hwm: usize,
}

/// Statistics for one run: per-buffer rows (ending with the `(replay)`
/// store for recorded subtrees), the concurrent high-water mark across all
/// stores, and wall time.
#[derive(Debug, Clone, Default)]
pub struct RunStats {
    pub buffers: Vec<BufferStats>,
    pub total_events_hwm: usize,
    pub total_bytes_hwm: usize,
    pub elapsed: Duration,
}

impl fmt::Display for RunStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<16} {:>6} {:>6} {:>12} {:>12}",
            "buffer", "fills", "frees", "events hwm", "bytes hwm"
        )?;
        for b in &self.buffers {
            writeln!(
                f,
                "{:<16} {:>6} {:>6} {:>12} {:>12}",
                b.var, b.fills, b.frees, b.events_hwm, b.bytes_hwm
            )?;
        }
        writeln!(
            f,
            "{:<16} {:>6} {:>6} {:>12} {:>12}",
            "total",
            self.buffers.iter().map(|b| b.fills).sum::<usize>(),
            self.buffers.iter().map(|b| b.frees).sum::<usize>(),
            self.total_events_hwm,
            self.total_bytes_hwm
        )?;
        write!(f, "elapsed: {:?}", self.elapsed)
    }
}
