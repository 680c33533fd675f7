//! Validation with punctuation: passes the event stream through while
//! stepping one content-model validator per open element, and injects
//! [`Punctuated::FirstPast`] markers at the earliest stream position where a
//! registered label set can no longer produce further children.
//!
//! Marker placement relative to the surrounding events is what downstream
//! dispatch relies on:
//!
//! * a set that becomes past *because* child `c` arrives is announced
//!   **between** the previous sibling's end and `c`'s start event, tagged
//!   `with_child`: consumers needing the set's data must wait for `c`'s end;
//! * a set still live when the element closes fires just **before** the end
//!   event (the end-of-children fallback);
//! * a set already past before any child fires right **after** the start
//!   event — except inside text-only elements, where it is held back until
//!   just before the end event so that the element's character data has
//!   streamed by the time a handler runs.

use std::collections::{BTreeSet, HashMap, VecDeque};

use thiserror::Error;

use crate::schema::{NodeKind, PastTable, Schema, ValidationStepError, ValidatorState};

use super::token::{TokenError, XmlEvent};

/// One waited-on label set, owned by a plan variable ranging over `kind`.
#[derive(Debug, Clone)]
pub struct Registration {
    pub var: String,
    pub kind: NodeKind,
    pub symbols: BTreeSet<String>,
}

/// When, relative to the owner's child sequence, a set became past. A
/// consumer needs this to fire handlers in the right output order and to
/// know whether the set's data has fully streamed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MarkerTiming {
    /// Past before any child (position 0); emitted right after the owner's
    /// start event (or, for text-only elements, held to the end so the
    /// character data streams first).
    Entry,
    /// Became past on the child whose start event immediately follows.
    /// `completes` is true when that child's label belongs to the set — its
    /// subtree still contributes the set's data, which is therefore only
    /// complete at the child's end event.
    Transition { completes: bool },
    /// Still live when the owner closed; emitted just before the owner's
    /// end event (the end-of-children fallback).
    Fallback,
}

/// A stream event or an injected punctuation marker. `depth` is the stack
/// depth of the element whose child sequence the set ranges over (the
/// document node is depth 0), which lets the dispatcher route markers to the
/// right open scope even when elements of the same kind nest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Punctuated {
    Event(XmlEvent),
    FirstPast {
        reg: usize,
        depth: usize,
        timing: MarkerTiming,
    },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StreamError {
    #[error(transparent)]
    Token(#[from] TokenError),
    #[error("invalid document at `{path}`: {source}")]
    Validation {
        path: String,
        source: ValidationStepError,
    },
    #[error("invalid document at `{path}`: {detail}")]
    Structure { path: String, detail: String },
}

/// Registrations grouped by owner kind, with their past tables built against
/// that kind's automaton.
struct KindRegs {
    ids: Vec<usize>,
    tables: Vec<PastTable>,
}

struct OpenElement {
    name: String, // empty for the document node
    kind: NodeKind,
    text_only: bool,
    validator: ValidatorState,
    /// Position-0 markers held back in a text-only element.
    deferred: Vec<usize>,
}

pub struct Punctuator<'s, I> {
    schema: &'s Schema,
    input: I,
    sets: Vec<BTreeSet<String>>,
    by_kind: HashMap<NodeKind, KindRegs>,
    stack: Vec<OpenElement>,
    queue: VecDeque<Punctuated>,
    /// Depth offset: the document frame of a full run sits at 0; subtree
    /// replays start deeper.
    base_depth: usize,
    /// Subtree mode: accept exactly one element (no document validator).
    subtree: bool,
    finished: bool,
    failed: bool,
}

impl<'s, I> Punctuator<'s, I>
where
    I: Iterator<Item = Result<XmlEvent, TokenError>>,
{
    /// Punctuates a whole document; the root element is checked against the
    /// schema's document automaton.
    pub fn new(schema: &'s Schema, regs: &[Registration], input: I) -> Punctuator<'s, I> {
        let mut p = Punctuator {
            schema,
            input,
            sets: regs.iter().map(|r| r.symbols.clone()).collect(),
            by_kind: group(schema, regs),
            stack: Vec::new(),
            queue: VecDeque::new(),
            base_depth: 0,
            subtree: false,
            finished: false,
            failed: false,
        };
        p.open(String::new(), NodeKind::Document);
        p
    }

    /// Punctuates one already-validated element subtree whose root sits at
    /// stack depth `root_depth`; used to replay recorded child events.
    pub fn subtree(
        schema: &'s Schema,
        regs: &[Registration],
        input: I,
        root_depth: usize,
    ) -> Punctuator<'s, I> {
        Punctuator {
            schema,
            input,
            sets: regs.iter().map(|r| r.symbols.clone()).collect(),
            by_kind: group(schema, regs),
            stack: Vec::new(),
            queue: VecDeque::new(),
            base_depth: root_depth,
            subtree: true,
            finished: false,
            failed: false,
        }
    }

    fn path(&self) -> String {
        if self.stack.len() <= 1 && !self.subtree {
            "/".to_string()
        } else {
            let mut s = String::new();
            for e in &self.stack {
                if !e.name.is_empty() {
                    s.push('/');
                    s.push_str(&e.name);
                }
            }
            s
        }
    }

    fn depth_of_top(&self) -> usize {
        self.base_depth + self.stack.len() - 1
    }

    /// Pushes a frame and queues its position-0 markers (deferred when the
    /// element holds character data instead of children).
    fn open(&mut self, name: String, kind: NodeKind) {
        let text_only = match &kind {
            NodeKind::Element(n) => self.schema.is_text(n),
            NodeKind::Document => false,
        };
        let (validator, at0_ids) = match self.by_kind.get(&kind) {
            Some(kr) => {
                let (v, at0) = ValidatorState::start(&kr.tables);
                (v, at0.into_iter().map(|i| kr.ids[i]).collect())
            }
            None => (ValidatorState::start(&[]).0, Vec::new()),
        };
        self.stack.push(OpenElement {
            name,
            kind,
            text_only,
            validator,
            deferred: Vec::new(),
        });
        let depth = self.depth_of_top();
        if text_only {
            self.stack.last_mut().expect("just pushed").deferred = at0_ids;
        } else {
            for reg in at0_ids {
                self.queue.push_back(Punctuated::FirstPast {
                    reg,
                    depth,
                    timing: MarkerTiming::Entry,
                });
            }
        }
    }

    fn fail(&mut self, err: StreamError) -> Option<Result<Punctuated, StreamError>> {
        self.failed = true;
        Some(Err(err))
    }

    fn structure_error(&mut self, detail: impl Into<String>) -> Option<Result<Punctuated, StreamError>> {
        let path = self.path();
        self.fail(StreamError::Structure {
            path,
            detail: detail.into(),
        })
    }

    fn handle_start(&mut self, name: String) -> Option<Result<Punctuated, StreamError>> {
        if self.stack.is_empty() {
            // Subtree mode before the first element, or content after the
            // subtree closed.
            if self.subtree && !self.finished {
                let kind = NodeKind::Element(name.clone());
                self.queue.push_back(Punctuated::Event(XmlEvent::Start(name.clone())));
                self.open(name, kind);
                return self.queue.pop_front().map(Ok);
            }
            return self.structure_error(format!("unexpected element `{name}` after the root closed"));
        }
        // Step the parent's validator; its newly-past sets fire before the
        // child's start event. Field accesses only inside this block: `top`
        // mutably borrows the stack.
        let step_result: Result<Vec<usize>, Option<ValidationStepError>> = {
            let top = self.stack.last_mut().expect("nonempty");
            let parent_name = if top.name.is_empty() {
                "(document)".to_string()
            } else {
                top.name.clone()
            };
            match (self.by_kind.get(&top.kind), self.schema.automaton(&top.kind)) {
                (_, None) => Err(None), // parent element never declared
                (Some(kr), Some(g)) => top
                    .validator
                    .step(&parent_name, g, &kr.tables, &name)
                    .map(|newly| newly.into_iter().map(|i| kr.ids[i]).collect())
                    .map_err(Some),
                (None, Some(g)) => top
                    .validator
                    .step(&parent_name, g, &[], &name)
                    .map(|_| Vec::new())
                    .map_err(Some),
            }
        };
        let fired = match step_result {
            Ok(f) => f,
            Err(Some(e)) => {
                let path = self.path();
                return self.fail(StreamError::Validation { path, source: e });
            }
            Err(None) => {
                let parent = self.stack.last().expect("nonempty").name.clone();
                return self.structure_error(format!(
                    "element `{parent}` is not declared; its content cannot be validated"
                ));
            }
        };
        let parent_depth = self.depth_of_top();
        for reg in fired {
            let completes = self.sets[reg].contains(&name);
            self.queue.push_back(Punctuated::FirstPast {
                reg,
                depth: parent_depth,
                timing: MarkerTiming::Transition { completes },
            });
        }
        self.queue
            .push_back(Punctuated::Event(XmlEvent::Start(name.clone())));
        self.open(name.clone(), NodeKind::Element(name));
        self.queue.pop_front().map(Ok)
    }

    fn handle_end(&mut self, name: String) -> Option<Result<Punctuated, StreamError>> {
        let Some(top) = self.stack.last() else {
            return self.structure_error(format!("unmatched closing tag `</{name}>`"));
        };
        if top.name != name {
            let open = if top.name.is_empty() {
                "the document".to_string()
            } else {
                format!("`<{}>`", top.name)
            };
            return self.structure_error(format!("closing tag `</{name}>` does not match {open}"));
        }
        let depth = self.depth_of_top();
        // Deferred position-0 markers and never-fired sets both fire at the
        // end-of-children fallback, in registration order.
        let top = self.stack.last().expect("checked");
        let mut fallback: Vec<usize> = top.deferred.clone();
        if let Some(kr) = self.by_kind.get(&top.kind) {
            for (i, reg) in kr.ids.iter().enumerate() {
                if !top.validator.has_fired(i) && !fallback.contains(reg) {
                    fallback.push(*reg);
                }
            }
        }
        for reg in fallback {
            self.queue.push_back(Punctuated::FirstPast {
                reg,
                depth,
                timing: MarkerTiming::Fallback,
            });
        }
        let top = self.stack.last().expect("checked");
        if let Some(g) = self.schema.automaton(&top.kind) {
            if let Err(e) = top.validator.finish(&name, g) {
                let path = self.path();
                return self.fail(StreamError::Validation { path, source: e });
            }
        }
        self.stack.pop();
        self.queue.push_back(Punctuated::Event(XmlEvent::End(name)));
        if self.subtree && self.stack.is_empty() {
            self.finished = true;
        }
        self.queue.pop_front().map(Ok)
    }

    fn handle_text(&mut self, text: String) -> Option<Result<Punctuated, StreamError>> {
        let Some(top) = self.stack.last() else {
            return self.structure_error("character data outside the root element");
        };
        if !top.text_only {
            let name = if top.name.is_empty() {
                "the document".to_string()
            } else {
                format!("`{}`", top.name)
            };
            return self.structure_error(format!(
                "character data not allowed in {name} (element content only)"
            ));
        }
        Some(Ok(Punctuated::Event(XmlEvent::Text(text))))
    }

    fn handle_eof(&mut self) -> Option<Result<Punctuated, StreamError>> {
        self.finished = true;
        if self.subtree {
            if !self.stack.is_empty() {
                return self.structure_error("replayed subtree ended before its root closed");
            }
            return None;
        }
        if self.stack.len() > 1 {
            let open = self.stack.last().expect("nonempty").name.clone();
            return self.structure_error(format!("input ended with `<{open}>` still open"));
        }
        // Close out the document frame: end-of-children markers, then the
        // root-element completeness check.
        let doc = self.stack.last().expect("document frame");
        if let Some(kr) = self.by_kind.get(&NodeKind::Document) {
            let mut fallback = Vec::new();
            for (i, reg) in kr.ids.iter().enumerate() {
                if !doc.validator.has_fired(i) {
                    fallback.push(*reg);
                }
            }
            for reg in fallback {
                self.queue.push_back(Punctuated::FirstPast {
                    reg,
                    depth: 0,
                    timing: MarkerTiming::Fallback,
                });
            }
        }
        let doc = self.stack.last().expect("document frame");
        let g = self
            .schema
            .automaton(&NodeKind::Document)
            .expect("document automaton always exists");
        if let Err(e) = doc.validator.finish("(document)", g) {
            let path = self.path();
            return self.fail(StreamError::Validation { path, source: e });
        }
        self.stack.pop();
        self.queue.pop_front().map(Ok)
    }
}

fn group(schema: &Schema, regs: &[Registration]) -> HashMap<NodeKind, KindRegs> {
    let mut by_kind: HashMap<NodeKind, KindRegs> = HashMap::new();
    for (id, reg) in regs.iter().enumerate() {
        // Sets on undeclared kinds can never fire: no element of that kind
        // passes validation (arises only with never-firing dead-loop
        // handlers compiled in tolerant mode).
        let Some(g) = schema.automaton(&reg.kind) else {
            continue;
        };
        let entry = by_kind.entry(reg.kind.clone()).or_insert_with(|| KindRegs {
            ids: Vec::new(),
            tables: Vec::new(),
        });
        entry.ids.push(id);
        entry.tables.push(PastTable::new(g, reg.symbols.clone()));
    }
    by_kind
}

impl<I> Iterator for Punctuator<'_, I>
where
    I: Iterator<Item = Result<XmlEvent, TokenError>>,
{
    type Item = Result<Punctuated, StreamError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        if let Some(q) = self.queue.pop_front() {
            return Some(Ok(q));
        }
        if self.finished {
            return None;
        }
        match self.input.next() {
            Some(Err(e)) => self.fail(e.into()),
            Some(Ok(XmlEvent::Start(name))) => self.handle_start(name),
            Some(Ok(XmlEvent::End(name))) => self.handle_end(name),
            Some(Ok(XmlEvent::Text(text))) => self.handle_text(text),
            None => self.handle_eof(),
        }
    }
}

/// Convenience wrapper: punctuate a full in-memory event list.
pub fn punctuate_all(
    schema: &Schema,
    regs: &[Registration],
    events: Vec<XmlEvent>,
) -> Result<Vec<Punctuated>, StreamError> {
    Punctuator::new(schema, regs, events.into_iter().map(Ok)).collect()
}
