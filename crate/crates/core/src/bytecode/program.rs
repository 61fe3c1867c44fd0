use std::fmt;

use thiserror::Error;

use super::spec::{FormatSpec, NetBinding, SNAPSHOT_NODE};
use crate::util::fnv1a64;
use crate::wire::{Reader, WireError, Writer};

pub const MAGIC: &[u8; 4] = b"NXB1";

/// One node invocation. `args` are slot indices: op `i` that produces a
/// handle defines slot `i`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Op {
    pub node: u16,
    pub args: Vec<u32>,
    pub payload: Vec<u8>,
}

/// Flat sequence of ops plus an optional snapshot marker: `Some(k)` means
/// "take an incremental snapshot after the first `k` ops".
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct Program {
    pub ops: Vec<Op>,
    pub snapshot_index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    Empty,
    UnknownNode { op: usize, node: u16 },
    ArgCount { op: usize, expected: usize, got: usize },
    ForwardReference { op: usize, slot: u32 },
    NotAHandle { op: usize, slot: u32 },
    KindMismatch { op: usize, slot: u32 },
    UnexpectedPayload { op: usize },
    SnapshotIndex { index: usize, len: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Empty => write!(f, "empty program"),
            Violation::UnknownNode { op, node } => write!(f, "op {op}: unknown node {node}"),
            Violation::ArgCount { op, expected, got } => {
                write!(f, "op {op}: expected {expected} handle args, got {got}")
            }
            Violation::ForwardReference { op, slot } => {
                write!(f, "op {op}: forward reference to slot {slot}")
            }
            Violation::NotAHandle { op, slot } => {
                write!(f, "op {op}: slot {slot} produces no handle")
            }
            Violation::KindMismatch { op, slot } => {
                write!(f, "op {op}: slot {slot} has the wrong handle kind")
            }
            Violation::UnexpectedPayload { op } => {
                write!(f, "op {op}: payload on a node without a data field")
            }
            Violation::SnapshotIndex { index, len } => {
                write!(f, "snapshot index {index} outside 1..{len}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProgramError {
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("malformed program at byte {offset}: {what}")]
    Malformed { offset: usize, what: &'static str },
    #[error("program violates the format spec: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
}

impl Program {
    pub fn new(ops: Vec<Op>) -> Self {
        Program {
            ops,
            snapshot_index: None,
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn with_snapshot(&self, index: usize) -> Program {
        Program {
            ops: self.ops.clone(),
            snapshot_index: Some(index),
        }
    }

    pub fn without_snapshot(&self) -> Program {
        Program {
            ops: self.ops.clone(),
            snapshot_index: None,
        }
    }

    /// Checks kinds, ordering and the marker bound. Never panics.
    pub fn validate(&self, spec: &FormatSpec) -> Result<(), Vec<Violation>> {
        let mut out = Vec::new();
        if self.ops.is_empty() {
            out.push(Violation::Empty);
        }
        for (i, op) in self.ops.iter().enumerate() {
            let Some(node) = spec.node(op.node) else {
                out.push(Violation::UnknownNode { op: i, node: op.node });
                continue;
            };
            if node.borrows.len() != op.args.len() {
                out.push(Violation::ArgCount {
                    op: i,
                    expected: node.borrows.len(),
                    got: op.args.len(),
                });
            }
            for (&slot, &want) in op.args.iter().zip(&node.borrows) {
                if slot as usize >= i {
                    out.push(Violation::ForwardReference { op: i, slot });
                    continue;
                }
                let producer = spec.node(self.ops[slot as usize].node).and_then(|n| n.produces);
                match producer {
                    None => out.push(Violation::NotAHandle { op: i, slot }),
                    Some(k) if k != want => out.push(Violation::KindMismatch { op: i, slot }),
                    Some(_) => {}
                }
            }
            if node.data.is_none() && !op.payload.is_empty() {
                out.push(Violation::UnexpectedPayload { op: i });
            }
        }
        if let Some(k) = self.snapshot_index {
            if k == 0 || k >= self.ops.len() {
                out.push(Violation::SnapshotIndex {
                    index: k,
                    len: self.ops.len(),
                });
            }
        }
        if out.is_empty() {
            Ok(())
        } else {
            Err(out)
        }
    }

    /// NXB1 encoding: magic, u32 op count (marker included), then per op a
    /// u16 node id, u16 ref count, u32 refs and a u32-length payload. All
    /// integers little-endian; the marker is node 0xFFFF with no refs or
    /// payload.
    pub fn serialize(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.raw(MAGIC);
        let marker = self.snapshot_index.is_some() as u32;
        w.u32(self.ops.len() as u32 + marker);
        for (i, op) in self.ops.iter().enumerate() {
            if self.snapshot_index == Some(i) {
                w.u16(SNAPSHOT_NODE).u16(0).u32(0);
            }
            encode_op(&mut w, op);
        }
        if self.snapshot_index == Some(self.ops.len()) {
            w.u16(SNAPSHOT_NODE).u16(0).u32(0);
        }
        w.finish()
    }

    /// Structural decode without spec checks.
    pub fn decode(bytes: &[u8]) -> Result<Program, ProgramError> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(WireError::BadMagic.into());
        }
        let count = r.u32()? as usize;
        // Every op needs at least 8 bytes; cap the reservation accordingly.
        let mut ops = Vec::with_capacity(count.min(r.remaining() / 8));
        let mut snapshot_index = None;
        for _ in 0..count {
            let at = r.offset();
            let node = r.u16()?;
            let nrefs = r.u16()? as usize;
            if nrefs > r.remaining() / 4 {
                return Err(WireError::Truncated {
                    offset: r.offset(),
                    needed: nrefs * 4 - r.remaining(),
                }
                .into());
            }
            let args = (0..nrefs).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
            let payload = r.bytes()?.to_vec();
            if node == SNAPSHOT_NODE {
                if !args.is_empty() || !payload.is_empty() {
                    return Err(ProgramError::Malformed {
                        offset: at,
                        what: "snapshot marker with operands",
                    });
                }
                if snapshot_index.replace(ops.len()).is_some() {
                    return Err(ProgramError::Malformed {
                        offset: at,
                        what: "second snapshot marker",
                    });
                }
                continue;
            }
            ops.push(Op { node, args, payload });
        }
        r.expect_end()?;
        Ok(Program { ops, snapshot_index })
    }

    /// Decodes and validates against `spec`.
    pub fn parse(spec: &FormatSpec, bytes: &[u8]) -> Result<Program, ProgramError> {
        let p = Program::decode(bytes)?;
        p.validate(spec).map_err(ProgramError::Invalid)?;
        Ok(p)
    }

    /// Serialized bytes of the first `k` ops, used to check that a program
    /// shares the prefix an incremental snapshot was taken from.
    pub fn prefix_fingerprint(&self, k: usize) -> Vec<u8> {
        let mut w = Writer::new();
        for op in &self.ops[..k.min(self.ops.len())] {
            encode_op(&mut w, op);
        }
        w.finish()
    }

    pub fn content_hash(&self) -> u64 {
        fnv1a64(&self.serialize())
    }

    pub fn count_node(&self, node: u16) -> usize {
        self.ops.iter().filter(|o| o.node == node).count()
    }

    pub fn packet_count(&self, binding: &NetBinding) -> usize {
        self.count_node(binding.packet)
    }

    /// Op index just after the `k`-th packet op (1-based), i.e. the marker
    /// position that snapshots after sending that packet.
    pub fn op_index_after_packet(&self, binding: &NetBinding, k: usize) -> Option<usize> {
        if k == 0 {
            return None;
        }
        self.ops
            .iter()
            .enumerate()
            .filter(|(_, o)| o.node == binding.packet)
            .nth(k - 1)
            .map(|(i, _)| i + 1)
    }

    /// Inserts `op` at `pos`, renumbering references to later slots.
    pub fn insert_op(&mut self, pos: usize, op: Op) {
        for later in &mut self.ops[pos..] {
            for a in &mut later.args {
                if *a as usize >= pos {
                    *a += 1;
                }
            }
        }
        self.ops.insert(pos, op);
        if let Some(k) = self.snapshot_index.as_mut() {
            if pos < *k {
                *k += 1;
            }
        }
    }

    /// Removes the op at `pos`. Callers must ensure nothing references it.
    pub fn remove_op(&mut self, pos: usize) -> Op {
        let op = self.ops.remove(pos);
        for later in &mut self.ops[pos..] {
            for a in &mut later.args {
                if *a as usize > pos {
                    *a -= 1;
                }
            }
        }
        if let Some(k) = self.snapshot_index.as_mut() {
            if pos < *k {
                *k -= 1;
            }
        }
        op
    }
}

fn encode_op(w: &mut Writer, op: &Op) {
    w.u16(op.node).u16(op.args.len() as u16);
    for &a in &op.args {
        w.u32(a);
    }
    w.bytes(&op.payload);
}
