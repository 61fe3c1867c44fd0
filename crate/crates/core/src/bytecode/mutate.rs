//! Structure-aware mutation of bytecode programs.
//!
//! Every mutation leaves ops before `fuzz_from` untouched and keeps the
//! program valid: only packet-like ops (data, no produced handle) are moved,
//! duplicated or dropped, and new ops only borrow handles produced earlier.

use rand::seq::SliceRandom;
use rand::Rng;

use super::program::{Op, Program};
use super::spec::FormatSpec;

/// Payloads never grow past this.
pub const MAX_PAYLOAD: usize = 4096;

const INTERESTING_8: [u8; 9] = [0x80, 0xff, 0, 1, 16, 32, 64, 100, 127];
const INTERESTING_16: [u16; 10] = [0x8000, 0xff7f, 0xffff, 0, 1, 128, 255, 256, 512, 1000];
const INTERESTING_32: [u32; 8] = [0x8000_0000, 0xfa00_00fa, 0xffff_ffff, 0, 1, 0x7fff_ffff, 65535, 65536];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MutationKind {
    Havoc,
    Duplicate,
    Drop,
    Swap,
    Splice,
    Append,
}

impl MutationKind {
    pub const ALL: [MutationKind; 6] = [
        MutationKind::Havoc,
        MutationKind::Duplicate,
        MutationKind::Drop,
        MutationKind::Swap,
        MutationKind::Splice,
        MutationKind::Append,
    ];
}

/// Source of donor programs for splicing.
pub trait Corpus {
    fn len(&self) -> usize;
    fn program(&self, i: usize) -> &Program;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Corpus for [Program] {
    fn len(&self) -> usize {
        <[Program]>::len(self)
    }
    fn program(&self, i: usize) -> &Program {
        &self[i]
    }
}

impl Corpus for Vec<Program> {
    fn len(&self) -> usize {
        Vec::len(self)
    }
    fn program(&self, i: usize) -> &Program {
        &self[i]
    }
}

#[derive(Debug, Clone)]
pub struct Mutator<'s> {
    spec: &'s FormatSpec,
    /// Relative weights, indexed like [`MutationKind::ALL`].
    pub weights: [u32; 6],
    pub max_stack: usize,
}

impl<'s> Mutator<'s> {
    pub fn new(spec: &'s FormatSpec) -> Self {
        Self {
            spec,
            weights: [1; 6],
            max_stack: 8,
        }
    }

    fn packet_like(&self, op: &Op) -> bool {
        self.spec.node(op.node).is_some_and(|n| n.is_packet_like())
    }

    fn has_data(&self, op: &Op) -> bool {
        self.spec.node(op.node).is_some_and(|n| n.data.is_some())
    }

    fn suffix_positions(&self, p: &Program, from: usize, pred: impl Fn(&Op) -> bool) -> Vec<usize> {
        (from..p.ops.len()).filter(|&i| pred(&p.ops[i])).collect()
    }

    /// Applies a stack of 1..=max_stack mutations to the ops at or after
    /// `fuzz_from`, or after the snapshot marker if that comes later.
    pub fn mutate<R: Rng + ?Sized, C: Corpus + ?Sized>(
        &self,
        p: &Program,
        rng: &mut R,
        corpus: &C,
        fuzz_from: usize,
    ) -> Program {
        let fuzz_from = fuzz_from.max(p.snapshot_index.unwrap_or(0)).min(p.ops.len());
        let mut out = p.clone();
        let rounds = rng.gen_range(1..=self.max_stack.max(1));
        for _ in 0..rounds {
            let applicable: Vec<(MutationKind, u32)> = MutationKind::ALL
                .iter()
                .zip(self.weights)
                .filter(|&(&k, w)| w > 0 && self.applicable(k, &out, corpus, fuzz_from))
                .map(|(&k, w)| (k, w))
                .collect();
            let Ok(&(kind, _)) = applicable.choose_weighted(rng, |&(_, w)| w) else {
                break;
            };
            self.apply(kind, &mut out, rng, corpus, fuzz_from);
        }
        out
    }

    pub fn applicable<C: Corpus + ?Sized>(&self, kind: MutationKind, p: &Program, corpus: &C, from: usize) -> bool {
        let packets = || self.suffix_positions(p, from, |o| self.packet_like(o)).len();
        match kind {
            MutationKind::Havoc => !self.suffix_positions(p, from, |o| self.has_data(o)).is_empty(),
            MutationKind::Duplicate => packets() >= 1,
            MutationKind::Drop => packets() >= 2,
            MutationKind::Swap => packets() >= 2,
            MutationKind::Splice => packets() >= 1 && corpus_has_payload(self, corpus),
            MutationKind::Append => self.append_candidate(p, p.ops.len()).is_some(),
        }
    }

    /// Applies one mutation. A mutation that does not apply falls back to
    /// payload havoc, then to appending a packet, then to doing nothing.
    pub fn apply<R: Rng + ?Sized, C: Corpus + ?Sized>(
        &self,
        kind: MutationKind,
        p: &mut Program,
        rng: &mut R,
        corpus: &C,
        from: usize,
    ) -> MutationKind {
        let kind = if self.applicable(kind, p, corpus, from) {
            kind
        } else if self.applicable(MutationKind::Havoc, p, corpus, from) {
            MutationKind::Havoc
        } else if self.applicable(MutationKind::Append, p, corpus, from) {
            MutationKind::Append
        } else {
            return kind;
        };
        match kind {
            MutationKind::Havoc => {
                let pos = *self.suffix_positions(p, from, |o| self.has_data(o)).choose(rng).unwrap();
                havoc(&mut p.ops[pos].payload, rng);
            }
            MutationKind::Duplicate => {
                let pos = *self.suffix_positions(p, from, |o| self.packet_like(o)).choose(rng).unwrap();
                let op = p.ops[pos].clone();
                p.insert_op(pos + 1, op);
            }
            MutationKind::Drop => {
                let pos = *self.suffix_positions(p, from, |o| self.packet_like(o)).choose(rng).unwrap();
                p.remove_op(pos);
            }
            MutationKind::Swap => {
                let positions = self.suffix_positions(p, from, |o| self.packet_like(o));
                let picked: Vec<usize> = positions.choose_multiple(rng, 2).copied().collect();
                let (i, j) = (picked[0].min(picked[1]), picked[0].max(picked[1]));
                // Moving op j earlier is only valid if its refs precede i.
                if p.ops[j].args.iter().all(|&a| (a as usize) < i) {
                    p.ops.swap(i, j);
                } else {
                    let pj = std::mem::take(&mut p.ops[j].payload);
                    let pi = std::mem::replace(&mut p.ops[i].payload, pj);
                    p.ops[j].payload = pi;
                }
            }
            MutationKind::Splice => {
                let donor = random_corpus_payload(self, corpus, rng).unwrap();
                let positions = self.suffix_positions(p, from, |o| self.packet_like(o));
                let pos = *positions.choose(rng).unwrap();
                if rng.gen_bool(0.5) {
                    p.ops[pos].payload = donor;
                } else {
                    let mut op = p.ops[pos].clone();
                    op.payload = donor;
                    p.insert_op(pos + 1, op);
                }
            }
            MutationKind::Append => {
                let (node, kinds) = self.append_candidate(p, p.ops.len()).unwrap();
                let end = p.ops.len();
                let args = kinds
                    .iter()
                    .map(|&k| {
                        let slots = self.slots_of_kind(p, end, k);
                        *slots.choose(rng).unwrap()
                    })
                    .collect();
                let payload = match self.suffix_positions(p, 0, |o| o.node == node).choose(rng) {
                    Some(&i) if rng.gen_bool(0.75) => p.ops[i].payload.clone(),
                    _ => (0..rng.gen_range(1..=16)).map(|_| rng.gen()).collect(),
                };
                p.ops.push(Op { node, args, payload });
            }
        }
        kind
    }

    fn slots_of_kind(&self, p: &Program, before: usize, kind: super::spec::HandleKind) -> Vec<u32> {
        (0..before)
            .filter(|&i| self.spec.node(p.ops[i].node).and_then(|n| n.produces) == Some(kind))
            .map(|i| i as u32)
            .collect()
    }

    /// First packet-like node whose borrowed kinds all have a producer before
    /// `pos`.
    fn append_candidate(&self, p: &Program, pos: usize) -> Option<(u16, Vec<super::spec::HandleKind>)> {
        self.spec.nodes().iter().enumerate().find_map(|(i, n)| {
            let ok = n.is_packet_like() && n.borrows.iter().all(|&k| !self.slots_of_kind(p, pos, k).is_empty());
            ok.then(|| (i as u16, n.borrows.clone()))
        })
    }
}

fn corpus_has_payload<C: Corpus + ?Sized>(m: &Mutator<'_>, corpus: &C) -> bool {
    (0..corpus.len()).any(|i| {
        corpus
            .program(i)
            .ops
            .iter()
            .any(|o| m.packet_like(o) && !o.payload.is_empty())
    })
}

fn random_corpus_payload<R: Rng + ?Sized, C: Corpus + ?Sized>(m: &Mutator<'_>, corpus: &C, rng: &mut R) -> Option<Vec<u8>> {
    // Rejection sampling first, then a scan so sparse corpora still work.
    for _ in 0..8 {
        let prog = corpus.program(rng.gen_range(0..corpus.len()));
        let ops: Vec<&Op> = prog.ops.iter().filter(|o| m.packet_like(o) && !o.payload.is_empty()).collect();
        if let Some(op) = ops.choose(rng) {
            return Some(op.payload.clone());
        }
    }
    (0..corpus.len())
        .flat_map(|i| corpus.program(i).ops.iter())
        .find(|o| m.packet_like(o) && !o.payload.is_empty())
        .map(|o| o.payload.clone())
}

/// Byte-level havoc on one payload. Never leaves it empty.
pub fn havoc<R: Rng + ?Sized>(buf: &mut Vec<u8>, rng: &mut R) {
    if buf.is_empty() {
        buf.push(rng.gen());
        return;
    }
    let len = buf.len();
    match rng.gen_range(0..9) {
        0 => {
            let bit = rng.gen_range(0..len * 8);
            buf[bit / 8] ^= 1 << (bit % 8);
        }
        1 => {
            let i = rng.gen_range(0..len);
            buf[i] ^= 0xff;
        }
        2 => {
            let i = rng.gen_range(0..len);
            buf[i] = rng.gen();
        }
        3 => {
            let i = rng.gen_range(0..len);
            buf[i] = *INTERESTING_8.choose(rng).unwrap();
        }
        4 if len >= 2 => {
            let i = rng.gen_range(0..len - 1);
            let v = *INTERESTING_16.choose(rng).unwrap();
            let bytes = if rng.gen() { v.to_le_bytes() } else { v.to_be_bytes() };
            buf[i..i + 2].copy_from_slice(&bytes);
        }
        5 if len >= 4 => {
            let i = rng.gen_range(0..len - 3);
            let v = *INTERESTING_32.choose(rng).unwrap();
            let bytes = if rng.gen() { v.to_le_bytes() } else { v.to_be_bytes() };
            buf[i..i + 4].copy_from_slice(&bytes);
        }
        6 => {
            let i = rng.gen_range(0..len);
            let delta = rng.gen_range(1..=35u8);
            buf[i] = if rng.gen() { buf[i].wrapping_add(delta) } else { buf[i].wrapping_sub(delta) };
        }
        7 if len < MAX_PAYLOAD => {
            // Duplicate a block into a random position.
            let start = rng.gen_range(0..len);
            let n = rng.gen_range(1..=(len - start).min(32)).min(MAX_PAYLOAD - len);
            let block = buf[start..start + n].to_vec();
            let at = rng.gen_range(0..=len);
            buf.splice(at..at, block);
        }
        8 if len >= 2 => {
            let start = rng.gen_range(0..len);
            let n = rng.gen_range(1..=(len - start).min(len - 1).max(1));
            let n = n.min(len - 1);
            buf.drain(start..start + n);
        }
        _ => {
            let i = rng.gen_range(0..len);
            buf[i] = rng.gen();
        }
    }
}
