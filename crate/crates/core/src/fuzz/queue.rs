use std::collections::HashSet;

use rand::Rng;

use crate::bytecode::{Corpus, Program};

/// Every this many schedules, the pick is round-robin instead of weighted.
const ROUND_ROBIN_EVERY: u64 = 4;
const FRESH_BOOST: f64 = 4.0;

#[derive(Debug, Clone)]
pub struct QueueEntry {
    pub program: Program,
    pub hash: u64,
    /// Moving average of ops executed per test case.
    pub exec_cost: f64,
    pub packet_count: usize,
    /// Placement index for the aggressive policy; 0 until first scheduled.
    pub aggressive_cursor: usize,
    /// Executions since the last novelty found from this entry.
    pub iters_since_new: u32,
    pub times_scheduled: u64,
    /// Test cases executed while fuzzing this entry.
    pub iterations: u64,
    /// True until a round on this entry finishes without novelty.
    pub fresh: bool,
    /// Set when the prefix run did not reach the snapshot point.
    pub unstable: bool,
}

impl QueueEntry {
    pub fn new(program: Program, packet_count: usize) -> Self {
        QueueEntry {
            hash: program.content_hash(),
            program,
            exec_cost: 0.0,
            packet_count,
            aggressive_cursor: 0,
            iters_since_new: 0,
            times_scheduled: 0,
            iterations: 0,
            fresh: true,
            unstable: false,
        }
    }

    pub fn record_cost(&mut self, ops: usize) {
        self.exec_cost = if self.iterations == 0 {
            ops as f64
        } else {
            0.9 * self.exec_cost + 0.1 * ops as f64
        };
    }
}

#[derive(Debug, Clone, Default)]
pub struct Queue {
    entries: Vec<QueueEntry>,
    hashes: HashSet<u64>,
    rr_cursor: usize,
    schedules: u64,
}

impl Queue {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds an entry unless an identical program is already queued.
    pub fn push(&mut self, entry: QueueEntry) -> bool {
        if !self.hashes.insert(entry.hash) {
            return false;
        }
        self.entries.push(entry);
        true
    }

    pub fn contains(&self, hash: u64) -> bool {
        self.hashes.contains(&hash)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[QueueEntry] {
        &self.entries
    }

    pub fn get_mut(&mut self, i: usize) -> &mut QueueEntry {
        &mut self.entries[i]
    }

    pub fn programs(&self) -> Vec<Program> {
        self.entries.iter().map(|e| e.program.clone()).collect()
    }

    /// Relative scheduling weight: fresh entries and cheap entries first.
    pub fn weight(&self, i: usize) -> f64 {
        let e = &self.entries[i];
        let mean = self.entries.iter().map(|e| e.exec_cost).sum::<f64>() / self.entries.len() as f64;
        let cost = if e.exec_cost > 0.0 && mean > 0.0 {
            (mean / e.exec_cost).clamp(0.25, 4.0)
        } else {
            1.0
        };
        let fresh = if e.fresh { FRESH_BOOST } else { 1.0 };
        let unstable = if e.unstable { 0.5 } else { 1.0 };
        cost * fresh * unstable
    }

    /// Index of the next entry to fuzz. Panics on an empty queue.
    pub fn schedule_next<R: Rng + ?Sized>(&mut self, rng: &mut R) -> usize {
        assert!(!self.entries.is_empty(), "schedule_next on an empty queue");
        self.schedules += 1;
        let i = if self.schedules.is_multiple_of(ROUND_ROBIN_EVERY) {
            let i = self.rr_cursor % self.entries.len();
            self.rr_cursor = i + 1;
            i
        } else {
            let weights: Vec<f64> = (0..self.entries.len()).map(|i| self.weight(i)).collect();
            let total: f64 = weights.iter().sum();
            let mut x = rng.gen::<f64>() * total;
            let mut pick = weights.len() - 1;
            for (i, w) in weights.iter().enumerate() {
                if x < *w {
                    pick = i;
                    break;
                }
                x -= w;
            }
            pick
        };
        self.entries[i].times_scheduled += 1;
        i
    }
}

impl Corpus for Queue {
    fn len(&self) -> usize {
        self.entries.len()
    }
    fn program(&self, i: usize) -> &Program {
        &self.entries[i].program
    }
}
