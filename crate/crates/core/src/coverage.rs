//! Edge-coverage hit counts and novelty detection against a campaign-wide
//! record of seen hit-count buckets.

use std::fs;
use std::io;
use std::path::Path;

pub const DEFAULT_MAP_SIZE: usize = 1 << 16;
/// Slots at the end of the map reserved for maximization feedback.
pub const FEEDBACK_SLOTS: usize = 64;
const MIN_MAP_SIZE: usize = 2 * FEEDBACK_SLOTS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Novelty {
    None,
    NewBucket,
    NewEdge,
}

/// Bucket index (0..8) for a non-zero hit count:
/// 1, 2, 3, 4-7, 8-15, 16-31, 32-127, 128+.
pub fn bucket_of(count: u8) -> u8 {
    match count {
        0 => panic!("bucket_of(0)"),
        1 => 0,
        2 => 1,
        3 => 2,
        4..=7 => 3,
        8..=15 => 4,
        16..=31 => 5,
        32..=127 => 6,
        _ => 7,
    }
}

const fn bucket_table() -> [u8; 256] {
    let mut t = [0u8; 256];
    let mut c = 1;
    while c < 256 {
        let b = match c {
            1 => 0,
            2 => 1,
            3 => 2,
            4..=7 => 3,
            8..=15 => 4,
            16..=31 => 5,
            32..=127 => 6,
            _ => 7,
        };
        t[c] = 1 << b;
        c += 1;
    }
    t
}

static BUCKET_BIT: [u8; 256] = bucket_table();

/// Per-execution hit counts, 8-bit saturating.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoverageMap {
    bits: Vec<u8>,
}

impl CoverageMap {
    pub fn new(size: usize) -> Self {
        assert!(
            size >= MIN_MAP_SIZE && size.is_power_of_two(),
            "coverage map size must be a power of two >= {MIN_MAP_SIZE}"
        );
        Self { bits: vec![0; size] }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.iter().all(|&b| b == 0)
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bits
    }

    /// Slot for the transition `prev -> cur`.
    pub fn edge_slot(&self, prev: u16, cur: u16) -> usize {
        (cur ^ (prev >> 1)) as usize & (self.bits.len() - 1)
    }

    pub fn record_edge(&mut self, prev: u16, cur: u16) {
        let slot = self.edge_slot(prev, cur);
        self.hit(slot);
    }

    /// Marks maximization bucket `bucket` (0..64) as reached.
    pub fn record_feedback(&mut self, bucket: usize) {
        let slot = self.feedback_slot(bucket);
        self.bits[slot] = self.bits[slot].max(1);
    }

    pub fn feedback_slot(&self, bucket: usize) -> usize {
        self.bits.len() - FEEDBACK_SLOTS + bucket.min(FEEDBACK_SLOTS - 1)
    }

    fn hit(&mut self, slot: usize) {
        self.bits[slot] = self.bits[slot].saturating_add(1);
    }

    pub fn get(&self, slot: usize) -> u8 {
        self.bits[slot]
    }

    pub fn clear(&mut self) {
        self.bits.fill(0);
    }

    pub fn copy_from(&mut self, other: &CoverageMap) {
        self.bits.copy_from_slice(&other.bits);
    }

    /// Number of non-zero slots.
    pub fn count_hit(&self) -> usize {
        self.bits.iter().filter(|&&b| b != 0).count()
    }
}

impl Default for CoverageMap {
    fn default() -> Self {
        Self::new(DEFAULT_MAP_SIZE)
    }
}

/// Per-slot set of hit-count buckets seen so far, one bit per bucket.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GlobalCoverage {
    seen: Vec<u8>,
}

impl GlobalCoverage {
    pub fn new(size: usize) -> Self {
        assert!(size >= MIN_MAP_SIZE && size.is_power_of_two());
        Self { seen: vec![0; size] }
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.seen
    }

    pub fn len(&self) -> usize {
        self.seen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges_found() == 0
    }

    /// Slots with at least one bucket seen.
    pub fn edges_found(&self) -> usize {
        self.seen.iter().filter(|&&b| b != 0).count()
    }

    /// Classifies `map` without changing anything.
    pub fn classify(&self, map: &CoverageMap) -> Novelty {
        assert_eq!(map.len(), self.seen.len());
        let mut best = Novelty::None;
        for_each_hit(&map.bits, |i, c| {
            let seen = self.seen[i];
            if seen == 0 {
                best = Novelty::NewEdge;
            } else if seen & BUCKET_BIT[c as usize] == 0 && best == Novelty::None {
                best = Novelty::NewBucket;
            }
        });
        best
    }

    /// Classifies `map`, folds its buckets into the global record and
    /// clears `map` for the next execution.
    pub fn merge_and_classify(&mut self, map: &mut CoverageMap) -> Novelty {
        assert_eq!(map.len(), self.seen.len());
        let mut best = Novelty::None;
        let seen = &mut self.seen;
        for_each_hit(&map.bits, |i, c| {
            let bit = BUCKET_BIT[c as usize];
            if seen[i] == 0 {
                best = Novelty::NewEdge;
            } else if seen[i] & bit == 0 && best == Novelty::None {
                best = Novelty::NewBucket;
            }
            seen[i] |= bit;
        });
        map.clear();
        best
    }

    /// Ors another global record into this one.
    pub fn union_with(&mut self, other: &GlobalCoverage) {
        for (a, b) in self.seen.iter_mut().zip(&other.seen) {
            *a |= b;
        }
    }

    pub fn save(&self, path: &Path) -> io::Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &self.seen)?;
        fs::rename(tmp, path)
    }

    pub fn load(path: &Path) -> io::Result<Self> {
        let seen = fs::read(path)?;
        if seen.len() < MIN_MAP_SIZE || !seen.len().is_power_of_two() {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "bad coverage file size"));
        }
        Ok(Self { seen })
    }
}

/// Calls `f(slot, count)` for each non-zero slot, skipping zero words.
fn for_each_hit(bits: &[u8], mut f: impl FnMut(usize, u8)) {
    let mut chunks = bits.chunks_exact(8);
    let mut base = 0;
    for chunk in &mut chunks {
        if u64::from_ne_bytes(chunk.try_into().unwrap()) != 0 {
            for (j, &c) in chunk.iter().enumerate() {
                if c != 0 {
                    f(base + j, c);
                }
            }
        }
        base += 8;
    }
    for (j, &c) in chunks.remainder().iter().enumerate() {
        if c != 0 {
            f(base + j, c);
        }
    }
}
