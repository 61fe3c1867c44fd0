//! Create/restore cost of snapshots as a function of the number of dirtied
//! pages.

use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::paged::{AuxState, IncrementalSnapshot, MemError, PagedMemory, RootSnapshot, DEFAULT_REMIRROR_INTERVAL};

pub const CSV_HEADER: &str =
    "mem_pages,dirty_pages,reps,inc_create_ns,inc_restore_ns,pages_copied,root_restore_ns,root_scan_restore_ns,bitmap_scan_cost";

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub mem_pages: Vec<usize>,
    pub dirty_counts: Vec<usize>,
    pub reps: usize,
    /// Bytes per page.
    pub page_size: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            mem_pages: vec![1 << 17, 1 << 20],
            dirty_counts: vec![10, 100, 1_000, 10_000, 100_000],
            reps: 1000,
            page_size: 64,
            seed: 0,
        }
    }
}

/// Whether `n` pages can be dirtied on a memory of `mem_pages`: at most
/// half of it.
pub fn dirtiable(mem_pages: usize, n: usize) -> bool {
    n <= mem_pages / 2
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub mem_pages: usize,
    pub dirty_pages: usize,
    pub reps: usize,
    pub inc_create: Duration,
    pub inc_restore: Duration,
    /// Mean pages copied per incremental restore.
    pub pages_copied: f64,
    pub root_restore: Duration,
    pub root_scan_restore: Duration,
    /// Bitmap bytes a scanning restore reads: one per page.
    pub bitmap_scan_cost: usize,
}

impl BenchRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.mem_pages,
            self.dirty_pages,
            self.reps,
            self.inc_create.as_nanos(),
            self.inc_restore.as_nanos(),
            self.pages_copied,
            self.root_restore.as_nanos(),
            self.root_scan_restore.as_nanos(),
            self.bitmap_scan_cost
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BenchLine {
    Row(BenchRow),
    Skipped { mem_pages: usize, dirty_pages: usize },
}

fn dirty(mem: &mut PagedMemory, pages: &[usize], value: u8) -> Result<(), MemError> {
    let ps = mem.page_size();
    for &p in pages {
        mem.write(p * ps, &[value])?;
    }
    Ok(())
}

fn mean(total: Duration, reps: usize) -> Duration {
    total / reps.max(1) as u32
}

/// One row: per repetition, dirty `n` random pages, create an incremental
/// snapshot, dirty `n` fresh random pages, restore the incremental
/// snapshot, then reset to the root (alternating dirty-stack and bitmap
/// scan restores).
pub fn bench_row(mem_pages: usize, n: usize, cfg: &BenchConfig) -> Result<BenchLine, MemError> {
    if !dirtiable(mem_pages, n) {
        return Ok(BenchLine::Skipped {
            mem_pages,
            dirty_pages: n,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (mem_pages as u64) << 20 ^ n as u64);
    let mut mem = PagedMemory::new(mem_pages, cfg.page_size)?;
    let root = Arc::new(RootSnapshot::capture(&mut mem, AuxState::default()));
    let mut inc: Option<IncrementalSnapshot> = None;
    let (mut create, mut restore, mut root_stack, mut root_scan) = (Duration::ZERO, Duration::ZERO, Duration::ZERO, Duration::ZERO);
    let (mut stack_reps, mut scan_reps) = (0, 0);
    let mut copied = 0usize;
    for rep in 0..cfg.reps {
        let first = sample(&mut rng, mem_pages, n).into_vec();
        let second = sample(&mut rng, mem_pages, n).into_vec();
        dirty(&mut mem, &first, rep as u8 | 1)?;

        let t = Instant::now();
        let snap = IncrementalSnapshot::capture(&mut mem, &root, AuxState::default(), inc.take(), DEFAULT_REMIRROR_INTERVAL)?;
        create += t.elapsed();

        dirty(&mut mem, &second, 0xAA)?;
        let t = Instant::now();
        copied += mem.restore_incremental(&snap)?;
        restore += t.elapsed();
        inc = Some(snap);

        dirty(&mut mem, &second, 0x55)?;
        let t = Instant::now();
        if rep % 2 == 0 {
            mem.restore_root(&root)?;
            root_stack += t.elapsed();
            stack_reps += 1;
        } else {
            mem.restore_root_scanning(&root)?;
            root_scan += t.elapsed();
            scan_reps += 1;
        }
    }
    Ok(BenchLine::Row(BenchRow {
        mem_pages,
        dirty_pages: n,
        reps: cfg.reps,
        inc_create: mean(create, cfg.reps),
        inc_restore: mean(restore, cfg.reps),
        pages_copied: copied as f64 / cfg.reps.max(1) as f64,
        root_restore: mean(root_stack, stack_reps),
        root_scan_restore: mean(root_scan, scan_reps),
        bitmap_scan_cost: mem_pages,
    }))
}

/// Every row of the table, memory size major.
pub fn run(cfg: &BenchConfig) -> Result<Vec<BenchLine>, MemError> {
    let mut out = Vec::new();
    for &pages in &cfg.mem_pages {
        for &n in &cfg.dirty_counts {
            out.push(bench_row(pages, n, cfg)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn copies_exactly_the_redirtied_pages() {
        let cfg = BenchConfig {
            reps: 20,
            ..Default::default()
        };
        for n in [1, 10, 100, 1000] {
            let BenchLine::Row(r) = bench_row(4096, n.min(2048), &cfg).unwrap() else { panic!() };
            assert_eq!(r.pages_copied, n.min(2048) as f64);
            assert_eq!(r.bitmap_scan_cost, 4096);
        }
    }

    #[test]
    fn oversized_counts_skipped() {
        let cfg = BenchConfig::default();
        assert_eq!(
            bench_row(1 << 17, 100_000, &cfg).unwrap(),
            BenchLine::Skipped {
                mem_pages: 1 << 17,
                dirty_pages: 100_000
            }
        );
        assert!(dirtiable(1 << 20, 100_000));
    }
}
