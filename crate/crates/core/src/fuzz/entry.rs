use rand::Rng;

use crate::bytecode::{Corpus, Mutator, Program};
use crate::coverage::{CoverageMap, GlobalCoverage, Novelty};
use crate::guest::{ExecError, ExitKind, Guest, SnapshotAction, Start};

use super::policy::{choose_placement, Placement, PolicyConfig};
use super::queue::QueueEntry;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Finding {
    /// Program (marker stripped) that produced new coverage.
    Novel { program: Program, novelty: Novelty },
    /// `iteration` is the 0-based test case within the round.
    Crash { program: Program, site: u32, iteration: u32 },
}

/// Counters for one round on one entry.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RoundStats {
    /// Mutated test cases executed.
    pub execs: u64,
    /// Test cases started from an incremental snapshot.
    pub inc_reuses: u64,
    pub inc_created: u64,
    /// Sum of the snapshot packet index over incremental test cases.
    pub packets_skipped: u64,
    /// Ops executed, including the prefix run that built the snapshot.
    pub ops_executed: u64,
    pub timeouts: u64,
}

impl RoundStats {
    pub fn add(&mut self, o: &RoundStats) {
        self.execs += o.execs;
        self.inc_reuses += o.inc_reuses;
        self.inc_created += o.inc_created;
        self.packets_skipped += o.packets_skipped;
        self.ops_executed += o.ops_executed;
        self.timeouts += o.timeouts;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Round {
    pub requested: Placement,
    /// Placement actually used; differs when the prefix run failed.
    pub used: Placement,
    pub findings: Vec<Finding>,
    pub stats: RoundStats,
}

/// Reusable coverage buffers for [`fuzz_entry`].
#[derive(Debug, Clone)]
pub struct Maps {
    pub cov: CoverageMap,
    pub prefix: CoverageMap,
}

impl Maps {
    pub fn new(size: usize) -> Self {
        Maps {
            cov: CoverageMap::new(size),
            prefix: CoverageMap::new(size),
        }
    }
}

/// One scheduling round: places a snapshot according to the policy, runs
/// `cfg.reuse_limit` mutated test cases from it and discards it.
#[allow(clippy::too_many_arguments)]
pub fn fuzz_entry<R: Rng + ?Sized, C: Corpus + ?Sized>(
    entry: &mut QueueEntry,
    guest: &mut Guest,
    cfg: &PolicyConfig,
    mutator: &Mutator<'_>,
    corpus: &C,
    global: &mut GlobalCoverage,
    maps: &mut Maps,
    rng: &mut R,
) -> Result<Round, ExecError> {
    let requested = choose_placement(cfg, entry, rng);
    fuzz_entry_at(entry, guest, requested, cfg.reuse_limit, mutator, corpus, global, maps, rng)
}

/// [`fuzz_entry`] with the placement fixed by the caller.
#[allow(clippy::too_many_arguments)]
pub fn fuzz_entry_at<R: Rng + ?Sized, C: Corpus + ?Sized>(
    entry: &mut QueueEntry,
    guest: &mut Guest,
    requested: Placement,
    iterations: u32,
    mutator: &Mutator<'_>,
    corpus: &C,
    global: &mut GlobalCoverage,
    maps: &mut Maps,
    rng: &mut R,
) -> Result<Round, ExecError> {
    let binding = guest.binding();
    let mut stats = RoundStats::default();
    let mut findings = Vec::new();
    let base = entry.program.without_snapshot();

    let mut used = Placement::Root;
    let mut template = base.clone();
    let mut fuzz_from = 0;
    if let Placement::AfterPacket(k) = requested {
        if let Some(index) = base.op_index_after_packet(&binding, k) {
            let marked = base.with_snapshot(index);
            maps.prefix.clear();
            let r = guest.execute(&marked, Start::Root, SnapshotAction::CreateAndStop, &mut maps.prefix)?;
            stats.ops_executed += r.ops_executed as u64;
            if r.snapshot_created {
                stats.inc_created += 1;
                used = requested;
                template = marked;
                fuzz_from = index;
            }
        }
        if used == Placement::Root {
            entry.unstable = true;
        }
    }

    let mut found_new = false;
    for iteration in 0..iterations {
        let candidate = mutator.mutate(&template, rng, corpus, fuzz_from);
        let start = match used {
            Placement::Root => {
                maps.cov.clear();
                Start::Root
            }
            Placement::AfterPacket(k) => {
                maps.cov.copy_from(&maps.prefix);
                stats.inc_reuses += 1;
                stats.packets_skipped += k as u64;
                Start::Incremental
            }
        };
        let r = guest.execute(&candidate, start, SnapshotAction::Ignore, &mut maps.cov)?;
        let consumed = fuzz_from + r.ops_executed;
        stats.execs += 1;
        stats.ops_executed += r.ops_executed as u64;
        entry.record_cost(r.ops_executed);
        entry.iterations += 1;
        entry.iters_since_new += 1;
        match r.exit {
            ExitKind::Crash(site) => {
                maps.cov.clear();
                findings.push(Finding::Crash {
                    program: candidate.without_snapshot(),
                    site,
                    iteration,
                });
            }
            ExitKind::Timeout => {
                maps.cov.clear();
                stats.timeouts += 1;
            }
            ExitKind::Finished => {
                let novelty = global.merge_and_classify(&mut maps.cov);
                if novelty != Novelty::None {
                    entry.iters_since_new = 0;
                    found_new = true;
                    // Ops after the target exited never ran; dropping them
                    // leaves behaviour unchanged.
                    let mut program = candidate.without_snapshot();
                    program.ops.truncate(consumed);
                    findings.push(Finding::Novel { program, novelty });
                }
            }
        }
    }
    entry.fresh = found_new;
    guest.discard_incremental();
    Ok(Round {
        requested,
        used,
        findings,
        stats,
    })
}
