//! Multi-worker campaign loop and its on-disk layout:
//!
//! ```text
//! out/queue/{hash:016x}.nxb      corpus, shared by all workers
//! out/crashes/site_*.nxb         filed reproducers
//! out/stats.csv                  one row per second
//! out/trajectory.csv             exec-indexed progress per worker
//! out/global_cov.bin             union of worker coverage
//! out/config.txt                 effective configuration
//! ```

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::bytecode::{FormatSpec, Mutator, Program};
use crate::coverage::{GlobalCoverage, Novelty, DEFAULT_MAP_SIZE};
use crate::guest::{boot, BootError, ExecError, ExitKind, Guest, SnapshotAction, Start, Target, DEFAULT_OP_BUDGET};
use crate::paged::{RootSnapshot, DEFAULT_REMIRROR_INTERVAL};

use super::config::FileConfig;
use super::crash::{write_atomic, CrashStore};
use super::entry::{fuzz_entry, Finding, Maps, RoundStats};
use super::policy::PolicyConfig;
use super::queue::{Queue, QueueEntry};

pub const STATS_HEADER: &str =
    "unix_ts,execs,execs_per_sec,edges_found,corpus_size,crashes_unique,inc_snapshots_created,inc_reuses,packets_skipped";
pub const TRAJECTORY_HEADER: &str =
    "worker,execs,edges_found,corpus_size,crashes_unique,inc_snapshots_created,inc_reuses,packets_skipped";

#[derive(Debug, Error)]
pub enum CampaignError {
    #[error("boot failed: {0}")]
    Boot(#[from] BootError),
    #[error("execution failed: {0}")]
    Exec(#[from] ExecError),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("no usable seed programs")]
    NoSeeds,
    #[error("bad configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone)]
pub struct CampaignConfig {
    pub policy: PolicyConfig,
    pub workers: usize,
    pub duration: Option<Duration>,
    /// Campaign-wide exec budget, split evenly across workers.
    pub max_execs: Option<u64>,
    /// Stop as soon as a crash at this site is filed.
    pub stop_on_site: Option<u32>,
    pub out: Option<PathBuf>,
    pub rng_seed: u64,
    pub remirror_interval: u32,
    pub op_budget: u64,
    pub map_size: usize,
    pub sync_interval: Duration,
    pub stats_interval: Duration,
    /// A trajectory row is recorded each time a worker passes a multiple of
    /// this many execs.
    pub trajectory_every: u64,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        CampaignConfig {
            policy: PolicyConfig::default(),
            workers: 1,
            duration: None,
            max_execs: None,
            stop_on_site: None,
            out: None,
            rng_seed: 0,
            remirror_interval: DEFAULT_REMIRROR_INTERVAL,
            op_budget: DEFAULT_OP_BUDGET,
            map_size: DEFAULT_MAP_SIZE,
            sync_interval: Duration::from_secs(30),
            stats_interval: Duration::from_secs(1),
            trajectory_every: 1000,
        }
    }
}

impl CampaignConfig {
    /// Applies the fields set in a config file.
    pub fn apply_file(&mut self, f: &FileConfig) {
        if let Some(p) = f.policy {
            self.policy.policy = p;
        }
        if let Some(v) = f.reuse_limit {
            self.policy.reuse_limit = v;
        }
        if let Some(v) = f.min_packets_for_inc {
            self.policy.min_packets_for_inc = v;
        }
        if let Some(v) = f.remirror_interval {
            self.remirror_interval = v;
        }
        if let Some(v) = f.op_budget {
            self.op_budget = v;
        }
        if let Some(v) = f.map_size {
            self.map_size = v;
        }
    }

    pub fn as_file(&self) -> FileConfig {
        FileConfig {
            policy: Some(self.policy.policy),
            reuse_limit: Some(self.policy.reuse_limit),
            min_packets_for_inc: Some(self.policy.min_packets_for_inc),
            remirror_interval: Some(self.remirror_interval),
            op_budget: Some(self.op_budget),
            map_size: Some(self.map_size),
        }
    }

    pub fn validate(&self) -> Result<(), CampaignError> {
        self.policy.validate().map_err(CampaignError::Config)?;
        if self.workers == 0 {
            return Err(CampaignError::Config("workers must be at least 1".into()));
        }
        if !self.map_size.is_power_of_two() || self.map_size < 128 {
            return Err(CampaignError::Config("map_size must be a power of two of at least 128".into()));
        }
        if self.duration.is_none() && self.max_execs.is_none() && self.stop_on_site.is_none() {
            return Err(CampaignError::Config("campaign needs a duration, exec budget or stop site".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrajectoryRow {
    pub worker: usize,
    pub execs: u64,
    pub edges_found: usize,
    pub corpus_size: usize,
    pub crashes_unique: usize,
    pub inc_created: u64,
    pub inc_reuses: u64,
    pub packets_skipped: u64,
}

impl TrajectoryRow {
    fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.worker,
            self.execs,
            self.edges_found,
            self.corpus_size,
            self.crashes_unique,
            self.inc_created,
            self.inc_reuses,
            self.packets_skipped
        )
    }
}

struct Worker {
    id: usize,
    guest: Guest,
    queue: Queue,
    global: GlobalCoverage,
    maps: Maps,
    rng: ChaCha8Rng,
    crashes: CrashStore,
    stats: RoundStats,
    /// Exec count at which each crash site was first seen.
    first_hit: BTreeMap<u32, u64>,
    trajectory: Vec<TrajectoryRow>,
    trajectory_flushed: usize,
    next_row: u64,
    trajectory_every: u64,
    queue_dir: Option<PathBuf>,
    seen_files: HashSet<String>,
    exec_cap: u64,
}

impl Worker {
    fn done(&self, cfg: &CampaignConfig) -> bool {
        self.stats.execs >= self.exec_cap || cfg.stop_on_site.is_some_and(|s| self.crashes.get(s).is_some())
    }

    fn save_to_queue(&mut self, p: &Program) -> io::Result<()> {
        if let Some(d) = &self.queue_dir {
            let name = format!("{:016x}.nxb", p.content_hash());
            let path = d.join(&name);
            if !path.exists() {
                write_atomic(&path, &p.serialize())?;
            }
            self.seen_files.insert(name);
        }
        Ok(())
    }

    /// Runs `p` from the root and queues the part the target consumed if
    /// `force` or it is novel.
    fn import(&mut self, p: Program, force: bool) -> Result<bool, CampaignError> {
        let p = p.without_snapshot();
        if self.queue.contains(p.content_hash()) {
            return Ok(false);
        }
        self.maps.cov.clear();
        let r = self.guest.execute(&p, Start::Root, SnapshotAction::Ignore, &mut self.maps.cov)?;
        match r.exit {
            ExitKind::Finished => {}
            ExitKind::Crash(site) => {
                self.maps.cov.clear();
                self.file_crash(&p, site, self.stats.execs)?;
                return Ok(false);
            }
            ExitKind::Timeout => {
                self.maps.cov.clear();
                return Ok(false);
            }
        }
        let novelty = self.global.merge_and_classify(&mut self.maps.cov);
        if !force && novelty == Novelty::None {
            return Ok(false);
        }
        let mut p = p;
        p.ops.truncate(r.ops_executed);
        if self.queue.contains(p.content_hash()) {
            return Ok(false);
        }
        let n = p.packet_count(&self.guest.binding());
        let mut e = QueueEntry::new(p, n);
        e.record_cost(r.ops_executed);
        let program = e.program.clone();
        self.queue.push(e);
        self.save_to_queue(&program)?;
        Ok(true)
    }

    fn file_crash(&mut self, p: &Program, site: u32, exec: u64) -> Result<(), CampaignError> {
        let guest = &mut self.guest;
        let cov = &mut self.maps.cov;
        let mut failure = None;
        self.crashes.report(p, site, exec, |q| {
            cov.clear();
            let r = guest.execute(q, Start::Root, SnapshotAction::Ignore, cov);
            cov.clear();
            match r {
                Ok(r) => r.exit,
                Err(e) => {
                    failure = Some(e);
                    ExitKind::Finished
                }
            }
        })?;
        if let Some(e) = failure {
            return Err(e.into());
        }
        self.first_hit.entry(site).or_insert(exec);
        Ok(())
    }

    fn record_trajectory(&mut self) {
        while self.stats.execs >= self.next_row {
            self.trajectory.push(TrajectoryRow {
                worker: self.id,
                execs: self.next_row,
                edges_found: self.global.edges_found(),
                corpus_size: self.queue.len(),
                crashes_unique: self.crashes.unique(),
                inc_created: self.stats.inc_created,
                inc_reuses: self.stats.inc_reuses,
                packets_skipped: self.stats.packets_skipped,
            });
            self.next_row += self.trajectory_every;
        }
    }

    fn round(&mut self, spec: &FormatSpec, cfg: &CampaignConfig) -> Result<(), CampaignError> {
        let mutator = Mutator::new(spec);
        let i = self.queue.schedule_next(&mut self.rng);
        let mut entry = self.queue.entries()[i].clone();
        let round = fuzz_entry(
            &mut entry,
            &mut self.guest,
            &cfg.policy,
            &mutator,
            &self.queue,
            &mut self.global,
            &mut self.maps,
            &mut self.rng,
        )?;
        *self.queue.get_mut(i) = entry;
        let base = self.stats.execs;
        self.stats.add(&round.stats);
        for f in round.findings {
            match f {
                Finding::Novel { program, .. } => {
                    let n = program.packet_count(&self.guest.binding());
                    let save = program.clone();
                    if self.queue.push(QueueEntry::new(program, n)) {
                        self.save_to_queue(&save)?;
                    }
                }
                Finding::Crash { program, site, iteration } => {
                    self.file_crash(&program, site, base + iteration as u64 + 1)?;
                }
            }
        }
        Ok(())
    }

    fn run_slice(&mut self, spec: &FormatSpec, cfg: &CampaignConfig, deadline: Instant) -> Result<(), CampaignError> {
        while !self.done(cfg) && Instant::now() < deadline {
            self.round(spec, cfg)?;
            self.record_trajectory();
        }
        Ok(())
    }

    /// Imports corpus files written by other workers.
    fn sync(&mut self) -> Result<(), CampaignError> {
        let Some(dir) = self.queue_dir.clone() else { return Ok(()) };
        let mut names: Vec<String> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.ends_with(".nxb") && !self.seen_files.contains(n))
            .collect();
        names.sort();
        for name in names {
            self.seen_files.insert(name.clone());
            let Ok(bytes) = fs::read(dir.join(&name)) else { continue };
            let Ok(p) = Program::decode(&bytes) else { continue };
            self.import(p, false)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrashSummary {
    pub site: u32,
    /// Execs of the finding worker when the site was first hit.
    pub first_exec: u64,
    pub reproducers: usize,
}

#[derive(Debug, Clone)]
pub struct CampaignReport {
    pub execs: u64,
    pub edges_found: usize,
    pub corpus_size: usize,
    pub crashes: Vec<CrashSummary>,
    pub inc_created: u64,
    pub inc_reuses: u64,
    pub packets_skipped: u64,
    pub ops_executed: u64,
    pub timeouts: u64,
    /// Sum of per-entry iteration counters over every worker queue.
    pub entry_iterations: u64,
    /// Distinct root snapshot allocations held by the workers.
    pub root_allocations: usize,
    pub worker_execs: Vec<u64>,
    pub elapsed: Duration,
}

impl CampaignReport {
    pub fn crash(&self, site: u32) -> Option<&CrashSummary> {
        self.crashes.iter().find(|c| c.site == site)
    }

    pub fn mean_ops_per_exec(&self) -> f64 {
        self.ops_executed as f64 / self.execs.max(1) as f64
    }
}

pub struct Campaign {
    target: Arc<dyn Target>,
    spec: FormatSpec,
    cfg: CampaignConfig,
    root: Arc<RootSnapshot>,
    workers: Vec<Worker>,
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

fn append_line(path: &Path, line: &str) -> io::Result<()> {
    let mut f = OpenOptions::new().append(true).create(true).open(path)?;
    writeln!(f, "{line}")
}

impl Campaign {
    /// Boots the target once and builds the workers around the shared root
    /// snapshot. With no `seeds`, the target's built-in seeds are used.
    pub fn new(target: Arc<dyn Target>, spec: FormatSpec, seeds: Vec<Program>, cfg: CampaignConfig) -> Result<Campaign, CampaignError> {
        cfg.validate()?;
        let seeds = if seeds.is_empty() { target.default_seeds(&spec) } else { seeds };
        let seeds: Vec<Program> = seeds.into_iter().filter(|p| p.validate(&spec).is_ok()).collect();
        if seeds.is_empty() {
            return Err(CampaignError::NoSeeds);
        }
        let (first, root) = boot(Arc::clone(&target), &spec, cfg.op_budget)?;
        let (queue_dir, crash_dir) = match &cfg.out {
            Some(out) => {
                let q = out.join("queue");
                fs::create_dir_all(&q)?;
                (Some(q), Some(out.join("crashes")))
            }
            None => (None, None),
        };
        let exec_cap = cfg.max_execs.map_or(u64::MAX, |m| m.div_ceil(cfg.workers as u64));
        let mut guests = vec![first];
        for _ in 1..cfg.workers {
            guests.push(Guest::from_root(Arc::clone(&target), &spec, Arc::clone(&root), cfg.op_budget)?);
        }
        let mut workers = Vec::with_capacity(cfg.workers);
        for (id, mut guest) in guests.into_iter().enumerate() {
            guest.set_remirror_interval(cfg.remirror_interval);
            let stream = cfg.rng_seed ^ (id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let mut w = Worker {
                id,
                guest,
                queue: Queue::new(),
                global: GlobalCoverage::new(cfg.map_size),
                maps: Maps::new(cfg.map_size),
                rng: ChaCha8Rng::seed_from_u64(stream),
                crashes: CrashStore::new(crash_dir.clone())?,
                stats: RoundStats::default(),
                first_hit: BTreeMap::new(),
                trajectory: Vec::new(),
                trajectory_flushed: 0,
                next_row: cfg.trajectory_every.max(1),
                trajectory_every: cfg.trajectory_every.max(1),
                queue_dir: queue_dir.clone(),
                seen_files: HashSet::new(),
                exec_cap,
            };
            for s in &seeds {
                w.import(s.clone(), true)?;
            }
            if w.queue.is_empty() {
                return Err(CampaignError::NoSeeds);
            }
            workers.push(w);
        }
        Ok(Campaign {
            target,
            spec,
            cfg,
            root,
            workers,
        })
    }

    pub fn root(&self) -> &Arc<RootSnapshot> {
        &self.root
    }

    /// Number of distinct root snapshot storages across all workers.
    pub fn root_allocations(&self) -> usize {
        self.workers.iter().map(|w| w.guest.root().storage_ptr() as usize).collect::<BTreeSet<_>>().len()
    }

    pub fn trajectory(&self) -> Vec<TrajectoryRow> {
        self.workers.iter().flat_map(|w| w.trajectory.iter().copied()).collect()
    }

    fn finished(&self) -> bool {
        let all_capped = self.workers.iter().all(|w| w.stats.execs >= w.exec_cap);
        let site_found = self
            .cfg
            .stop_on_site
            .is_some_and(|s| self.workers.iter().any(|w| w.crashes.get(s).is_some()));
        all_capped || site_found
    }

    fn run_workers(&mut self, deadline: Instant) -> Result<(), CampaignError> {
        let (spec, cfg) = (&self.spec, &self.cfg);
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            self.workers.par_iter_mut().try_for_each(|w| w.run_slice(spec, cfg, deadline))
        }
        #[cfg(not(feature = "parallel"))]
        {
            self.workers.iter_mut().try_for_each(|w| w.run_slice(spec, cfg, deadline))
        }
    }

    fn totals(&self) -> (RoundStats, usize, usize, usize) {
        let mut s = RoundStats::default();
        for w in &self.workers {
            s.add(&w.stats);
        }
        let mut union = GlobalCoverage::new(self.cfg.map_size);
        let mut corpus = HashSet::new();
        let mut sites = BTreeSet::new();
        for w in &self.workers {
            union.union_with(&w.global);
            corpus.extend(w.queue.entries().iter().map(|e| e.hash));
            sites.extend(w.crashes.records().map(|r| r.site));
        }
        (s, union.edges_found(), corpus.len(), sites.len())
    }

    fn stats_row(&self, execs_per_sec: f64) -> String {
        let (s, edges, corpus, crashes) = self.totals();
        format!(
            "{:.3},{},{:.1},{},{},{},{},{},{}",
            unix_now(),
            s.execs,
            execs_per_sec,
            edges,
            corpus,
            crashes,
            s.inc_created,
            s.inc_reuses,
            s.packets_skipped
        )
    }

    fn flush_trajectory(&mut self, path: &Path) -> io::Result<()> {
        let mut f = OpenOptions::new().append(true).create(true).open(path)?;
        for w in &mut self.workers {
            for row in &w.trajectory[w.trajectory_flushed..] {
                writeln!(f, "{}", row.csv())?;
            }
            w.trajectory_flushed = w.trajectory.len();
        }
        Ok(())
    }

    /// Runs until the duration, exec budget or stop site is reached.
    pub fn run(&mut self) -> Result<CampaignReport, CampaignError> {
        let start = Instant::now();
        let out = self.cfg.out.clone();
        if let Some(out) = &out {
            File::create(out.join("stats.csv"))?.write_all(format!("{STATS_HEADER}\n").as_bytes())?;
            File::create(out.join("trajectory.csv"))?.write_all(format!("{TRAJECTORY_HEADER}\n").as_bytes())?;
            let mut snapshot = format!(
                "target={}\nworkers={}\nrng_seed={}\n",
                self.target.name(),
                self.cfg.workers,
                self.cfg.rng_seed
            );
            snapshot.push_str(&self.cfg.as_file().render());
            write_atomic(&out.join("config.txt"), snapshot.as_bytes())?;
        }
        let end = self.cfg.duration.map(|d| start + d);
        let slice = self.cfg.stats_interval / 4;
        let mut last_row = start;
        let mut last_execs = 0u64;
        let mut last_sync = start;
        loop {
            let now = Instant::now();
            let mut deadline = now + slice;
            if let Some(e) = end {
                deadline = deadline.min(e);
            }
            self.run_workers(deadline)?;
            let now = Instant::now();
            let stop = self.finished() || end.is_some_and(|e| now >= e);
            if let Some(out) = &out {
                if stop || now.duration_since(last_row) >= self.cfg.stats_interval {
                    let execs: u64 = self.workers.iter().map(|w| w.stats.execs).sum();
                    let secs = now.duration_since(last_row).as_secs_f64().max(1e-9);
                    let row = self.stats_row((execs - last_execs) as f64 / secs);
                    append_line(&out.join("stats.csv"), &row)?;
                    self.flush_trajectory(&out.join("trajectory.csv"))?;
                    last_row = now;
                    last_execs = execs;
                }
            }
            if stop {
                break;
            }
            if self.workers.len() > 1 && now.duration_since(last_sync) >= self.cfg.sync_interval {
                for w in &mut self.workers {
                    w.sync()?;
                }
                last_sync = now;
            }
        }
        let (s, edges_found, corpus_size, _) = self.totals();
        if let Some(out) = &out {
            let mut union = GlobalCoverage::new(self.cfg.map_size);
            for w in &self.workers {
                union.union_with(&w.global);
            }
            union.save(&out.join("global_cov.bin"))?;
        }
        let mut crashes: BTreeMap<u32, CrashSummary> = BTreeMap::new();
        for w in &self.workers {
            for r in w.crashes.records() {
                let first = w.first_hit.get(&r.site).copied().unwrap_or(r.first_exec);
                let c = crashes.entry(r.site).or_insert(CrashSummary {
                    site: r.site,
                    first_exec: first,
                    reproducers: 0,
                });
                c.first_exec = c.first_exec.min(first);
                c.reproducers += r.reproducers.len();
            }
        }
        Ok(CampaignReport {
            execs: s.execs,
            edges_found,
            corpus_size,
            crashes: crashes.into_values().collect(),
            inc_created: s.inc_created,
            inc_reuses: s.inc_reuses,
            packets_skipped: s.packets_skipped,
            ops_executed: s.ops_executed,
            timeouts: s.timeouts,
            entry_iterations: self.workers.iter().flat_map(|w| w.queue.entries()).map(|e| e.iterations).sum(),
            root_allocations: self.root_allocations(),
            worker_execs: self.workers.iter().map(|w| w.stats.execs).collect(),
            elapsed: start.elapsed(),
        })
    }
}
