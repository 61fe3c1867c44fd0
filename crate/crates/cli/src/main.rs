use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use snapnet::bench::{self, BenchConfig, BenchLine};
use snapnet::bytecode::{FormatSpec, Program, NET_SPEC};
use snapnet::coverage::{CoverageMap, DEFAULT_MAP_SIZE};
use snapnet::fuzz::{write_atomic, Campaign, CampaignConfig, FileConfig, Policy};
use snapnet::guest::{boot, lookup, ExitKind, SnapshotAction, Start, Target, TargetOptions, DEFAULT_OP_BUDGET};
use snapnet::seed_import::{self, Dissector, DumpFormat};

const EXIT_USAGE: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_CRASH: u8 = 10;
/// Stand-in for "no time limit": the campaign runs until interrupted.
const FOREVER: Duration = Duration::from_secs(100 * 365 * 24 * 3600);

#[derive(Parser)]
#[command(name = "snapnet", version, about = "Snapshot fuzzing of simulated network targets")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a fuzzing campaign.
    Fuzz(FuzzArgs),
    /// Time incremental snapshot create/restore against dirtied page count.
    BenchSnapshot(BenchArgs),
    /// Run a program from the root three times and report how it ends.
    Replay(ReplayArgs),
    /// Convert a captured session into seed programs.
    Import(ImportArgs),
}

#[derive(Args)]
struct TargetArgs {
    /// ftp_like, platformer or longprefix.
    #[arg(long)]
    target: String,
    /// Bytecode spec file; the built-in network spec if omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Level file for the platformer.
    #[arg(long)]
    level: Option<PathBuf>,
    /// Handshake length for longprefix.
    #[arg(long)]
    handshake: Option<usize>,
}

#[derive(Args)]
struct FuzzArgs {
    #[command(flatten)]
    target: TargetArgs,
    /// Directory of .nxb seed programs; the target's built-in seeds if omitted.
    #[arg(long)]
    seeds: Option<PathBuf>,
    /// none, balanced or aggressive.
    #[arg(long)]
    policy: Option<Policy>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Seconds to run; until interrupted if omitted.
    #[arg(long)]
    duration: Option<u64>,
    /// Stop after this many executions in total.
    #[arg(long)]
    max_execs: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// key=value file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    rng_seed: u64,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 1000)]
    reps: usize,
    /// Memory sizes in pages.
    #[arg(long, value_delimiter = ',', default_values_t = [1usize << 17, 1 << 20])]
    mem_pages: Vec<usize>,
    /// Dirtied page counts.
    #[arg(long, value_delimiter = ',', default_values_t = [10usize, 100, 1_000, 10_000, 100_000])]
    dirty: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    page_size: usize,
    #[arg(long, default_value_t = 0)]
    rng_seed: u64,
}

#[derive(Args)]
struct ReplayArgs {
    /// Program file (NXB1).
    input: PathBuf,
    #[command(flatten)]
    target: TargetArgs,
}

#[derive(Args)]
struct ImportArgs {
    /// A dump file, or for jsonl a directory of .jsonl files.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value = "jsonl")]
    format: DumpFormat,
    #[arg(long, default_value = "crlf")]
    dissector: Dissector,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    spec: Option<PathBuf>,
}

/// An error with the exit code it maps to.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

fn usage(err: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        err: err.into(),
    }
}

fn io(err: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: EXIT_IO,
        err: err.into(),
    }
}

fn load_spec(path: Option<&Path>) -> Result<FormatSpec, Failure> {
    match path {
        None => FormatSpec::parse(NET_SPEC).map_err(usage),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display())).map_err(io)?;
            FormatSpec::parse(&text).with_context(|| format!("parsing {}", p.display())).map_err(io)
        }
    }
}

fn load_target(args: &TargetArgs) -> Result<Arc<dyn Target>, Failure> {
    let level = match &args.level {
        Some(p) => Some(fs::read_to_string(p).with_context(|| format!("reading {}", p.display())).map_err(io)?),
        None => None,
    };
    let opts = TargetOptions {
        level,
        handshake: args.handshake,
    };
    lookup(&args.target, &opts).map_err(usage)
}

fn load_seeds(dir: &Path) -> Result<Vec<Program>, Failure> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "nxb"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let bytes = fs::read(p).with_context(|| format!("reading {}", p.display())).map_err(io)?;
            Program::decode(&bytes).with_context(|| format!("decoding {}", p.display())).map_err(io)
        })
        .collect()
}

fn cmd_fuzz(a: FuzzArgs) -> Result<(), Failure> {
    let spec = load_spec(a.target.spec.as_deref())?;
    let target = load_target(&a.target)?;
    let seeds = match &a.seeds {
        Some(d) => load_seeds(d)?,
        None => Vec::new(),
    };
    let mut cfg = CampaignConfig::default();
    if let Some(p) = &a.config {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display())).map_err(io)?;
        let file = FileConfig::parse(&text).with_context(|| format!("parsing {}", p.display())).map_err(usage)?;
        cfg.apply_file(&file);
    }
    if let Some(p) = a.policy {
        cfg.policy.policy = p;
    }
    cfg.workers = a.workers;
    cfg.rng_seed = a.rng_seed;
    cfg.max_execs = a.max_execs;
    cfg.duration = match (a.duration, a.max_execs) {
        (Some(s), _) => Some(Duration::from_secs(s)),
        (None, Some(_)) => None,
        (None, None) => Some(FOREVER),
    };
    if let Some(out) = &a.out {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display())).map_err(io)?;
    }
    cfg.out = a.out.clone();

    let mut campaign = Campaign::new(target, spec, seeds, cfg).map_err(|e| match e {
        snapnet::fuzz::CampaignError::Config(_) | snapnet::fuzz::CampaignError::NoSeeds => usage(e),
        _ => io(e),
    })?;
    let r = campaign.run().map_err(io)?;
    println!(
        "execs {} in {:.1}s, edges {}, corpus {}, unique crashes {}",
        r.execs,
        r.elapsed.as_secs_f64(),
        r.edges_found,
        r.corpus_size,
        r.crashes.len()
    );
    println!(
        "incremental snapshots {}, reuses {}, packets skipped {}, ops/exec {:.2}",
        r.inc_created,
        r.inc_reuses,
        r.packets_skipped,
        r.mean_ops_per_exec()
    );
    for c in &r.crashes {
        println!("crash site {:#010x}: first at exec {}, {} reproducer(s)", c.site, c.first_exec, c.reproducers);
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<(), Failure> {
    let cfg = BenchConfig {
        mem_pages: a.mem_pages,
        dirty_counts: a.dirty,
        reps: a.reps,
        page_size: a.page_size,
        seed: a.rng_seed,
    };
    println!("{}", bench::CSV_HEADER);
    for &pages in &cfg.mem_pages {
        for &n in &cfg.dirty_counts {
            match bench::bench_row(pages, n, &cfg).map_err(usage)? {
                BenchLine::Row(r) => println!("{}", r.csv()),
                BenchLine::Skipped { mem_pages, dirty_pages } => {
                    eprintln!("note: skipped {dirty_pages} dirty pages on {mem_pages} pages: more than half of memory")
                }
            }
        }
    }
    Ok(())
}

fn exit_label(e: ExitKind) -> String {
    match e {
        ExitKind::Finished => "finished".into(),
        ExitKind::Timeout => "timeout".into(),
        ExitKind::Crash(site) => format!("crash site={site:#010x}"),
    }
}

fn cmd_replay(a: ReplayArgs) -> Result<u8, Failure> {
    let spec = load_spec(a.target.spec.as_deref())?;
    let target = load_target(&a.target)?;
    let bytes = fs::read(&a.input).with_context(|| format!("reading {}", a.input.display())).map_err(io)?;
    let program = Program::decode(&bytes).with_context(|| format!("decoding {}", a.input.display())).map_err(io)?;
    program.validate(&spec).map_err(|v| io(anyhow!("{}: invalid program: {v:?}", a.input.display())))?;
    let (mut guest, _) = boot(target, &spec, DEFAULT_OP_BUDGET).map_err(io)?;
    let mut cov = CoverageMap::new(DEFAULT_MAP_SIZE);
    let mut exits = Vec::new();
    for run in 1..=3 {
        cov.clear();
        let r = guest.execute(&program, Start::Root, SnapshotAction::Ignore, &mut cov).map_err(io)?;
        println!(
            "run {run}: {} ops_executed={} packets={}",
            exit_label(r.exit),
            r.ops_executed,
            r.packets_consumed
        );
        exits.push(r.exit);
    }
    let crashes = exits.iter().filter(|e| matches!(e, ExitKind::Crash(_))).count();
    if let ExitKind::Crash(site) = exits[0] {
        if exits.iter().all(|&e| e == exits[0]) {
            println!("crash reproduced 3/3 at site {site:#010x}");
            return Ok(EXIT_CRASH);
        }
    }
    if crashes > 0 {
        println!("crash not stable: {crashes}/3 runs crashed");
    }
    Ok(0)
}

fn cmd_import(a: ImportArgs) -> Result<(), Failure> {
    let spec = load_spec(a.spec.as_deref())?;
    let inputs: Vec<PathBuf> = if a.format == DumpFormat::Jsonl && a.input.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(&a.input)
            .with_context(|| format!("reading {}", a.input.display()))
            .map_err(io)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        v.sort();
        v
    } else {
        vec![a.input.clone()]
    };
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display())).map_err(io)?;
    for path in &inputs {
        let program = seed_import::import(&spec, path, a.format, a.dissector).map_err(io)?;
        let stem = path.file_stem().map_or("seed".into(), |s| s.to_string_lossy().into_owned());
        let dest = a.out.join(format!("{stem}.nxb"));
        write_atomic(&dest, &program.serialize()).with_context(|| format!("writing {}", dest.display())).map_err(io)?;
        println!("{} -> {} ({} ops)", path.display(), dest.display(), program.ops.len());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let result = match cli.cmd {
        Cmd::Fuzz(a) => cmd_fuzz(a).map(|()| 0),
        Cmd::BenchSnapshot(a) => cmd_bench(a).map(|()| 0),
        Cmd::Replay(a) => cmd_replay(a),
        Cmd::Import(a) => cmd_import(a).map(|()| 0),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}
