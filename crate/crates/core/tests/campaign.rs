use std::fs;
use std::time::Duration;

use snapnet::bytecode::{FormatSpec, NET_SPEC};
use snapnet::fuzz::{Campaign, CampaignConfig, Policy, PolicyConfig, STATS_HEADER};
use snapnet::guest::{lookup, TargetOptions};

fn config(policy: Policy, seed: u64, max_execs: u64) -> CampaignConfig {
    let mut cfg = CampaignConfig {
        max_execs: Some(max_execs),
        rng_seed: seed,
        ..Default::default()
    };
    cfg.policy = PolicyConfig::with_policy(policy);
    cfg
}

fn run(target: &str, cfg: CampaignConfig) -> snapnet::fuzz::CampaignReport {
    let spec = FormatSpec::parse(NET_SPEC).unwrap();
    let t = lookup(target, &TargetOptions::default()).unwrap();
    Campaign::new(t, spec, Vec::new(), cfg).unwrap().run().unwrap()
}

#[test]
fn single_worker_trajectory_is_reproducible() {
    let mut files = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = config(Policy::Balanced, 42, 6000);
        cfg.out = Some(dir.path().to_path_buf());
        run("ftp_like", cfg);
        files.push(fs::read(dir.path().join("trajectory.csv")).unwrap());
        let stats = fs::read_to_string(dir.path().join("stats.csv")).unwrap();
        assert_eq!(stats.lines().next(), Some(STATS_HEADER));
        assert!(stats.lines().count() >= 2);
    }
    assert_eq!(files[0], files[1]);
    assert!(String::from_utf8_lossy(&files[0]).lines().count() > 2);
}

#[test]
fn different_seeds_diverge() {
    let a = run("ftp_like", config(Policy::Balanced, 1, 4000));
    let b = run("ftp_like", config(Policy::Balanced, 2, 4000));
    assert_ne!((a.ops_executed, a.edges_found), (b.ops_executed, b.edges_found));
}

#[test]
fn policy_none_never_snapshots() {
    for target in ["ftp_like", "platformer", "longprefix"] {
        let r = run(target, config(Policy::None, 3, 3000));
        assert_eq!(r.inc_created, 0, "{target}");
        assert_eq!(r.inc_reuses, 0, "{target}");
    }
}

#[test]
fn aggressive_snapshots_on_longprefix() {
    let r = run("longprefix", config(Policy::Aggressive, 3, 3000));
    assert!(r.inc_created > 0);
    assert!(r.packets_skipped > 0);
    assert!(r.mean_ops_per_exec() < 60.0);
}

#[test]
fn workers_share_one_root() {
    let spec = FormatSpec::parse(NET_SPEC).unwrap();
    let t = lookup("ftp_like", &TargetOptions::default()).unwrap();
    let mut cfg = config(Policy::Balanced, 5, 2000);
    cfg.workers = 4;
    cfg.duration = Some(Duration::from_secs(30));
    let mut c = Campaign::new(t, spec, Vec::new(), cfg).unwrap();
    assert_eq!(c.root_allocations(), 1);
    let r = c.run().unwrap();
    assert_eq!(r.worker_execs.len(), 4);
    assert_eq!(r.root_allocations, 1);
}
