use super::*;
use crate::bytecode::GraphBuilder;
use proptest::prelude::*;

fn spec() -> FormatSpec {
    FormatSpec::default()
}

fn booted(name: &str) -> Guest {
    let t = lookup(name, &TargetOptions::default()).unwrap();
    boot(t, &spec(), DEFAULT_OP_BUDGET).unwrap().0
}

fn session(lines: &[&str]) -> Program {
    let spec = spec();
    let mut b = GraphBuilder::new(&spec);
    let c = b.call("con_open", &[], b"").unwrap().unwrap();
    for l in lines {
        b.call("pkt", &[c], l.as_bytes()).unwrap();
    }
    b.build().unwrap()
}

fn run(g: &mut Guest, p: &Program) -> (ExecResult, CoverageMap) {
    let mut cov = CoverageMap::default();
    let r = g.execute(p, Start::Root, SnapshotAction::Ignore, &mut cov).unwrap();
    (r, cov)
}

#[test]
fn boot_is_deterministic() {
    for name in TARGET_NAMES {
        let t = lookup(name, &TargetOptions::default()).unwrap();
        let (_, a) = boot(Arc::clone(&t), &spec(), DEFAULT_OP_BUDGET).unwrap();
        let (_, b) = boot(t, &spec(), DEFAULT_OP_BUDGET).unwrap();
        assert_eq!(a.as_bytes(), b.as_bytes(), "{name}");
        assert_eq!(a.aux(), b.aux(), "{name}");
    }
}

#[derive(Debug)]
struct Broken;

impl Target for Broken {
    fn name(&self) -> &str {
        "broken"
    }
    fn mem_pages(&self) -> usize {
        1
    }
    fn run(&self, sys: &mut Sys<'_>) -> Result<Yield, Trap> {
        Err(sys.crash(7))
    }
    fn default_seeds(&self, _: &FormatSpec) -> Vec<Program> {
        Vec::new()
    }
}

#[test]
fn crashing_init_fails_boot() {
    assert!(matches!(boot(Arc::new(Broken), &spec(), 100), Err(BootError::Crashed(7))));
}

#[test]
fn root_snapshot_precedes_input() {
    let g = booted("ftp_like");
    assert_eq!(g.status(), Status::AwaitingInput);
    assert_eq!(g.net().counters().packets_consumed, 0);
}

#[test]
fn ftp_stateful_crash() {
    let mut g = booted("ftp_like");
    let p = session(&["USER a\r\n", "PASS b\r\n", "MODE X\r\n", "CRSH\r\n"]);
    let (r, _) = run(&mut g, &p);
    assert_eq!(r.exit, ExitKind::Crash(SITE_CRASH_SEQUENCE as u32));
    // Any missing step leaves the site unreachable.
    for skip in 0..3 {
        let mut lines = vec!["USER a\r\n", "PASS b\r\n", "MODE X\r\n", "CRSH\r\n"];
        lines.remove(skip);
        let (r, _) = run(&mut g, &session(&lines));
        assert_eq!(r.exit, ExitKind::Finished);
    }
}

#[test]
fn ftp_magic_crash() {
    let mut g = booted("ftp_like");
    let mut site_line = b"SITE ".to_vec();
    site_line.extend_from_slice(&CRASH_MAGIC);
    site_line.extend_from_slice(b"\r\n");
    let spec = spec();
    let mut b = GraphBuilder::new(&spec);
    let c = b.call("con_open", &[], b"").unwrap().unwrap();
    b.call("pkt", &[c], b"USER a\r\n").unwrap();
    b.call("pkt", &[c], b"PASS b\r\n").unwrap();
    b.call("pkt", &[c], &site_line).unwrap();
    let (r, _) = run(&mut g, &b.build().unwrap());
    assert_eq!(r.exit, ExitKind::Crash(SITE_CRASH_MAGIC as u32));
}

#[test]
fn ftp_replies_and_errors() {
    let mut g = booted("ftp_like");
    let p = session(&["PWD\r\n", "USER x\r\n", "PASS y\r\n", "CWD pub\r\n", "PWD\r\n", "BOGUS\r\n", "QUIT\r\n"]);
    let (r, _) = run(&mut g, &p);
    assert_eq!(r.exit, ExitKind::Finished);
    assert_eq!(r.packets_consumed, 7);
    let t = String::from_utf8(g.net().transcript(0).unwrap().to_vec()).unwrap();
    assert!(t.ends_with("500 Unknown command\r\n221 Bye\r\n"));

    let p = session(&["PWD\r\n", "USER x\r\n", "PASS y\r\n", "CWD pub\r\n", "PWD\r\n", "BOGUS\r\n"]);
    run(&mut g, &p);
    let t = String::from_utf8(g.net().transcript(0).unwrap().to_vec()).unwrap();
    assert_eq!(
        t,
        "220 ftp_like ready\r\n530 Not logged in\r\n331 Password required\r\n230 Logged in\r\n\
         250 Directory changed\r\n257 \"/pub\"\r\n500 Unknown command\r\n"
    );
}

#[test]
fn lines_may_span_packets() {
    let mut g = booted("ftp_like");
    let (a, _) = run(&mut g, &session(&["USER a\r\n", "PASS b\r\n", "MODE X\r\n", "CRSH\r\n"]));
    let (b, _) = run(&mut g, &session(&["US", "ER a\r\nPASS b\r", "\nMODE X\r\nCR", "SH\r\n"]));
    assert_eq!(a.exit, b.exit);
}

#[test]
fn platformer_sanity_path() {
    let mut g = booted("platformer");
    let spec = spec();
    let mut last_x = i32::MIN;
    for n in 1..=160 {
        let p = frames_program(&spec, &vec![BUTTON_RIGHT | BUTTON_JUMP; n], 1).unwrap();
        let (r, _) = run(&mut g, &p);
        assert_eq!(r.exit, ExitKind::Finished);
        let x = i32::from_le_bytes(g.mem().read(0x20, 4).unwrap().try_into().unwrap());
        assert!(x >= last_x);
        last_x = x;
    }
}

/// Frame on which holding right alone first touches each spike gap, from
/// an independent step-by-step model of the physics.
const SPIKE_DEATH_FRAMES: [usize; 8] = [51, 103, 143, 203, 239, 303, 355, 411];

fn platformer_outcome(g: &mut Guest, frames: &[u8]) -> (ExitKind, i32) {
    let (r, _) = run(g, &frames_program(&spec(), frames, 1).unwrap());
    (r.exit, i32::from_le_bytes(g.mem().read(0x20, 4).unwrap().try_into().unwrap()))
}

#[test]
fn platformer_gaps_need_precise_jumps() {
    let mut g = booted("platformer");
    let mut frames = vec![BUTTON_RIGHT; 480];
    for (gap, &death) in SPIKE_DEATH_FRAMES.iter().enumerate() {
        let (exit, x) = platformer_outcome(&mut g, &frames);
        assert_eq!(exit, ExitKind::Finished, "gap {gap}");
        let dead = g.mem().read(0x30, 4).unwrap();
        assert_eq!(dead, 1u32.to_le_bytes(), "gap {gap}");
        let frame = u32::from_le_bytes(g.mem().read(0x34, 4).unwrap().try_into().unwrap()) as usize;
        assert_eq!(frame, death + 1, "gap {gap}");
        let mut window = Vec::new();
        for j in death.saturating_sub(20)..=death {
            let mut f = frames.clone();
            f[j] |= BUTTON_JUMP;
            let (e, nx) = platformer_outcome(&mut g, &f);
            if e != ExitKind::Finished || nx > x + 48 {
                window.push(j);
            }
        }
        assert_eq!(window, vec![death - 2, death - 1, death], "gap {gap}");
        frames[death - 1] |= BUTTON_JUMP;
    }
    let (exit, _) = platformer_outcome(&mut g, &frames);
    assert_eq!(exit, ExitKind::Crash(SITE_FLAG as u32));
    // Jumping on every frame lands in a gap.
    let (exit, _) = platformer_outcome(&mut g, &[BUTTON_RIGHT | BUTTON_JUMP; 480]);
    assert_eq!(exit, ExitKind::Finished);
}

#[test]
fn longprefix_reaches_suffix_code() {
    let t = LongPrefix::default();
    let seed = t.default_seeds(&spec()).remove(0);
    assert_eq!(seed.ops.len(), 121);
    let mut g = booted("longprefix");
    let (r, cov) = run(&mut g, &seed);
    assert_eq!(r.exit, ExitKind::Finished);
    assert_eq!(r.packets_consumed, 120);
    assert_eq!(r.ops_executed, 121);

    let mut deep = seed.clone();
    deep.ops.last_mut().unwrap().payload = b"DEEP".to_vec();
    let (_, deep_cov) = run(&mut g, &deep);
    let mut probe = CoverageMap::default();
    probe.record_edge(site_n(site("lp.deep.prefix"), 3), SITE_DEEP_BRANCH);
    let slot = probe.as_bytes().iter().position(|&b| b != 0).unwrap();
    assert!(deep_cov.get(slot) > 0);
    assert_eq!(cov.get(slot), 0);

    // A wrong handshake packet ends the session early.
    let mut bad = seed.clone();
    bad.ops[10].payload = b"nope".to_vec();
    let (r, _) = run(&mut g, &bad);
    assert_eq!(r.packets_consumed, 10);
    assert_eq!(g.status(), Status::Done);
}

#[test]
fn incremental_run_counts_only_the_suffix() {
    let mut g = booted("longprefix");
    let seed = LongPrefix::default().default_seeds(&spec()).remove(0);
    let marked = seed.with_snapshot(101);
    let mut cov = CoverageMap::default();
    let r = g.execute(&marked, Start::Root, SnapshotAction::CreateAndStop, &mut cov).unwrap();
    assert!(r.snapshot_created);
    assert_eq!(r.ops_executed, 101);
    let r = g.execute(&marked, Start::Incremental, SnapshotAction::Ignore, &mut cov).unwrap();
    assert_eq!(r.ops_executed, 20);
    assert_eq!(r.packets_consumed, 120);
    assert_eq!(g.counters().inc_created, 1);

    let mut other = marked.clone();
    other.ops[5].payload[0] ^= 1;
    assert!(matches!(
        g.execute(&other, Start::Incremental, SnapshotAction::Ignore, &mut cov),
        Err(ExecError::PrefixMismatch)
    ));
    g.discard_incremental();
    assert!(matches!(
        g.execute(&marked, Start::Incremental, SnapshotAction::Ignore, &mut cov),
        Err(ExecError::NoIncremental)
    ));
}

fn full_state(g: &Guest) -> (Vec<u8>, AuxState) {
    (g.mem().as_bytes().to_vec(), g.aux())
}

/// Executes `p` from root, then for every marker position compares against
/// prefix-from-root plus suffix-from-incremental.
fn check_equivalence(g: &mut Guest, p: &Program) {
    let p = p.without_snapshot();
    let (full, full_cov) = run(g, &p);
    let full_state = full_state(g);
    for k in 1..=p.ops.len() {
        let marked = p.with_snapshot(k);
        let mut prefix_cov = CoverageMap::default();
        let r = g.execute(&marked, Start::Root, SnapshotAction::CreateAndStop, &mut prefix_cov).unwrap();
        if !r.snapshot_created {
            // The target stopped inside the prefix; no suffix to compare.
            assert_ne!(full.exit, ExitKind::Finished, "k={k}");
            continue;
        }
        let mut cov = prefix_cov.clone();
        let r = g.execute(&marked, Start::Incremental, SnapshotAction::Ignore, &mut cov).unwrap();
        assert_eq!(r.exit, full.exit, "k={k}");
        assert_eq!(r.ops_executed, full.ops_executed - k, "k={k}");
        assert!(full_state == super::tests::full_state(g), "state differs at k={k}");
        assert!(cov == full_cov, "coverage differs at k={k}");
        // A second run from the same snapshot gives the same answer.
        let mut cov2 = prefix_cov.clone();
        g.execute(&marked, Start::Incremental, SnapshotAction::Ignore, &mut cov2).unwrap();
        assert!(cov2 == full_cov);
    }
}

#[test]
fn equivalence_on_six_packets() {
    let mut g = booted("ftp_like");
    check_equivalence(&mut g, &session(&["USER a\r\n", "PASS b\r\n", "STOR f hi\r\n", "MODE X\r\n", "RETR f\r\n", "CRSH\r\n"]));
    check_equivalence(&mut g, &session(&["USER a\r\n", "PA", "SS b\r\n", "LIST\r\n", "QUIT\r\n", "NOOP\r\n"]));
}

#[test]
fn no_hidden_state() {
    let spec = spec();
    let t = lookup("ftp_like", &TargetOptions::default()).unwrap();
    let (mut g, root) = boot(Arc::clone(&t), &spec, DEFAULT_OP_BUDGET).unwrap();
    let first = session(&["USER a\r\n", "PASS b\r\n"]);
    run(&mut g, &first);
    let (mem, aux) = g.into_state();
    let mut moved = Guest::from_state(Arc::clone(&t), &spec, Arc::clone(&root), mem, &aux, DEFAULT_OP_BUDGET).unwrap();

    // Continue both with the same extra input and compare.
    let mut reference = Guest::from_root(t, &spec, root, DEFAULT_OP_BUDGET).unwrap();
    run(&mut reference, &first);
    let mut c1 = CoverageMap::default();
    let mut c2 = CoverageMap::default();
    for g in [&mut moved, &mut reference] {
        g.net.deliver(0, b"MODE X\r\n");
    }
    let a = resume(moved.target.as_ref(), &mut moved.mem, &mut moved.cpu, &mut moved.net, &mut c1, DEFAULT_OP_BUDGET);
    let b = resume(reference.target.as_ref(), &mut reference.mem, &mut reference.cpu, &mut reference.net, &mut c2, DEFAULT_OP_BUDGET);
    assert_eq!(a, b);
    assert_eq!(full_state(&moved), full_state(&reference));
    assert!(c1 == c2);
}

#[test]
fn budget_exhaustion_is_a_timeout() {
    let mut g = booted("longprefix");
    g.set_op_budget(50);
    let seed = LongPrefix::default().default_seeds(&spec()).remove(0);
    let (r, _) = run(&mut g, &seed);
    assert_eq!(r.exit, ExitKind::Timeout);
}

fn arb_program(max_len: usize) -> impl Strategy<Value = Program> {
    let alphabet: Vec<&'static [u8]> = vec![
        b"USER a\r\n", b"PASS b\r\n", b"MODE X\r\n", b"CRSH\r\n", b"STOR f x\r\n", b"RETR f\r\n", b"QUIT\r\n",
        b"LIST\r\n", b"\r\n", b"CWD ..\r\n", b"PW", b"D\r\n",
    ];
    prop::collection::vec((0usize..4, prop::sample::select(alphabet), prop::bool::weighted(0.15)), 1..max_len).prop_map(|items| {
        let spec = FormatSpec::default();
        let mut b = GraphBuilder::new(&spec);
        let mut conns = vec![b.call("con_open", &[], b"").unwrap().unwrap()];
        for (c, payload, open) in items {
            if open {
                conns.push(b.call("con_open", &[], b"").unwrap().unwrap());
            } else {
                b.call("pkt", &[conns[c % conns.len()]], payload).unwrap();
            }
        }
        b.build().unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn incremental_equivalence_ftp(p in arb_program(8)) {
        let mut g = booted("ftp_like");
        check_equivalence(&mut g, &p);
    }

    #[test]
    fn replay_is_deterministic(p in arb_program(10)) {
        let mut g = booted("ftp_like");
        let (a, ca) = run(&mut g, &p);
        let sa = full_state(&g);
        let (b, cb) = run(&mut g, &p);
        prop_assert_eq!(a, b);
        prop_assert!(ca == cb);
        prop_assert!(sa == full_state(&g));
    }
}
