use std::path::PathBuf;

use snapnet::bytecode::{FormatSpec, NET_SPEC};
use snapnet::coverage::{CoverageMap, DEFAULT_MAP_SIZE};
use snapnet::guest::{boot, lookup, ExitKind, SnapshotAction, Start, TargetOptions, DEFAULT_OP_BUDGET};
use snapnet::seed_import::{dissect, import, load_dump, DumpFormat, Dissector};

fn session_dump() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("assets/ftp_session.jsonl")
}

#[test]
fn imported_session_replays_to_captured_transcript() {
    let spec = FormatSpec::parse(NET_SPEC).unwrap();
    let dump = load_dump(&session_dump(), DumpFormat::Jsonl).unwrap();
    let seed = import(&spec, &session_dump(), DumpFormat::Jsonl, Dissector::Crlf).unwrap();
    seed.validate(&spec).unwrap();

    let (mut g, _) = boot(lookup("ftp_like", &TargetOptions::default()).unwrap(), &spec, DEFAULT_OP_BUDGET).unwrap();
    let mut cov = CoverageMap::new(DEFAULT_MAP_SIZE);
    let r = g.execute(&seed, Start::Root, SnapshotAction::Ignore, &mut cov).unwrap();
    assert_eq!(r.exit, ExitKind::Finished);
    assert_eq!(g.net().transcript(0).unwrap(), dump.from_target_bytes().as_slice());
}

#[test]
fn dissectors_preserve_target_bytes() {
    let dump = load_dump(&session_dump(), DumpFormat::Jsonl).unwrap();
    let stream: Vec<u8> = dump.to_target().concat();
    for kind in [Dissector::Crlf, Dissector::AsIs] {
        let packets = dissect(&dump.to_target(), kind).unwrap();
        assert_eq!(packets.concat(), stream, "{kind}");
    }
    let crlf = dissect(&dump.to_target(), Dissector::Crlf).unwrap();
    assert!(crlf.iter().all(|p| p.ends_with(b"\r\n")));
    assert_eq!(dissect(&dump.to_target(), Dissector::AsIs).unwrap().len(), dump.to_target().len());
}

#[test]
fn rawdir_matches_jsonl() {
    let spec = FormatSpec::parse(NET_SPEC).unwrap();
    let dump = load_dump(&session_dump(), DumpFormat::Jsonl).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for (i, r) in dump.records.iter().enumerate() {
        let tag = match r.dir {
            snapnet::seed_import::Direction::ToTarget => "c2s",
            snapnet::seed_import::Direction::FromTarget => "s2c",
        };
        std::fs::write(dir.path().join(format!("{:03}_{tag}.bin", i + 1)), &r.payload).unwrap();
    }
    let raw = load_dump(dir.path(), DumpFormat::RawDir).unwrap();
    assert_eq!(raw.records, dump.records);
    let a = import(&spec, &session_dump(), DumpFormat::Jsonl, Dissector::Crlf).unwrap();
    let b = import(&spec, dir.path(), DumpFormat::RawDir, Dissector::Crlf).unwrap();
    assert_eq!(a, b);
}
