//! Captured sessions to seed programs.
//!
//! Two capture formats are read:
//!
//! * `jsonl`: one `{"dir": "c2s" | "s2c", "payload": "<hex>"}` object per line.
//! * `rawdir`: a directory of `NNN_c2s.bin` / `NNN_s2c.bin` files taken in
//!   lexical order.
//!
//! Only client-to-target (`c2s`) bytes end up in a seed. Replies are kept in
//! the dump so a replay can be compared against them.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Deserialize;
use thiserror::Error;

use crate::bytecode::{BuildError, FormatSpec, GraphBuilder, Program, SpecError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    ToTarget,
    FromTarget,
}

impl Direction {
    fn parse(s: &str) -> Option<Direction> {
        match s {
            "c2s" => Some(Direction::ToTarget),
            "s2c" => Some(Direction::FromTarget),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub dir: Direction,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PacketDump {
    pub records: Vec<Record>,
    pub source: PathBuf,
}

impl PacketDump {
    /// Payloads sent to the target, in capture order.
    pub fn to_target(&self) -> Vec<&[u8]> {
        self.records.iter().filter(|r| r.dir == Direction::ToTarget).map(|r| r.payload.as_slice()).collect()
    }

    pub fn from_target_bytes(&self) -> Vec<u8> {
        self.records
            .iter()
            .filter(|r| r.dir == Direction::FromTarget)
            .flat_map(|r| r.payload.iter().copied())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DumpFormat {
    Jsonl,
    RawDir,
}

impl FromStr for DumpFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "jsonl" => Ok(DumpFormat::Jsonl),
            "rawdir" => Ok(DumpFormat::RawDir),
            other => Err(format!("unknown dump format `{other}` (expected jsonl or rawdir)")),
        }
    }
}

#[derive(Debug, Error)]
pub enum DumpError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {reason}")]
    Line { path: PathBuf, line: usize, reason: String },
    #[error("{path}: file name must look like NNN_c2s.bin or NNN_s2c.bin")]
    FileName { path: PathBuf },
    #[error("{path}: empty payload")]
    EmptyFile { path: PathBuf },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonRecord {
    dir: String,
    payload: String,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DumpError + '_ {
    move |source| DumpError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn load_dump(path: &Path, format: DumpFormat) -> Result<PacketDump, DumpError> {
    match format {
        DumpFormat::Jsonl => {
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            parse_jsonl(&text, path)
        }
        DumpFormat::RawDir => load_rawdir(path),
    }
}

/// Parses jsonl text; `source` is only used in error messages.
pub fn parse_jsonl(text: &str, source: &Path) -> Result<PacketDump, DumpError> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |reason: String| DumpError::Line {
            path: source.to_path_buf(),
            line: i + 1,
            reason,
        };
        let rec: JsonRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        let dir = Direction::parse(&rec.dir).ok_or_else(|| err(format!("bad direction `{}`", rec.dir)))?;
        let payload = hex::decode(&rec.payload).map_err(|e| err(format!("bad hex payload: {e}")))?;
        if payload.is_empty() {
            return Err(err("empty payload".into()));
        }
        records.push(Record { dir, payload });
    }
    Ok(PacketDump {
        records,
        source: source.to_path_buf(),
    })
}

fn load_rawdir(dir: &Path) -> Result<PacketDump, DumpError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .map(|e| e.map(|e| e.path()).map_err(io_err(dir)))
        .collect::<Result<_, _>>()?;
    files.sort();
    let mut records = Vec::new();
    for path in files {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        let dir_tag = name
            .strip_suffix(".bin")
            .and_then(|stem| stem.split_once('_'))
            .filter(|(num, _)| !num.is_empty() && num.bytes().all(|b| b.is_ascii_digit()))
            .and_then(|(_, tag)| Direction::parse(tag));
        let Some(d) = dir_tag else {
            return Err(DumpError::FileName { path });
        };
        let payload = fs::read(&path).map_err(io_err(&path))?;
        if payload.is_empty() {
            return Err(DumpError::EmptyFile { path });
        }
        records.push(Record { dir: d, payload });
    }
    Ok(PacketDump {
        records,
        source: dir.to_path_buf(),
    })
}

/// Rule for cutting the to-target byte stream into packets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dissector {
    /// Cut after every CR LF; a trailing partial line is its own packet.
    Crlf,
    /// Frames with a 2-byte big-endian length header.
    LenPrefix,
    /// Keep the captured record boundaries.
    AsIs,
}

impl FromStr for Dissector {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "crlf" => Ok(Dissector::Crlf),
            "lenprefix" => Ok(Dissector::LenPrefix),
            "asis" => Ok(Dissector::AsIs),
            other => Err(format!("unknown dissector `{other}` (expected crlf, lenprefix or asis)")),
        }
    }
}

impl fmt::Display for Dissector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dissector::Crlf => "crlf",
            Dissector::LenPrefix => "lenprefix",
            Dissector::AsIs => "asis",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DissectError {
    #[error("truncated frame at offset {offset}: header says {want} bytes, {have} remain")]
    Truncated { offset: usize, want: usize, have: usize },
    #[error("zero-length frame at offset {0}")]
    EmptyFrame(usize),
}

/// Splits the concatenation of `records` into packets.
pub fn dissect(records: &[&[u8]], kind: Dissector) -> Result<Vec<Vec<u8>>, DissectError> {
    match kind {
        Dissector::AsIs => Ok(records.iter().filter(|r| !r.is_empty()).map(|r| r.to_vec()).collect()),
        Dissector::Crlf => Ok(split_crlf(&records.concat())),
        Dissector::LenPrefix => split_lenprefix(&records.concat()),
    }
}

fn split_crlf(stream: &[u8]) -> Vec<Vec<u8>> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i + 1 < stream.len() {
        if stream[i] == b'\r' && stream[i + 1] == b'\n' {
            out.push(stream[start..i + 2].to_vec());
            start = i + 2;
            i += 2;
        } else {
            i += 1;
        }
    }
    if start < stream.len() {
        out.push(stream[start..].to_vec());
    }
    out
}

fn split_lenprefix(stream: &[u8]) -> Result<Vec<Vec<u8>>, DissectError> {
    let mut out = Vec::new();
    let mut at = 0;
    while at < stream.len() {
        if at + 2 > stream.len() {
            return Err(DissectError::Truncated {
                offset: at,
                want: 2,
                have: stream.len() - at,
            });
        }
        let len = u16::from_be_bytes([stream[at], stream[at + 1]]) as usize;
        if len == 0 {
            return Err(DissectError::EmptyFrame(at));
        }
        let body = at + 2;
        if body + len > stream.len() {
            return Err(DissectError::Truncated {
                offset: at,
                want: len,
                have: stream.len() - body,
            });
        }
        out.push(stream[body..body + len].to_vec());
        at = body + len;
    }
    Ok(out)
}

#[derive(Debug, Error)]
pub enum SeedError {
    #[error("no packets to build a seed from")]
    NoPackets,
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Build(#[from] BuildError),
}

/// One connection followed by one packet op per packet.
pub fn build_seed(spec: &FormatSpec, packets: &[Vec<u8>]) -> Result<Program, SeedError> {
    if packets.is_empty() {
        return Err(SeedError::NoPackets);
    }
    let binding = spec.net_binding()?;
    let name = |id: u16| spec.node(id).map(|n| n.name.clone()).unwrap_or_default();
    let (connect, packet) = (name(binding.connect), name(binding.packet));
    let mut b = GraphBuilder::new(spec);
    let con = b.call(&connect, &[], b"")?.ok_or(SpecError::MissingRole("connection"))?;
    for p in packets {
        b.call(&packet, &[con], p)?;
    }
    Ok(b.build()?)
}

/// Loads, dissects and builds in one step.
pub fn import(spec: &FormatSpec, path: &Path, format: DumpFormat, dissector: Dissector) -> Result<Program, ImportError> {
    let dump = load_dump(path, format)?;
    let packets = dissect(&dump.to_target(), dissector)?;
    Ok(build_seed(spec, &packets)?)
}

#[derive(Debug, Error)]
pub enum ImportError {
    #[error(transparent)]
    Dump(#[from] DumpError),
    #[error(transparent)]
    Dissect(#[from] DissectError),
    #[error(transparent)]
    Seed(#[from] SeedError),
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(s: &str) -> Vec<u8> {
        s.as_bytes().to_vec()
    }

    #[test]
    fn crlf_examples() {
        assert_eq!(dissect(&[b"USER a\r\nPASS b\r\n"], Dissector::Crlf).unwrap(), vec![p("USER a\r\n"), p("PASS b\r\n")]);
        assert_eq!(dissect(&[b"abc"], Dissector::Crlf).unwrap(), vec![p("abc")]);
        // A delimiter split across records still cuts once.
        assert_eq!(dissect(&[b"AB\r", b"\nCD"], Dissector::Crlf).unwrap(), vec![p("AB\r\n"), p("CD")]);
        assert_eq!(dissect(&[b"\r\n\r\n"], Dissector::Crlf).unwrap(), vec![p("\r\n"), p("\r\n")]);
    }

    #[test]
    fn lenprefix_examples() {
        let s = [0u8, 3, b'x', b'y', b'z', 0, 1, b'q'];
        assert_eq!(dissect(&[&s], Dissector::LenPrefix).unwrap(), vec![p("xyz"), p("q")]);
        assert_eq!(
            dissect(&[&[0, 5, b'a']], Dissector::LenPrefix).unwrap_err(),
            DissectError::Truncated { offset: 0, want: 5, have: 1 }
        );
        assert!(matches!(dissect(&[&[0, 1, b'a', 0]], Dissector::LenPrefix), Err(DissectError::Truncated { offset: 3, .. })));
    }

    #[test]
    fn asis_keeps_boundaries() {
        assert_eq!(dissect(&[b"AB\r", b"\nCD"], Dissector::AsIs).unwrap(), vec![p("AB\r"), p("\nCD")]);
    }

    #[test]
    fn jsonl_records_in_order() {
        let text = "{\"dir\":\"c2s\",\"payload\":\"4142\"}\n{\"dir\":\"s2c\",\"payload\":\"43\"}\n\n{\"dir\":\"c2s\",\"payload\":\"44\"}\n";
        let d = parse_jsonl(text, Path::new("t.jsonl")).unwrap();
        assert_eq!(d.records.len(), 3);
        assert_eq!(d.to_target(), vec![b"AB".as_slice(), b"D"]);
        assert_eq!(d.from_target_bytes(), b"C");
    }

    #[test]
    fn jsonl_errors_name_line() {
        let text = "{\"dir\":\"c2s\",\"payload\":\"41\"}\n{\"dir\":\"c2s\",\"payload\":\"zz\"}\n";
        match parse_jsonl(text, Path::new("t.jsonl")) {
            Err(DumpError::Line { line: 2, reason, .. }) => assert!(reason.contains("hex")),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse_jsonl("{\"dir\":\"up\",\"payload\":\"41\"}", Path::new("t")),
            Err(DumpError::Line { line: 1, .. })
        ));
        assert!(matches!(parse_jsonl("{\"dir\":\"c2s\",\"payload\":\"\"}", Path::new("t")), Err(DumpError::Line { line: 1, .. })));
        assert!(matches!(parse_jsonl("not json", Path::new("t")), Err(DumpError::Line { line: 1, .. })));
    }

    #[test]
    fn rawdir_lexical_order() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("002_s2c.bin"), b"hi").unwrap();
        fs::write(dir.path().join("001_c2s.bin"), b"yo").unwrap();
        let d = load_dump(dir.path(), DumpFormat::RawDir).unwrap();
        assert_eq!(
            d.records,
            vec![
                Record {
                    dir: Direction::ToTarget,
                    payload: p("yo")
                },
                Record {
                    dir: Direction::FromTarget,
                    payload: p("hi")
                },
            ]
        );
        fs::write(dir.path().join("003_up.bin"), b"x").unwrap();
        assert!(matches!(load_dump(dir.path(), DumpFormat::RawDir), Err(DumpError::FileName { .. })));
    }

    #[test]
    fn seed_shape() {
        let spec = FormatSpec::default();
        let s = build_seed(&spec, &[p("a"), p("b")]).unwrap();
        assert_eq!(s.ops.len(), 3);
        assert!(s.validate(&spec).is_ok());
        assert!(matches!(build_seed(&spec, &[]), Err(SeedError::NoPackets)));
    }

    #[test]
    fn seed_needs_network_nodes() {
        let spec = FormatSpec::parse("data d\nnode blob data d\n").unwrap();
        assert!(matches!(build_seed(&spec, &[p("a")]), Err(SeedError::Spec(_))));
    }

    proptest! {
        /// Dissection never loses or reorders to-target bytes.
        #[test]
        fn lossless(records in prop::collection::vec(prop::collection::vec(prop_oneof![Just(b'\r'), Just(b'\n'), any::<u8>()], 1..20), 1..10)) {
            let refs: Vec<&[u8]> = records.iter().map(|r| r.as_slice()).collect();
            let whole = records.concat();
            for kind in [Dissector::Crlf, Dissector::AsIs] {
                let packets = dissect(&refs, kind).unwrap();
                prop_assert!(packets.iter().all(|p| !p.is_empty()));
                prop_assert_eq!(packets.concat(), whole.clone());
                let seed = build_seed(&FormatSpec::default(), &packets).unwrap();
                let payloads: Vec<u8> = seed.ops.iter().flat_map(|o| o.payload.iter().copied()).collect();
                prop_assert_eq!(payloads, whole.clone());
            }
        }

        #[test]
        fn lenprefix_roundtrip(frames in prop::collection::vec(prop::collection::vec(any::<u8>(), 1..40), 0..10)) {
            let mut stream = Vec::new();
            for f in &frames {
                stream.extend_from_slice(&(f.len() as u16).to_be_bytes());
                stream.extend_from_slice(f);
            }
            prop_assert_eq!(dissect(&[&stream], Dissector::LenPrefix).unwrap(), frames);
        }
    }
}
