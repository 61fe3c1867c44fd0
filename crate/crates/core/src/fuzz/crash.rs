use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::bytecode::Program;
use crate::guest::ExitKind;

/// Replays before a crash is filed; every one must crash at the same site.
pub const REPLAYS: usize = 3;
pub const MAX_REPRODUCERS: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrashRecord {
    pub id: usize,
    pub site: u32,
    /// Content hashes of the reproducers filed for this site.
    pub reproducers: Vec<u64>,
    /// Campaign exec count when the site was first filed.
    pub first_exec: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrashVerdict {
    New(usize),
    /// Known site; the reproducer was added unless the cap was reached.
    Duplicate(usize),
    /// Did not crash at the same site on every replay.
    Quarantined,
}

/// Crashes of one target, deduplicated by site.
#[derive(Debug)]
pub struct CrashStore {
    dir: Option<PathBuf>,
    by_site: BTreeMap<u32, CrashRecord>,
    quarantined: Vec<(u32, u64)>,
}

pub fn reproducer_name(site: u32, hash: u64) -> String {
    format!("site_{site:08x}_{hash:016x}.nxb")
}

/// Writes `bytes` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    static NEXT: AtomicU64 = AtomicU64::new(0);
    let n = NEXT.fetch_add(1, Ordering::Relaxed);
    let tmp = path.with_extension(format!("tmp.{}.{n}", std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

impl CrashStore {
    /// A store that keeps records in memory and, with `dir`, writes
    /// reproducers under it (quarantined ones under `dir/quarantine`).
    pub fn new(dir: Option<PathBuf>) -> io::Result<Self> {
        if let Some(d) = &dir {
            fs::create_dir_all(d.join("quarantine"))?;
        }
        Ok(CrashStore {
            dir,
            by_site: BTreeMap::new(),
            quarantined: Vec::new(),
        })
    }

    pub fn unique(&self) -> usize {
        self.by_site.len()
    }

    pub fn get(&self, site: u32) -> Option<&CrashRecord> {
        self.by_site.get(&site)
    }

    pub fn records(&self) -> impl Iterator<Item = &CrashRecord> {
        self.by_site.values()
    }

    pub fn quarantined(&self) -> &[(u32, u64)] {
        &self.quarantined
    }

    /// Files a crash at `site` after replaying `program` through `replay`.
    pub fn report(
        &mut self,
        program: &Program,
        site: u32,
        exec: u64,
        mut replay: impl FnMut(&Program) -> ExitKind,
    ) -> io::Result<CrashVerdict> {
        let hash = program.content_hash();
        if let Some(rec) = self.by_site.get(&site) {
            if rec.reproducers.len() >= MAX_REPRODUCERS || rec.reproducers.contains(&hash) {
                return Ok(CrashVerdict::Duplicate(rec.id));
            }
        }
        if !(0..REPLAYS).all(|_| replay(program) == ExitKind::Crash(site)) {
            if let Some(d) = &self.dir {
                write_atomic(&d.join("quarantine").join(reproducer_name(site, hash)), &program.serialize())?;
            }
            self.quarantined.push((site, hash));
            return Ok(CrashVerdict::Quarantined);
        }
        if let Some(d) = &self.dir {
            write_atomic(&d.join(reproducer_name(site, hash)), &program.serialize())?;
        }
        let next_id = self.by_site.len();
        match self.by_site.get_mut(&site) {
            Some(rec) => {
                rec.reproducers.push(hash);
                Ok(CrashVerdict::Duplicate(rec.id))
            }
            None => {
                self.by_site.insert(
                    site,
                    CrashRecord {
                        id: next_id,
                        site,
                        reproducers: vec![hash],
                        first_exec: exec,
                    },
                );
                Ok(CrashVerdict::New(next_id))
            }
        }
    }
}
