//! Runs a batch of programs from the root across a pool of guests that
//! share one root snapshot.

use std::sync::Arc;

use crate::bytecode::{FormatSpec, Program};
use crate::coverage::CoverageMap;
use crate::guest::{boot, BootError, ExecError, ExitKind, Guest, SnapshotAction, Start, Target};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Sequential,
    /// Data-parallel over guests; sequential when built without the
    /// `parallel` feature.
    Parallel,
}

pub struct Pool {
    guests: Vec<Guest>,
    map_size: usize,
}

impl Pool {
    pub fn new(target: Arc<dyn Target>, spec: &FormatSpec, size: usize, op_budget: u64, map_size: usize) -> Result<Pool, BootError> {
        let (first, root) = boot(Arc::clone(&target), spec, op_budget)?;
        let mut guests = vec![first];
        for _ in 1..size.max(1) {
            guests.push(Guest::from_root(Arc::clone(&target), spec, Arc::clone(&root), op_budget)?);
        }
        Ok(Pool { guests, map_size })
    }

    pub fn len(&self) -> usize {
        self.guests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.guests.is_empty()
    }

    /// Exit of every program, in input order.
    pub fn run(&mut self, programs: &[Program], mode: Mode) -> Result<Vec<ExitKind>, ExecError> {
        let chunk = programs.len().div_ceil(self.guests.len()).max(1);
        let map_size = self.map_size;
        let work = |(g, ps): (&mut Guest, &[Program])| -> Result<Vec<ExitKind>, ExecError> {
            let mut cov = CoverageMap::new(map_size);
            ps.iter()
                .map(|p| {
                    cov.clear();
                    g.execute(p, Start::Root, SnapshotAction::Ignore, &mut cov).map(|r| r.exit)
                })
                .collect()
        };
        let parts: Vec<Vec<ExitKind>> = match mode {
            #[cfg(feature = "parallel")]
            Mode::Parallel => {
                use rayon::prelude::*;
                self.guests.par_iter_mut().zip(programs.par_chunks(chunk)).map(work).collect::<Result<_, _>>()?
            }
            _ => self.guests.iter_mut().zip(programs.chunks(chunk)).map(work).collect::<Result<_, _>>()?,
        };
        Ok(parts.concat())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bytecode::{GraphBuilder, NET_SPEC};
    use crate::coverage::DEFAULT_MAP_SIZE;
    use crate::guest::{FtpLike, DEFAULT_OP_BUDGET, SITE_CRASH_SEQUENCE};

    #[test]
    fn modes_agree() {
        let spec = FormatSpec::parse(NET_SPEC).unwrap();
        let mut programs = Vec::new();
        for i in 0..37 {
            let mut b = GraphBuilder::new(&spec);
            let c = b.call("con_open", &[], b"").unwrap().unwrap();
            let lines: &[&str] = if i % 5 == 0 {
                &["USER a\r\n", "PASS b\r\n", "MODE X\r\n", "CRSH\r\n"]
            } else {
                &["USER a\r\n", "NOOP\r\n"]
            };
            for l in lines {
                b.call("pkt", &[c], l.as_bytes()).unwrap();
            }
            programs.push(b.build().unwrap());
        }
        let mut pool = Pool::new(Arc::new(FtpLike), &spec, 4, DEFAULT_OP_BUDGET, DEFAULT_MAP_SIZE).unwrap();
        let seq = pool.run(&programs, Mode::Sequential).unwrap();
        let par = pool.run(&programs, Mode::Parallel).unwrap();
        assert_eq!(seq, par);
        assert_eq!(seq.len(), 37);
        for (i, e) in seq.iter().enumerate() {
            let want = if i % 5 == 0 { ExitKind::Crash(SITE_CRASH_SEQUENCE as u32) } else { ExitKind::Finished };
            assert_eq!(*e, want);
        }
    }
}
