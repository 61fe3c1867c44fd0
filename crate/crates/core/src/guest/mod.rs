//! Deterministic simulated targets and the engine that drives them with
//! bytecode programs.
//!
//! A target keeps every mutable byte in the guest's paged memory. Registers
//! (`Cpu`) and the socket layer travel in the aux blob, so a snapshot of
//! memory plus aux is a complete image of the guest.

mod ftp_like;
mod longprefix;
mod platformer;
mod registry;
mod sys;

use std::sync::Arc;

use thiserror::Error;

use crate::bytecode::{FormatSpec, NetBinding, Program, SpecError};
use crate::coverage::CoverageMap;
use crate::net::EmuNet;
use crate::paged::{AuxState, IncrementalSnapshot, MemError, PagedMemory, RootSnapshot, DEFAULT_PAGE_SIZE, DEFAULT_REMIRROR_INTERVAL};
use crate::wire::{Reader, WireError, Writer};

pub use ftp_like::{FtpLike, CRASH_MAGIC, SESSION_SEED, SITE_CRASH_MAGIC, SITE_CRASH_SEQUENCE};
pub use longprefix::{handshake_packet, LongPrefix, DEFAULT_HANDSHAKE, SITE_DEEP_BRANCH};
pub use platformer::{frames_program, Level, LevelError, Platformer, BUTTON_JUMP, BUTTON_LEFT, BUTTON_RIGHT, LEVEL1, SEED_FRAMES_PER_PACKET, SITE_FLAG};
pub use registry::{lookup, TargetOptions, UnknownTarget, TARGET_NAMES};
pub use sys::{site, site_n, Cpu, Status, Sys, Trap, Yield, FAULT_SITE};

pub const DEFAULT_OP_BUDGET: u64 = 1_000_000;

/// Stateless transition logic of a simulated program.
pub trait Target: Send + Sync + std::fmt::Debug {
    fn name(&self) -> &str;

    /// Memory size in pages of [`DEFAULT_PAGE_SIZE`] bytes.
    fn mem_pages(&self) -> usize;

    /// Runs until the target needs input or exits. Called first with
    /// `Status::Booting` memory (all zero) to initialise.
    fn run(&self, sys: &mut Sys<'_>) -> Result<Yield, Trap>;

    /// Built-in seed programs over the default network spec.
    fn default_seeds(&self, spec: &FormatSpec) -> Vec<Program>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExitKind {
    Finished,
    Crash(u32),
    Timeout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExecResult {
    pub exit: ExitKind,
    /// Ops run in this call; excludes the frozen prefix when starting from
    /// an incremental snapshot.
    pub ops_executed: usize,
    /// Packets the target has consumed since boot.
    pub packets_consumed: u64,
    /// Payload bytes handed to the socket layer in this call.
    pub bytes_delivered: u64,
    pub snapshot_created: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Start {
    Root,
    Incremental,
}

/// What to do when the program's snapshot marker is reached.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SnapshotAction {
    Ignore,
    CreateAndContinue,
    CreateAndStop,
}

#[derive(Debug, Error)]
pub enum BootError {
    #[error("target crashed during boot at site {0:#x}")]
    Crashed(u32),
    #[error("target exceeded its budget during boot")]
    Timeout,
    #[error("target exited during boot")]
    Exited,
    #[error(transparent)]
    Memory(#[from] MemError),
    #[error(transparent)]
    Spec(#[from] SpecError),
}

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("no incremental snapshot available")]
    NoIncremental,
    #[error("program prefix differs from the one the incremental snapshot was taken from")]
    PrefixMismatch,
    #[error("snapshot marker at {marker} does not match the incremental snapshot at {snapshot}")]
    MarkerMismatch { marker: usize, snapshot: usize },
    #[error("program references op slot {0} that is not a connection")]
    BadReference(u32),
    #[error(transparent)]
    Memory(#[from] MemError),
    #[error("corrupt aux state: {0}")]
    Aux(#[from] WireError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GuestCounters {
    pub execs: u64,
    pub ops_executed: u64,
    pub inc_created: u64,
    pub inc_restores: u64,
    pub root_restores: u64,
}

struct IncState {
    snap: IncrementalSnapshot,
    index: usize,
    prefix: Vec<u8>,
    valid: bool,
}

/// One simulated machine: memory, aux state and a target.
pub struct Guest {
    target: Arc<dyn Target>,
    binding: NetBinding,
    mem: PagedMemory,
    cpu: Cpu,
    net: EmuNet,
    root: Arc<RootSnapshot>,
    inc: Option<IncState>,
    op_budget: u64,
    remirror_interval: u32,
    counters: GuestCounters,
}

fn encode_aux(cpu: &Cpu, net: &EmuNet) -> AuxState {
    let mut w = Writer::new();
    cpu.encode(&mut w);
    net.encode(&mut w);
    AuxState(w.finish())
}

fn decode_aux(aux: &AuxState) -> Result<(Cpu, EmuNet), WireError> {
    let mut r = Reader::new(aux.as_bytes());
    let cpu = Cpu::decode(&mut r)?;
    let net = EmuNet::decode(&mut r)?;
    r.expect_end()?;
    Ok((cpu, net))
}

fn resume(
    target: &dyn Target,
    mem: &mut PagedMemory,
    cpu: &mut Cpu,
    net: &mut EmuNet,
    cov: &mut CoverageMap,
    budget: u64,
) -> Result<Yield, Trap> {
    let mut sys = Sys {
        mem,
        net,
        cpu,
        cov,
        budget,
    };
    let r = target.run(&mut sys);
    cpu.status = match &r {
        Ok(Yield::Blocked) => Status::AwaitingInput,
        Ok(Yield::Exit) => Status::Done,
        Err(_) => Status::Crashed,
    };
    r
}

/// Boots `target` until it first waits for input and captures the root
/// snapshot there.
pub fn boot(target: Arc<dyn Target>, spec: &FormatSpec, op_budget: u64) -> Result<(Guest, Arc<RootSnapshot>), BootError> {
    let binding = spec.net_binding()?;
    let mut mem = PagedMemory::new(target.mem_pages(), DEFAULT_PAGE_SIZE)?;
    let mut cpu = Cpu::default();
    let mut net = EmuNet::new();
    let mut scratch = CoverageMap::new(1 << 12);
    match resume(target.as_ref(), &mut mem, &mut cpu, &mut net, &mut scratch, op_budget) {
        Ok(Yield::Blocked) => {}
        Ok(Yield::Exit) => return Err(BootError::Exited),
        Err(Trap::Timeout) => return Err(BootError::Timeout),
        Err(t) => return Err(BootError::Crashed(t.site().unwrap_or(FAULT_SITE))),
    }
    // Steps spent booting are not charged to test cases.
    cpu.steps = 0;
    let root = Arc::new(RootSnapshot::capture(&mut mem, encode_aux(&cpu, &net)));
    let guest = Guest {
        target,
        binding,
        mem,
        cpu,
        net,
        root: Arc::clone(&root),
        inc: None,
        op_budget,
        remirror_interval: DEFAULT_REMIRROR_INTERVAL,
        counters: GuestCounters::default(),
    };
    Ok((guest, root))
}

impl Guest {
    /// A new guest sharing an existing root snapshot.
    pub fn from_root(target: Arc<dyn Target>, spec: &FormatSpec, root: Arc<RootSnapshot>, op_budget: u64) -> Result<Guest, BootError> {
        let mem = root.instantiate();
        let (cpu, net) = decode_aux(root.aux()).map_err(|_| BootError::Exited)?;
        Ok(Guest {
            target,
            binding: spec.net_binding()?,
            mem,
            cpu,
            net,
            root,
            inc: None,
            op_budget,
            remirror_interval: DEFAULT_REMIRROR_INTERVAL,
            counters: GuestCounters::default(),
        })
    }

    /// A guest shell around existing state, used to show that memory plus
    /// aux carry everything.
    pub fn from_state(
        target: Arc<dyn Target>,
        spec: &FormatSpec,
        root: Arc<RootSnapshot>,
        mem: PagedMemory,
        aux: &AuxState,
        op_budget: u64,
    ) -> Result<Guest, ExecError> {
        let (cpu, net) = decode_aux(aux)?;
        Ok(Guest {
            target,
            binding: spec.net_binding().map_err(|_| ExecError::BadReference(0))?,
            mem,
            cpu,
            net,
            root,
            inc: None,
            op_budget,
            remirror_interval: DEFAULT_REMIRROR_INTERVAL,
            counters: GuestCounters::default(),
        })
    }

    pub fn set_remirror_interval(&mut self, n: u32) {
        self.remirror_interval = n.max(1);
    }

    pub fn set_op_budget(&mut self, n: u64) {
        self.op_budget = n;
    }

    pub fn target(&self) -> &Arc<dyn Target> {
        &self.target
    }

    pub fn root(&self) -> &Arc<RootSnapshot> {
        &self.root
    }

    pub fn mem(&self) -> &PagedMemory {
        &self.mem
    }

    pub fn net(&self) -> &EmuNet {
        &self.net
    }

    pub fn cpu(&self) -> &Cpu {
        &self.cpu
    }

    pub fn status(&self) -> Status {
        self.cpu.status
    }

    /// Current aux state in serialized form.
    pub fn aux(&self) -> AuxState {
        encode_aux(&self.cpu, &self.net)
    }

    pub fn into_state(self) -> (PagedMemory, AuxState) {
        let aux = self.aux();
        (self.mem, aux)
    }

    pub fn counters(&self) -> GuestCounters {
        self.counters
    }

    pub fn binding(&self) -> NetBinding {
        self.binding
    }

    /// Op index of the usable incremental snapshot, if any.
    pub fn incremental_index(&self) -> Option<usize> {
        self.inc.as_ref().filter(|i| i.valid).map(|i| i.index)
    }

    pub fn incremental(&self) -> Option<&IncrementalSnapshot> {
        self.inc.as_ref().filter(|i| i.valid).map(|i| &i.snap)
    }

    /// Marks the incremental snapshot unusable. Its storage is kept for
    /// recycling by the next creation.
    pub fn discard_incremental(&mut self) {
        if let Some(i) = self.inc.as_mut() {
            i.valid = false;
        }
    }

    pub fn restore_root(&mut self) -> Result<(), ExecError> {
        self.mem.restore_root(&self.root)?;
        let (cpu, net) = decode_aux(self.root.aux())?;
        self.cpu = cpu;
        self.net = net;
        self.counters.root_restores += 1;
        Ok(())
    }

    fn restore_incremental(&mut self) -> Result<(), ExecError> {
        let inc = self.inc.as_ref().filter(|i| i.valid).ok_or(ExecError::NoIncremental)?;
        self.mem.restore_incremental(&inc.snap)?;
        let (cpu, net) = decode_aux(inc.snap.aux())?;
        self.cpu = cpu;
        self.net = net;
        self.counters.inc_restores += 1;
        Ok(())
    }

    fn create_incremental(&mut self, p: &Program, index: usize) -> Result<(), ExecError> {
        let aux = encode_aux(&self.cpu, &self.net);
        let prior = self.inc.take().map(|i| i.snap);
        let snap = IncrementalSnapshot::capture(&mut self.mem, &self.root, aux, prior, self.remirror_interval)?;
        self.inc = Some(IncState {
            snap,
            index,
            prefix: p.prefix_fingerprint(index),
            valid: true,
        });
        self.counters.inc_created += 1;
        Ok(())
    }

    /// Executes `p` from the chosen snapshot. The guest is left in whatever
    /// state the test produced.
    pub fn execute(
        &mut self,
        p: &Program,
        start: Start,
        action: SnapshotAction,
        cov: &mut CoverageMap,
    ) -> Result<ExecResult, ExecError> {
        let first_op = match start {
            Start::Root => {
                self.restore_root()?;
                0
            }
            Start::Incremental => {
                let inc = self.inc.as_ref().filter(|i| i.valid).ok_or(ExecError::NoIncremental)?;
                if let Some(marker) = p.snapshot_index {
                    if marker != inc.index {
                        return Err(ExecError::MarkerMismatch {
                            marker,
                            snapshot: inc.index,
                        });
                    }
                }
                if p.ops.len() < inc.index || p.prefix_fingerprint(inc.index) != inc.prefix {
                    return Err(ExecError::PrefixMismatch);
                }
                let index = inc.index;
                self.restore_incremental()?;
                index
            }
        };
        let create_at = match (start, action) {
            (Start::Root, SnapshotAction::CreateAndContinue | SnapshotAction::CreateAndStop) => p.snapshot_index,
            _ => None,
        };

        let mut res = ExecResult {
            exit: ExitKind::Finished,
            ops_executed: 0,
            packets_consumed: 0,
            bytes_delivered: 0,
            snapshot_created: false,
        };
        self.counters.execs += 1;
        let mut stopped = false;
        let mut i = first_op;
        loop {
            if create_at == Some(i) && matches!(self.cpu.status, Status::AwaitingInput) {
                self.create_incremental(p, i)?;
                res.snapshot_created = true;
                if action == SnapshotAction::CreateAndStop {
                    stopped = true;
                    break;
                }
            }
            let Some(op) = p.ops.get(i) else { break };
            if self.cpu.status != Status::AwaitingInput {
                break;
            }
            if op.node == self.binding.connect {
                self.net.open_connection(i as u32);
            } else if op.node == self.binding.packet {
                let slot = op.args[0];
                match p.ops.get(slot as usize) {
                    Some(o) if o.node == self.binding.connect => {}
                    _ => return Err(ExecError::BadReference(slot)),
                }
                self.net.deliver(slot, &op.payload);
                res.bytes_delivered += op.payload.len() as u64;
            }
            res.ops_executed += 1;
            i += 1;
            if let Err(t) = resume(self.target.as_ref(), &mut self.mem, &mut self.cpu, &mut self.net, cov, self.op_budget) {
                res.exit = trap_exit(&t);
                break;
            }
        }
        if !stopped && self.cpu.status == Status::AwaitingInput {
            self.net.finish();
            if let Err(t) = resume(self.target.as_ref(), &mut self.mem, &mut self.cpu, &mut self.net, cov, self.op_budget) {
                res.exit = trap_exit(&t);
            }
        }
        res.packets_consumed = self.net.counters().packets_consumed;
        self.counters.ops_executed += res.ops_executed as u64;
        Ok(res)
    }
}

fn trap_exit(t: &Trap) -> ExitKind {
    match t {
        Trap::Timeout => ExitKind::Timeout,
        t => ExitKind::Crash(t.site().unwrap_or(FAULT_SITE)),
    }
}

impl std::fmt::Debug for Guest {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Guest")
            .field("target", &self.target.name())
            .field("status", &self.cpu.status)
            .field("incremental", &self.incremental_index())
            .finish()
    }
}

#[cfg(test)]
mod tests;
