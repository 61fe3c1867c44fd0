use crate::coverage::CoverageMap;
use crate::net::{Accept, EmuNet, HandleKind, NetHandle, Recv};
use crate::paged::PagedMemory;
use crate::util::fnv1a64;
use crate::wire::{Reader, WireError, Writer};

/// Crash site reported for guest faults (bad memory access, misuse of the
/// socket layer).
pub const FAULT_SITE: u32 = 0xFFFF_0000;

/// Static 15-bit site id for a branch point.
pub const fn site(label: &str) -> u16 {
    (fnv1a64(label.as_bytes()) & 0x7fff) as u16
}

/// Site id derived from a base id and a small index, for per-position edges.
pub const fn site_n(base: u16, n: u32) -> u16 {
    let x = (base as u64) << 32 | n as u64;
    let h = x.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    ((h >> 40) & 0x7fff) as u16
}

/// Control request returned to the engine when the target stops running.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Yield {
    /// Waiting for input.
    Blocked,
    /// Target finished on its own.
    Exit,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Trap {
    Crash(u32),
    Timeout,
    Fault(String),
}

impl Trap {
    pub fn site(&self) -> Option<u32> {
        match self {
            Trap::Crash(s) => Some(*s),
            Trap::Fault(_) => Some(FAULT_SITE),
            Trap::Timeout => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Booting,
    AwaitingInput,
    Done,
    Crashed,
}

impl Status {
    fn code(self) -> u8 {
        match self {
            Status::Booting => 0,
            Status::AwaitingInput => 1,
            Status::Done => 2,
            Status::Crashed => 3,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => Status::Booting,
            1 => Status::AwaitingInput,
            2 => Status::Done,
            3 => Status::Crashed,
            _ => return None,
        })
    }
}

/// Register-like state that travels in the aux blob.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cpu {
    pub prev_loc: u16,
    pub rng: u64,
    pub steps: u64,
    pub status: Status,
}

impl Default for Cpu {
    fn default() -> Self {
        Cpu {
            prev_loc: 0,
            rng: 0x853C_49E6_748F_EA9B,
            steps: 0,
            status: Status::Booting,
        }
    }
}

impl Cpu {
    pub(crate) fn encode(&self, w: &mut Writer) {
        w.u16(self.prev_loc).u64(self.rng).u64(self.steps).u8(self.status.code());
    }

    pub(crate) fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        let prev_loc = r.u16()?;
        let rng = r.u64()?;
        let steps = r.u64()?;
        let off = r.offset();
        let status = Status::from_code(r.u8()?).ok_or(WireError::Invalid {
            offset: off,
            what: "guest status",
        })?;
        Ok(Cpu {
            prev_loc,
            rng,
            steps,
            status,
        })
    }
}

/// Everything a target may touch while it runs. Each call costs one step
/// of the execution budget.
pub struct Sys<'a> {
    pub(crate) mem: &'a mut PagedMemory,
    pub(crate) net: &'a mut EmuNet,
    pub(crate) cpu: &'a mut Cpu,
    pub(crate) cov: &'a mut CoverageMap,
    pub(crate) budget: u64,
}

fn fault<E: std::fmt::Display>(e: E) -> Trap {
    Trap::Fault(e.to_string())
}

impl Sys<'_> {
    pub fn tick(&mut self, n: u64) -> Result<(), Trap> {
        self.cpu.steps += n;
        if self.cpu.steps > self.budget {
            Err(Trap::Timeout)
        } else {
            Ok(())
        }
    }

    /// Records the transition from the previous site to `site`.
    pub fn edge(&mut self, site: u16) -> Result<(), Trap> {
        self.tick(1)?;
        self.cov.record_edge(self.cpu.prev_loc, site);
        self.cpu.prev_loc = site;
        Ok(())
    }

    pub fn feedback(&mut self, bucket: usize) {
        self.cov.record_feedback(bucket);
    }

    pub fn crash(&mut self, site: u16) -> Trap {
        Trap::Crash(site as u32)
    }

    pub fn rand_u32(&mut self) -> u32 {
        // xorshift64*
        let mut x = self.cpu.rng;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.cpu.rng = x;
        (x.wrapping_mul(0x2545_F491_4F6C_DD1D) >> 32) as u32
    }

    // --- memory ---

    pub fn read(&mut self, addr: usize, out: &mut [u8]) -> Result<(), Trap> {
        self.tick(1)?;
        self.mem.read_into(addr, out).map_err(fault)
    }

    pub fn write(&mut self, addr: usize, bytes: &[u8]) -> Result<(), Trap> {
        self.tick(1)?;
        self.mem.write(addr, bytes).map_err(fault)
    }

    pub fn read_u8(&mut self, addr: usize) -> Result<u8, Trap> {
        let mut b = [0u8; 1];
        self.read(addr, &mut b)?;
        Ok(b[0])
    }

    pub fn write_u8(&mut self, addr: usize, v: u8) -> Result<(), Trap> {
        self.write(addr, &[v])
    }

    pub fn read_u32(&mut self, addr: usize) -> Result<u32, Trap> {
        let mut b = [0u8; 4];
        self.read(addr, &mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    pub fn write_u32(&mut self, addr: usize, v: u32) -> Result<(), Trap> {
        self.write(addr, &v.to_le_bytes())
    }

    pub fn read_i32(&mut self, addr: usize) -> Result<i32, Trap> {
        Ok(self.read_u32(addr)? as i32)
    }

    pub fn write_i32(&mut self, addr: usize, v: i32) -> Result<(), Trap> {
        self.write_u32(addr, v as u32)
    }

    pub fn read_u64(&mut self, addr: usize) -> Result<u64, Trap> {
        let mut b = [0u8; 8];
        self.read(addr, &mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    pub fn write_u64(&mut self, addr: usize, v: u64) -> Result<(), Trap> {
        self.write(addr, &v.to_le_bytes())
    }

    pub fn read_vec(&mut self, addr: usize, len: usize) -> Result<Vec<u8>, Trap> {
        let mut v = vec![0u8; len];
        self.read(addr, &mut v)?;
        Ok(v)
    }

    // --- sockets; handles are stored in memory as raw ids ---

    pub fn listen(&mut self, addr: &str) -> Result<u32, Trap> {
        self.tick(1)?;
        self.net.listen(addr).map(|h| h.id).map_err(fault)
    }

    /// Accepts a pending connection, or returns `None`.
    pub fn accept(&mut self, listener: u32) -> Result<Option<u32>, Trap> {
        self.tick(1)?;
        match self.net.accept(listener_handle(listener)).map_err(fault)? {
            Accept::Connection(h) => Ok(Some(h.id)),
            Accept::WouldBlock => Ok(None),
        }
    }

    pub fn recv(&mut self, conn: u32, max: usize) -> Result<Recv, Trap> {
        self.tick(1)?;
        self.net.recv(conn_handle(conn), max).map_err(fault)
    }

    pub fn send(&mut self, conn: u32, bytes: &[u8]) -> Result<(), Trap> {
        self.tick(1)?;
        self.net.send(conn_handle(conn), bytes).map(|_| ()).map_err(fault)
    }

    pub fn close(&mut self, conn: u32) -> Result<(), Trap> {
        self.tick(1)?;
        self.net.close(conn_handle(conn)).map_err(fault)
    }

    /// Which of the given connections (and optionally the listener) the next
    /// input event targets.
    pub fn readiness(&mut self, listener: Option<u32>, conns: &[u32]) -> Result<Vec<u32>, Trap> {
        self.tick(1)?;
        let mut hs: Vec<NetHandle> = conns.iter().map(|&c| conn_handle(c)).collect();
        if let Some(l) = listener {
            hs.push(listener_handle(l));
        }
        Ok(self.net.readiness(&hs).into_iter().map(|h| h.id).collect())
    }
}

fn conn_handle(id: u32) -> NetHandle {
    NetHandle {
        id,
        kind: HandleKind::Connection,
    }
}

fn listener_handle(id: u32) -> NetHandle {
    NetHandle {
        id,
        kind: HandleKind::Listener,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn site_ids_fit_below_feedback_tail() {
        for label in ["a", "ftp.user", "platformer.flag", "x"] {
            assert!(site(label) < 0x8000);
        }
        for n in 0..1000 {
            assert!(site_n(site("b"), n) < 0x8000);
        }
    }

    #[test]
    fn cpu_round_trip() {
        let cpu = Cpu {
            prev_loc: 7,
            rng: 99,
            steps: 12,
            status: Status::AwaitingInput,
        };
        let mut w = Writer::new();
        cpu.encode(&mut w);
        let bytes = w.finish();
        assert_eq!(Cpu::decode(&mut Reader::new(&bytes)).unwrap(), cpu);
    }
}
