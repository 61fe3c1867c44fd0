//! A long scripted handshake followed by a small branching command space.

use crate::bytecode::{FormatSpec, GraphBuilder, Program};
use crate::net::Recv;

use super::sys::{site, site_n, Sys, Trap, Yield};
use super::Target;

pub const DEFAULT_HANDSHAKE: usize = 100;
/// Edge taken by a post-handshake packet starting with `DEEP`.
pub const SITE_DEEP_BRANCH: u16 = site("lp.deep");
const SITE_BOOM: u16 = site("lp.boom");

const INIT_MAGIC: u32 = 0x4C50_5246;
const G_INIT: usize = 0x00;
const G_LISTENER: usize = 0x04;
const G_CONN: usize = 0x08;
const G_HAS_CONN: usize = 0x0C;
const G_STAGE: usize = 0x10;
const G_COUNTER: usize = 0x14;
const G_ACC: usize = 0x18;
/// One 512-byte record per handshake step, so the prefix dirties many pages.
const RECORDS: usize = 0x1000;
const RECORD_SIZE: usize = 512;
const SCRATCH: usize = 0x20000;

/// Expected content of handshake packet `i`.
pub fn handshake_packet(i: usize) -> Vec<u8> {
    format!("HS {i:04} ready\n").into_bytes()
}

#[derive(Debug, Clone)]
pub struct LongPrefix {
    pub handshake: usize,
    /// Packets in the built-in seed after the handshake.
    pub seed_suffix: usize,
}

impl Default for LongPrefix {
    fn default() -> Self {
        LongPrefix {
            handshake: DEFAULT_HANDSHAKE,
            seed_suffix: 20,
        }
    }
}

impl LongPrefix {
    fn handshake_step(&self, sys: &mut Sys<'_>, h: u32, stage: usize, bytes: &[u8]) -> Result<bool, Trap> {
        if bytes != handshake_packet(stage).as_slice() {
            sys.edge(site_n(site("lp.hs.bad"), stage as u32))?;
            sys.send(h, b"ERR handshake\n")?;
            sys.close(h)?;
            return Ok(false);
        }
        sys.edge(site_n(site("lp.hs.ok"), stage as u32))?;
        let rec = RECORDS + stage * RECORD_SIZE;
        sys.write(rec, bytes)?;
        let token = sys.rand_u32();
        sys.write_u32(rec + 0x100, token)?;
        sys.write_u32(G_STAGE, stage as u32 + 1)?;
        sys.send(h, b"OK\n")?;
        Ok(true)
    }

    fn command(&self, sys: &mut Sys<'_>, h: u32, bytes: &[u8]) -> Result<(), Trap> {
        let n = sys.read_u32(G_COUNTER)?;
        sys.write_u32(G_COUNTER, n.wrapping_add(1))?;
        let op = bytes[0];
        let arg = &bytes[1..];
        match op {
            b'a'..=b'h' => {
                let k = (op - b'a') as u32;
                sys.edge(site_n(site("lp.cmd"), k))?;
                let v = arg.first().copied().unwrap_or(0);
                sys.edge(site_n(site("lp.cmd.arg"), k << 2 | (v as u32 >> 6)))?;
                let acc = sys.read_u32(G_ACC)?;
                let acc = acc.wrapping_mul(31).wrapping_add(v as u32 + k);
                sys.write_u32(G_ACC, acc)?;
                sys.write(SCRATCH + (acc as usize % 16) * 4096, arg)?;
                sys.send(h, b"ACK\n")
            }
            b'D' => {
                let word = b"DEEP";
                let mut pos = 1;
                while pos < word.len() && pos < bytes.len() && bytes[pos] == word[pos] {
                    sys.edge(site_n(site("lp.deep.prefix"), pos as u32))?;
                    pos += 1;
                }
                if pos == word.len() {
                    sys.edge(SITE_DEEP_BRANCH)?;
                    if bytes[pos..].starts_with(b"!") && sys.read_u32(G_ACC)? != 0 {
                        return Err(sys.crash(SITE_BOOM));
                    }
                }
                sys.send(h, b"NAK\n")
            }
            _ => {
                sys.edge(site("lp.cmd.unknown"))?;
                sys.send(h, b"NAK\n")
            }
        }
    }
}

impl Target for LongPrefix {
    fn name(&self) -> &str {
        "longprefix"
    }

    fn mem_pages(&self) -> usize {
        (SCRATCH / 4096 + 16).max((RECORDS + self.handshake * RECORD_SIZE) / 4096 + 1)
    }

    fn run(&self, sys: &mut Sys<'_>) -> Result<Yield, Trap> {
        if sys.read_u32(G_INIT)? != INIT_MAGIC {
            sys.edge(site("lp.boot"))?;
            let l = sys.listen("0.0.0.0:7000")?;
            sys.write_u32(G_LISTENER, l)?;
            sys.write_u32(G_INIT, INIT_MAGIC)?;
        }
        let listener = sys.read_u32(G_LISTENER)?;
        loop {
            if let Some(h) = sys.accept(listener)? {
                if sys.read_u32(G_HAS_CONN)? != 0 {
                    sys.edge(site("lp.extra.conn"))?;
                    sys.close(h)?;
                } else {
                    sys.write_u32(G_CONN, h)?;
                    sys.write_u32(G_HAS_CONN, 1)?;
                }
                continue;
            }
            if sys.read_u32(G_HAS_CONN)? == 0 {
                return Ok(Yield::Blocked);
            }
            let h = sys.read_u32(G_CONN)?;
            match sys.recv(h, crate::bytecode::MAX_PAYLOAD)? {
                Recv::Data(bytes) => {
                    let stage = sys.read_u32(G_STAGE)? as usize;
                    if stage < self.handshake {
                        if !self.handshake_step(sys, h, stage, &bytes)? {
                            return Ok(Yield::Exit);
                        }
                    } else {
                        self.command(sys, h, &bytes)?;
                    }
                }
                Recv::PeerClosed => {
                    sys.close(h)?;
                    return Ok(Yield::Exit);
                }
                Recv::WouldBlock => return Ok(Yield::Blocked),
            }
        }
    }

    fn default_seeds(&self, spec: &FormatSpec) -> Vec<Program> {
        let mut b = GraphBuilder::new(spec);
        let Ok(Some(c)) = b.call("con_open", &[], b"") else {
            return Vec::new();
        };
        for i in 0..self.handshake {
            let _ = b.call("pkt", &[c], &handshake_packet(i));
        }
        for i in 0..self.seed_suffix {
            let payload = [b'a' + (i % 8) as u8, (i * 37) as u8, b'\n'];
            let _ = b.call("pkt", &[c], &payload);
        }
        b.build().into_iter().collect()
    }
}
