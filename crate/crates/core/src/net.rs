//! Emulated socket layer. The target talks to it through a handful of calls
//! (listen, accept, recv, readiness, alias, close, send); the bytecode engine
//! feeds it connection-open and packet events. Every piece of state encodes
//! into the guest's aux blob.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use thiserror::Error;

use crate::wire::{Reader, WireError, Writer};

const WIRE_VERSION: u8 = 1;
const NONE: u32 = u32::MAX;

/// Upper bound on the per-connection record of bytes sent by the target.
pub const TRANSCRIPT_LIMIT: usize = 64 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum HandleKind {
    Listener,
    Connection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NetHandle {
    pub id: u32,
    pub kind: HandleKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NetError {
    #[error("address {0} already has a listener")]
    DuplicateListener(String),
    #[error("unknown handle {0}")]
    UnknownHandle(u32),
    #[error("handle {0} is closed")]
    Closed(u32),
    #[error("handle {0} is not a listener")]
    NotListener(u32),
    #[error("handle {0} is not a connection")]
    NotConnection(u32),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Accept {
    Connection(NetHandle),
    WouldBlock,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Recv {
    Data(Vec<u8>),
    WouldBlock,
    PeerClosed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Entry {
    Listener { addr: String },
    Connection { slot: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct HandleEntry {
    entry: Entry,
    open: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Packet {
    seq: u64,
    bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
struct ConnState {
    pending: VecDeque<Packet>,
    read_offset: u32,
    transcript: Vec<u8>,
    aliases: BTreeSet<u32>,
    accepted: bool,
    // Every handle closed; the transcript is kept.
    closed: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NetCounters {
    pub packets_delivered: u64,
    pub packets_consumed: u64,
    pub bytes_consumed: u64,
}

/// Connections are keyed by the bytecode slot of the op that opened them.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EmuNet {
    next_handle: u32,
    handles: BTreeMap<u32, HandleEntry>,
    listeners: BTreeMap<String, u32>,
    attack_surface: Option<u32>,
    conns: BTreeMap<u32, ConnState>,
    backlog: VecDeque<(u64, u32)>,
    next_seq: u64,
    finished: bool,
    counters: NetCounters,
}

impl EmuNet {
    pub fn new() -> Self {
        Self::default()
    }

    fn alloc_handle(&mut self, entry: Entry) -> u32 {
        let id = self.next_handle;
        self.next_handle += 1;
        self.handles.insert(id, HandleEntry { entry, open: true });
        id
    }

    fn entry(&self, id: u32) -> Result<&Entry, NetError> {
        match self.handles.get(&id) {
            None => Err(NetError::UnknownHandle(id)),
            Some(h) if !h.open => Err(NetError::Closed(id)),
            Some(h) => Ok(&h.entry),
        }
    }

    fn conn_slot(&self, id: u32) -> Result<u32, NetError> {
        match self.entry(id)? {
            Entry::Connection { slot } => Ok(*slot),
            Entry::Listener { .. } => Err(NetError::NotConnection(id)),
        }
    }

    // --- target-facing calls ---

    /// Registers a listener. The first listener is the fuzzed attack
    /// surface; connection-open ops are queued on it.
    pub fn listen(&mut self, addr: &str) -> Result<NetHandle, NetError> {
        if self.listeners.contains_key(addr) {
            return Err(NetError::DuplicateListener(addr.to_string()));
        }
        let id = self.alloc_handle(Entry::Listener {
            addr: addr.to_string(),
        });
        self.listeners.insert(addr.to_string(), id);
        self.attack_surface.get_or_insert(id);
        Ok(NetHandle {
            id,
            kind: HandleKind::Listener,
        })
    }

    pub fn accept(&mut self, listener: NetHandle) -> Result<Accept, NetError> {
        match self.entry(listener.id)? {
            Entry::Listener { .. } => {}
            Entry::Connection { .. } => return Err(NetError::NotListener(listener.id)),
        }
        if self.attack_surface != Some(listener.id) {
            return Ok(Accept::WouldBlock);
        }
        let Some((_, slot)) = self.backlog.pop_front() else {
            return Ok(Accept::WouldBlock);
        };
        let id = self.alloc_handle(Entry::Connection { slot });
        let conn = self.conns.entry(slot).or_default();
        conn.accepted = true;
        conn.aliases.insert(id);
        Ok(Accept::Connection(NetHandle {
            id,
            kind: HandleKind::Connection,
        }))
    }

    /// Returns bytes from the head packet only, never spanning packets.
    pub fn recv(&mut self, handle: NetHandle, max: usize) -> Result<Recv, NetError> {
        let slot = self.conn_slot(handle.id)?;
        let finished = self.finished;
        let Some(conn) = self.conns.get_mut(&slot).filter(|c| !c.closed) else {
            return Err(NetError::Closed(handle.id));
        };
        let Some(head) = conn.pending.front() else {
            return Ok(if finished {
                Recv::PeerClosed
            } else {
                Recv::WouldBlock
            });
        };
        if max == 0 {
            return Ok(Recv::Data(Vec::new()));
        }
        let start = conn.read_offset as usize;
        let end = (start + max).min(head.bytes.len());
        let out = head.bytes[start..end].to_vec();
        if end == head.bytes.len() {
            conn.pending.pop_front();
            conn.read_offset = 0;
            self.counters.packets_consumed += 1;
        } else {
            conn.read_offset = end as u32;
        }
        self.counters.bytes_consumed += out.len() as u64;
        Ok(Recv::Data(out))
    }

    pub fn send(&mut self, handle: NetHandle, bytes: &[u8]) -> Result<usize, NetError> {
        let slot = self.conn_slot(handle.id)?;
        let conn = self
            .conns
            .get_mut(&slot)
            .ok_or(NetError::Closed(handle.id))?;
        let room = TRANSCRIPT_LIMIT.saturating_sub(conn.transcript.len());
        conn.transcript
            .extend_from_slice(&bytes[..bytes.len().min(room)]);
        Ok(bytes.len())
    }

    /// Subset of `handles` that the next unconsumed bytecode event targets.
    pub fn readiness(&self, handles: &[NetHandle]) -> Vec<NetHandle> {
        enum Next {
            Accept,
            Packet(u32),
        }
        let mut next: Option<(u64, Next)> = self.backlog.front().map(|&(s, _)| (s, Next::Accept));
        for (&slot, conn) in &self.conns {
            if let Some(p) = conn.pending.front() {
                if next.as_ref().is_none_or(|(s, _)| p.seq < *s) {
                    next = Some((p.seq, Next::Packet(slot)));
                }
            }
        }
        let Some((_, next)) = next else {
            return Vec::new();
        };
        handles
            .iter()
            .copied()
            .filter(|h| match (self.entry(h.id), &next) {
                (Ok(Entry::Listener { .. }), Next::Accept) => self.attack_surface == Some(h.id),
                (Ok(Entry::Connection { slot }), Next::Packet(s)) => slot == s,
                _ => false,
            })
            .collect()
    }

    /// New handle sharing the connection's state.
    pub fn alias(&mut self, handle: NetHandle) -> Result<NetHandle, NetError> {
        let slot = self.conn_slot(handle.id)?;
        if !self.conns.get(&slot).is_some_and(|c| !c.closed) {
            return Err(NetError::Closed(handle.id));
        }
        let id = self.alloc_handle(Entry::Connection { slot });
        self.conns.get_mut(&slot).unwrap().aliases.insert(id);
        Ok(NetHandle {
            id,
            kind: HandleKind::Connection,
        })
    }

    pub fn close(&mut self, handle: NetHandle) -> Result<(), NetError> {
        let entry = self.entry(handle.id)?.clone();
        self.handles.get_mut(&handle.id).unwrap().open = false;
        match entry {
            Entry::Listener { addr } => {
                self.listeners.remove(&addr);
            }
            Entry::Connection { slot } => {
                if let Some(conn) = self.conns.get_mut(&slot) {
                    conn.aliases.remove(&handle.id);
                    if conn.aliases.is_empty() {
                        conn.closed = true;
                        conn.pending.clear();
                        conn.read_offset = 0;
                    }
                }
            }
        }
        Ok(())
    }

    // --- engine-facing calls ---

    pub fn open_connection(&mut self, slot: u32) {
        let seq = self.bump_seq();
        self.backlog.push_back((seq, slot));
        self.conns.entry(slot).or_default();
    }

    /// Queues a packet on the connection opened by `slot`. Packets for
    /// connections the target already closed are dropped, as are empty ones.
    pub fn deliver(&mut self, slot: u32, bytes: &[u8]) {
        if bytes.is_empty() {
            return;
        }
        let seq = self.bump_seq();
        if let Some(conn) = self.conns.get_mut(&slot).filter(|c| !c.closed) {
            conn.pending.push_back(Packet {
                seq,
                bytes: bytes.to_vec(),
            });
            self.counters.packets_delivered += 1;
        }
    }

    /// Marks the program as exhausted: empty queues report peer-closed.
    pub fn finish(&mut self) {
        self.finished = true;
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    fn bump_seq(&mut self) -> u64 {
        let s = self.next_seq;
        self.next_seq += 1;
        s
    }

    pub fn counters(&self) -> NetCounters {
        self.counters
    }

    /// Bytes the target sent on the connection opened by `slot`.
    pub fn transcript(&self, slot: u32) -> Option<&[u8]> {
        self.conns.get(&slot).map(|c| c.transcript.as_slice())
    }

    pub fn attack_surface(&self) -> Option<NetHandle> {
        self.attack_surface.map(|id| NetHandle {
            id,
            kind: HandleKind::Listener,
        })
    }

    pub fn encode(&self, w: &mut Writer) {
        w.u8(WIRE_VERSION)
            .u32(self.next_handle)
            .u8(self.finished as u8)
            .u64(self.next_seq)
            .u32(self.attack_surface.unwrap_or(NONE));
        w.u32(self.handles.len() as u32);
        for (&id, h) in &self.handles {
            w.u32(id).u8(h.open as u8);
            match &h.entry {
                Entry::Listener { addr } => w.u8(0).bytes(addr.as_bytes()),
                Entry::Connection { slot } => w.u8(1).u32(*slot),
            };
        }
        w.u32(self.conns.len() as u32);
        for (&slot, c) in &self.conns {
            w.u32(slot)
                .u8(c.accepted as u8 | (c.closed as u8) << 1)
                .u32(c.read_offset)
                .bytes(&c.transcript)
                .u32(c.aliases.len() as u32);
            for &a in &c.aliases {
                w.u32(a);
            }
            w.u32(c.pending.len() as u32);
            for p in &c.pending {
                w.u64(p.seq).bytes(&p.bytes);
            }
        }
        w.u32(self.backlog.len() as u32);
        for &(seq, slot) in &self.backlog {
            w.u64(seq).u32(slot);
        }
        w.u64(self.counters.packets_delivered)
            .u64(self.counters.packets_consumed)
            .u64(self.counters.bytes_consumed);
    }

    pub fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        let version = r.u8()?;
        if version != WIRE_VERSION {
            return Err(WireError::Version(version));
        }
        let mut net = EmuNet {
            next_handle: r.u32()?,
            finished: r.u8()? != 0,
            next_seq: r.u64()?,
            ..Default::default()
        };
        net.attack_surface = match r.u32()? {
            NONE => None,
            id => Some(id),
        };
        for _ in 0..r.u32()? {
            let id = r.u32()?;
            let open = r.u8()? != 0;
            let entry = match r.u8()? {
                0 => {
                    let off = r.offset();
                    let addr = String::from_utf8(r.bytes()?.to_vec()).map_err(|_| WireError::Invalid {
                        offset: off,
                        what: "listener address",
                    })?;
                    if open {
                        net.listeners.insert(addr.clone(), id);
                    }
                    Entry::Listener { addr }
                }
                1 => Entry::Connection { slot: r.u32()? },
                _ => {
                    return Err(WireError::Invalid {
                        offset: r.offset(),
                        what: "handle kind",
                    })
                }
            };
            net.handles.insert(id, HandleEntry { entry, open });
        }
        for _ in 0..r.u32()? {
            let slot = r.u32()?;
            let flags = r.u8()?;
            let mut c = ConnState {
                accepted: flags & 1 != 0,
                closed: flags & 2 != 0,
                read_offset: r.u32()?,
                transcript: r.bytes()?.to_vec(),
                ..Default::default()
            };
            for _ in 0..r.u32()? {
                c.aliases.insert(r.u32()?);
            }
            for _ in 0..r.u32()? {
                let seq = r.u64()?;
                c.pending.push_back(Packet {
                    seq,
                    bytes: r.bytes()?.to_vec(),
                });
            }
            net.conns.insert(slot, c);
        }
        for _ in 0..r.u32()? {
            net.backlog.push_back((r.u64()?, r.u32()?));
        }
        net.counters = NetCounters {
            packets_delivered: r.u64()?,
            packets_consumed: r.u64()?,
            bytes_consumed: r.u64()?,
        };
        Ok(net)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.encode(&mut w);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let net = Self::decode(&mut r)?;
        r.expect_end()?;
        Ok(net)
    }
}
