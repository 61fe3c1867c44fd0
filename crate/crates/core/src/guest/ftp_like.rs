//! Line-oriented login/session protocol modelled on FTP.

use crate::bytecode::{FormatSpec, GraphBuilder, Program};
use crate::net::Recv;

use super::sys::{site, site_n, Sys, Trap, Yield};
use super::Target;

/// Reached by `USER`, `PASS`, `MODE X`, `CRSH` on one session.
pub const SITE_CRASH_SEQUENCE: u16 = site("ftp.crash.sequence");
/// Reached by `SITE` with an 8-byte argument equal to [`CRASH_MAGIC`].
pub const SITE_CRASH_MAGIC: u16 = site("ftp.crash.magic");
pub const CRASH_MAGIC: [u8; 8] = *b"\x7fN\x19xMg1c";

const INIT_MAGIC: u32 = 0x4654_5021;
const MAX_SESSIONS: usize = 8;
const MAX_LINE: usize = 512;
const RECV_CHUNK: usize = 256;

// globals, page 0
const G_INIT: usize = 0x00;
const G_LISTENER: usize = 0x04;
const G_COMMANDS: usize = 0x08;
const G_LOG_CURSOR: usize = 0x0C;

// one page per session
const SESSIONS: usize = 0x1000;
const S_USED: usize = 0x00;
const S_HANDLE: usize = 0x04;
const S_STATE: usize = 0x08;
const S_MODE: usize = 0x0C;
const S_MODE_X: usize = 0x0D;
const S_TYPE: usize = 0x0E;
const S_LINE_LEN: usize = 0x10;
const S_COUNT: usize = 0x14;
const S_USER: usize = 0x40;
const S_CWD_LEN: usize = 0x7C;
const S_CWD: usize = 0x80;
const S_LINE: usize = 0x400;
const USER_MAX: usize = 32;
const CWD_MAX: usize = 120;

// command log ring and file store
const LOG: usize = 0x10000;
const LOG_SIZE: usize = 0x10000;
const FILES: usize = 0x20000;
const FILE_SLOTS: usize = 32;
const FILE_SLOT_SIZE: usize = 0x1000;

const ST_AWAIT_USER: u32 = 0;
const ST_AWAIT_PASS: u32 = 1;
const ST_LOGGED_IN: u32 = 2;

const COMMANDS: [&[u8]; 17] = [
    b"USER", b"PASS", b"QUIT", b"NOOP", b"SYST", b"PWD", b"CWD", b"MKD", b"TYPE", b"MODE", b"LIST", b"STOR",
    b"RETR", b"DELE", b"SITE", b"CRSH", b"HELP",
];

const CMD_MATCH: u16 = site("ftp.cmd.match");
const CMD_DISPATCH: u16 = site("ftp.cmd.dispatch");

#[derive(Debug, Default, Clone)]
pub struct FtpLike;

fn session_base(i: usize) -> usize {
    SESSIONS + i * 0x1000
}

impl FtpLike {
    fn init(&self, sys: &mut Sys<'_>) -> Result<(), Trap> {
        sys.edge(site("ftp.boot"))?;
        let l = sys.listen("0.0.0.0:21")?;
        sys.write_u32(G_LISTENER, l)?;
        sys.write_u32(G_INIT, INIT_MAGIC)
    }

    fn reply(&self, sys: &mut Sys<'_>, h: u32, text: &str) -> Result<(), Trap> {
        let mut line = text.as_bytes().to_vec();
        line.extend_from_slice(b"\r\n");
        sys.send(h, &line)
    }

    fn sessions(&self, sys: &mut Sys<'_>) -> Result<Vec<(usize, u32)>, Trap> {
        let mut out = Vec::new();
        for i in 0..MAX_SESSIONS {
            let b = session_base(i);
            if sys.read_u8(b + S_USED)? != 0 {
                out.push((i, sys.read_u32(b + S_HANDLE)?));
            }
        }
        Ok(out)
    }

    fn open_session(&self, sys: &mut Sys<'_>, h: u32) -> Result<(), Trap> {
        for i in 0..MAX_SESSIONS {
            let b = session_base(i);
            if sys.read_u8(b + S_USED)? == 0 {
                sys.edge(site_n(site("ftp.session.open"), i as u32))?;
                sys.write(b, &[0u8; S_LINE])?;
                sys.write_u8(b + S_USED, 1)?;
                sys.write_u32(b + S_HANDLE, h)?;
                sys.write_u32(b + S_STATE, ST_AWAIT_USER)?;
                sys.write_u8(b + S_MODE, b'S')?;
                sys.write_u8(b + S_TYPE, b'A')?;
                sys.write_u32(b + S_CWD_LEN, 1)?;
                sys.write_u8(b + S_CWD, b'/')?;
                return self.reply(sys, h, "220 ftp_like ready");
            }
        }
        sys.edge(site("ftp.session.full"))?;
        self.reply(sys, h, "421 Too many users")?;
        sys.close(h)
    }

    fn close_session(&self, sys: &mut Sys<'_>, i: usize, h: u32) -> Result<(), Trap> {
        sys.edge(site("ftp.session.close"))?;
        sys.write_u8(session_base(i) + S_USED, 0)?;
        sys.close(h)
    }

    /// Appends received bytes to the session's line buffer and runs every
    /// complete line. Returns false if the session was closed.
    fn feed(&self, sys: &mut Sys<'_>, i: usize, h: u32, bytes: &[u8]) -> Result<bool, Trap> {
        let b = session_base(i);
        let mut len = sys.read_u32(b + S_LINE_LEN)? as usize;
        for &c in bytes {
            if c == b'\n' {
                let mut line = sys.read_vec(b + S_LINE, len)?;
                if line.last() == Some(&b'\r') {
                    line.pop();
                }
                len = 0;
                sys.write_u32(b + S_LINE_LEN, 0)?;
                if !self.command(sys, i, h, &line)? {
                    return Ok(false);
                }
            } else if len == MAX_LINE {
                sys.edge(site("ftp.line.overflow"))?;
                self.reply(sys, h, "500 Line too long")?;
                len = 0;
            } else {
                sys.write_u8(b + S_LINE + len, c)?;
                len += 1;
            }
        }
        sys.write_u32(b + S_LINE_LEN, len as u32)?;
        Ok(true)
    }

    fn log(&self, sys: &mut Sys<'_>, line: &[u8]) -> Result<(), Trap> {
        let n = sys.read_u32(G_COMMANDS)?;
        sys.write_u32(G_COMMANDS, n.wrapping_add(1))?;
        let mut cur = sys.read_u32(G_LOG_CURSOR)? as usize;
        let rec = &line[..line.len().min(64)];
        if cur + rec.len() + 1 > LOG_SIZE {
            cur = 0;
        }
        sys.write(LOG + cur, rec)?;
        sys.write_u8(LOG + cur + rec.len(), b'\n')?;
        sys.write_u32(G_LOG_CURSOR, (cur + rec.len() + 1) as u32)
    }

    /// Matches the verb against the command table one character at a time,
    /// recording an edge for every matched prefix.
    fn lookup(&self, sys: &mut Sys<'_>, verb: &[u8]) -> Result<Option<usize>, Trap> {
        let mut found = None;
        for (ci, cmd) in COMMANDS.iter().enumerate() {
            let mut pos = 0;
            while pos < cmd.len() && pos < verb.len() && verb[pos].to_ascii_uppercase() == cmd[pos] {
                sys.edge(site_n(CMD_MATCH, (ci * 8 + pos) as u32))?;
                pos += 1;
            }
            if pos == cmd.len() && verb.len() == cmd.len() {
                found = Some(ci);
            }
        }
        Ok(found)
    }

    fn command(&self, sys: &mut Sys<'_>, i: usize, h: u32, line: &[u8]) -> Result<bool, Trap> {
        let b = session_base(i);
        self.log(sys, line)?;
        let count = sys.read_u32(b + S_COUNT)?;
        sys.write_u32(b + S_COUNT, count.wrapping_add(1))?;
        let (verb, arg) = match line.iter().position(|&c| c == b' ') {
            Some(p) => (&line[..p], &line[p + 1..]),
            None => (line, &line[line.len()..]),
        };
        let state = sys.read_u32(b + S_STATE)?;
        let Some(cmd) = self.lookup(sys, verb)? else {
            sys.edge(site("ftp.cmd.unknown"))?;
            self.reply(sys, h, "500 Unknown command")?;
            return Ok(true);
        };
        sys.edge(site_n(CMD_DISPATCH, (cmd as u32) << 2 | state))?;
        let name = COMMANDS[cmd];
        let needs_login = !matches!(name, b"USER" | b"PASS" | b"QUIT" | b"NOOP" | b"SYST" | b"HELP");
        if needs_login && state != ST_LOGGED_IN {
            self.reply(sys, h, "530 Not logged in")?;
            return Ok(true);
        }
        match name {
            b"USER" => {
                if arg.is_empty() {
                    sys.edge(site("ftp.user.empty"))?;
                    self.reply(sys, h, "501 Missing user name")?;
                } else {
                    let n = arg.len().min(USER_MAX);
                    sys.write(b + S_USER, &[0u8; USER_MAX])?;
                    sys.write(b + S_USER, &arg[..n])?;
                    sys.write_u32(b + S_STATE, ST_AWAIT_PASS)?;
                    sys.write_u8(b + S_MODE_X, 0)?;
                    if arg.eq_ignore_ascii_case(b"anonymous") {
                        sys.edge(site("ftp.user.anonymous"))?;
                    }
                    self.reply(sys, h, "331 Password required")?;
                }
            }
            b"PASS" => {
                if state == ST_AWAIT_PASS {
                    sys.edge(site("ftp.pass.ok"))?;
                    sys.write_u32(b + S_STATE, ST_LOGGED_IN)?;
                    self.reply(sys, h, "230 Logged in")?;
                } else {
                    sys.edge(site("ftp.pass.order"))?;
                    self.reply(sys, h, "503 Login with USER first")?;
                }
            }
            b"QUIT" => {
                self.reply(sys, h, "221 Bye")?;
                self.close_session(sys, i, h)?;
                return Ok(false);
            }
            b"NOOP" => self.reply(sys, h, "200 OK")?,
            b"SYST" => self.reply(sys, h, "215 UNIX Type: L8")?,
            b"HELP" => self.reply(sys, h, "214 USER PASS QUIT NOOP SYST PWD CWD MKD TYPE MODE LIST STOR RETR DELE SITE")?,
            b"PWD" => {
                let len = sys.read_u32(b + S_CWD_LEN)? as usize;
                let cwd = sys.read_vec(b + S_CWD, len.min(CWD_MAX))?;
                let msg = format!("257 \"{}\"", String::from_utf8_lossy(&cwd));
                self.reply(sys, h, &msg)?;
            }
            b"CWD" | b"MKD" => self.cwd(sys, b, h, name == b"MKD", arg)?,
            b"TYPE" => match arg {
                b"A" | b"I" => {
                    sys.edge(site_n(site("ftp.type"), arg[0] as u32))?;
                    sys.write_u8(b + S_TYPE, arg[0])?;
                    self.reply(sys, h, "200 Type set")?;
                }
                _ => self.reply(sys, h, "504 Type not supported")?,
            },
            b"MODE" => match arg {
                b"S" | b"B" | b"C" => {
                    sys.edge(site_n(site("ftp.mode"), arg[0] as u32))?;
                    sys.write_u8(b + S_MODE, arg[0])?;
                    self.reply(sys, h, "200 Mode set")?;
                }
                b"X" => {
                    sys.edge(site("ftp.mode.x"))?;
                    sys.write_u8(b + S_MODE, b'X')?;
                    sys.write_u8(b + S_MODE_X, 1)?;
                    self.reply(sys, h, "200 Mode X (experimental)")?;
                }
                _ => {
                    sys.edge(site("ftp.mode.bad"))?;
                    self.reply(sys, h, "504 Mode not supported")?;
                }
            },
            b"CRSH" => {
                if sys.read_u8(b + S_MODE_X)? != 0 {
                    return Err(sys.crash(SITE_CRASH_SEQUENCE));
                }
                sys.edge(site("ftp.crsh.denied"))?;
                self.reply(sys, h, "502 Not available in this mode")?;
            }
            b"SITE" => {
                if arg.len() >= 8 && u64::from_le_bytes(arg[..8].try_into().unwrap()) == u64::from_le_bytes(CRASH_MAGIC) {
                    return Err(sys.crash(SITE_CRASH_MAGIC));
                }
                sys.edge(site("ftp.site"))?;
                self.reply(sys, h, "200 SITE ok")?;
            }
            b"STOR" | b"RETR" | b"DELE" => self.file_op(sys, h, name, arg)?,
            b"LIST" => self.list(sys, h)?,
            _ => unreachable!(),
        }
        Ok(true)
    }

    fn cwd(&self, sys: &mut Sys<'_>, b: usize, h: u32, mkd: bool, arg: &[u8]) -> Result<(), Trap> {
        if arg.is_empty() {
            return self.reply(sys, h, "501 Missing path");
        }
        if mkd {
            sys.edge(site("ftp.mkd"))?;
            return self.reply(sys, h, "257 Directory created");
        }
        let len = sys.read_u32(b + S_CWD_LEN)? as usize;
        let mut cwd = sys.read_vec(b + S_CWD, len.min(CWD_MAX))?;
        if arg == b".." {
            sys.edge(site("ftp.cwd.up"))?;
            while cwd.len() > 1 && cwd.pop() != Some(b'/') {}
        } else if arg[0] == b'/' {
            sys.edge(site("ftp.cwd.abs"))?;
            cwd = arg.to_vec();
        } else {
            sys.edge(site("ftp.cwd.rel"))?;
            if cwd.last() != Some(&b'/') {
                cwd.push(b'/');
            }
            cwd.extend_from_slice(arg);
        }
        if cwd.len() > CWD_MAX {
            sys.edge(site("ftp.cwd.long"))?;
            return self.reply(sys, h, "550 Path too long");
        }
        sys.write(b + S_CWD, &cwd)?;
        sys.write_u32(b + S_CWD_LEN, cwd.len() as u32)?;
        self.reply(sys, h, "250 Directory changed")
    }

    fn file_slot(name: &[u8]) -> usize {
        (crate::util::fnv1a64(name) % FILE_SLOTS as u64) as usize
    }

    fn file_op(&self, sys: &mut Sys<'_>, h: u32, op: &[u8], arg: &[u8]) -> Result<(), Trap> {
        if arg.is_empty() {
            return self.reply(sys, h, "501 Missing file name");
        }
        let (name, data) = match arg.iter().position(|&c| c == b' ') {
            Some(p) => (&arg[..p], &arg[p + 1..]),
            None => (arg, &arg[arg.len()..]),
        };
        let name = &name[..name.len().min(64)];
        let base = FILES + Self::file_slot(name) * FILE_SLOT_SIZE;
        let used = sys.read_u8(base)?;
        let stored_len = sys.read_u8(base + 1)? as usize;
        let stored = sys.read_vec(base + 2, stored_len)?;
        let present = used != 0 && stored == name;
        match op {
            b"STOR" => {
                sys.edge(site_n(site("ftp.stor"), present as u32))?;
                let data = &data[..data.len().min(FILE_SLOT_SIZE - 0x100)];
                sys.write_u8(base, 1)?;
                sys.write_u8(base + 1, name.len() as u8)?;
                sys.write(base + 2, name)?;
                sys.write_u32(base + 0x80, data.len() as u32)?;
                sys.write(base + 0x100, data)?;
                self.reply(sys, h, "226 Transfer complete")
            }
            b"RETR" if present => {
                sys.edge(site("ftp.retr.hit"))?;
                let n = sys.read_u32(base + 0x80)? as usize;
                let data = sys.read_vec(base + 0x100, n.min(FILE_SLOT_SIZE - 0x100))?;
                self.reply(sys, h, "150 Opening data connection")?;
                sys.send(h, &data)?;
                self.reply(sys, h, "226 Transfer complete")
            }
            b"DELE" if present => {
                sys.edge(site("ftp.dele.hit"))?;
                sys.write_u8(base, 0)?;
                self.reply(sys, h, "250 Deleted")
            }
            _ => {
                sys.edge(site("ftp.file.missing"))?;
                self.reply(sys, h, "550 No such file")
            }
        }
    }

    fn list(&self, sys: &mut Sys<'_>, h: u32) -> Result<(), Trap> {
        let mut out = Vec::new();
        for s in 0..FILE_SLOTS {
            let base = FILES + s * FILE_SLOT_SIZE;
            if sys.read_u8(base)? != 0 {
                let n = sys.read_u8(base + 1)? as usize;
                out.extend(sys.read_vec(base + 2, n)?);
                out.extend_from_slice(b"\r\n");
            }
        }
        sys.edge(site_n(site("ftp.list"), (!out.is_empty()) as u32))?;
        self.reply(sys, h, "150 Listing")?;
        sys.send(h, &out)?;
        self.reply(sys, h, "226 Done")
    }
}

impl Target for FtpLike {
    fn name(&self) -> &str {
        "ftp_like"
    }

    fn mem_pages(&self) -> usize {
        (FILES + FILE_SLOTS * FILE_SLOT_SIZE) / 4096
    }

    fn run(&self, sys: &mut Sys<'_>) -> Result<Yield, Trap> {
        if sys.read_u32(G_INIT)? != INIT_MAGIC {
            self.init(sys)?;
        }
        let listener = sys.read_u32(G_LISTENER)?;
        loop {
            if let Some(h) = sys.accept(listener)? {
                self.open_session(sys, h)?;
                continue;
            }
            let sessions = self.sessions(sys)?;
            let handles: Vec<u32> = sessions.iter().map(|s| s.1).collect();
            let ready = sys.readiness(None, &handles)?;
            let Some(&h) = ready.first() else {
                // Nothing queued: find sessions whose peer has gone away.
                for (i, h) in sessions {
                    if sys.recv(h, 0)? == Recv::PeerClosed {
                        self.close_session(sys, i, h)?;
                    }
                }
                return Ok(Yield::Blocked);
            };
            let i = sessions.iter().find(|s| s.1 == h).unwrap().0;
            match sys.recv(h, RECV_CHUNK)? {
                Recv::Data(bytes) => {
                    self.feed(sys, i, h, &bytes)?;
                }
                Recv::PeerClosed => self.close_session(sys, i, h)?,
                Recv::WouldBlock => return Ok(Yield::Blocked),
            }
        }
    }

    fn default_seeds(&self, spec: &FormatSpec) -> Vec<Program> {
        let mut b = GraphBuilder::new(spec);
        let Ok(Some(c)) = b.call("con_open", &[], b"") else {
            return Vec::new();
        };
        for line in SESSION_SEED {
            if b.call("pkt", &[c], line.as_bytes()).is_err() {
                return Vec::new();
            }
        }
        b.build().into_iter().collect()
    }
}

/// A plain login session, the same one shipped as a capture in the assets.
pub const SESSION_SEED: [&str; 9] = [
    "USER anonymous\r\n",
    "PASS guest@\r\n",
    "SYST\r\n",
    "PWD\r\n",
    "TYPE I\r\n",
    "MODE S\r\n",
    "CRSH\r\n",
    "CWD pub\r\n",
    "LIST\r\n",
];
