//! Side-scrolling grid world. Every payload byte is one frame's button
//! mask, so a packet carries a short run of frames.

use thiserror::Error;

use crate::bytecode::{FormatSpec, GraphBuilder, Program};
use crate::coverage::FEEDBACK_SLOTS;
use crate::net::Recv;

use super::sys::{site, site_n, Sys, Trap, Yield};
use super::Target;

pub const BUTTON_LEFT: u8 = 1;
pub const BUTTON_RIGHT: u8 = 2;
pub const BUTTON_JUMP: u8 = 4;

/// Reported as a crash site when the player touches the flag.
pub const SITE_FLAG: u16 = site("platformer.flag");

/// Bundled level: eight spike gaps, each cleared only by a jump in a
/// three-frame window ending on the frame that would touch the spikes.
pub const LEVEL1: &str = include_str!("../../assets/level1.txt");

const TILE: i32 = 16;
const SPEED: i32 = 4;
const JUMP_VELOCITY: i32 = 6;
const GRAVITY: i32 = 1;
const MAX_FALL: i32 = 8;

const INIT_MAGIC: u32 = 0x504C_4154;
const G_INIT: usize = 0x00;
const G_LISTENER: usize = 0x04;
const G_CONN: usize = 0x08;
const G_HAS_CONN: usize = 0x0C;
const P_X: usize = 0x20;
const P_Y: usize = 0x24;
const P_VY: usize = 0x28;
const P_GROUND: usize = 0x2C;
const P_DEAD: usize = 0x30;
const P_FRAME: usize = 0x34;
const P_MAX_BUCKET: usize = 0x38;
const FRAME_LOG: usize = 0x1000;
const FRAME_LOG_LEN: usize = 1024;
const LEVEL_BASE: usize = 0x2000;
/// Frames per packet in the built-in seed.
pub const SEED_FRAMES_PER_PACKET: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LevelError {
    #[error("level is empty")]
    Empty,
    #[error("row {row} has width {got}, expected {expected}")]
    Ragged { row: usize, got: usize, expected: usize },
    #[error("row {row}, column {col}: unknown tile {tile:?}")]
    BadTile { row: usize, col: usize, tile: char },
    #[error("level needs exactly one start tile, found {0}")]
    Start(usize),
    #[error("level has no flag")]
    NoFlag,
}

/// Tile grid: `#` solid, `.` empty, `^` spikes, `F` flag, `P` start.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Level {
    width: usize,
    height: usize,
    tiles: Vec<u8>,
    start: (usize, usize),
}

impl Level {
    pub fn parse(text: &str) -> Result<Level, LevelError> {
        let rows: Vec<&str> = text.lines().map(str::trim_end).filter(|l| !l.is_empty()).collect();
        let width = rows.first().ok_or(LevelError::Empty)?.len();
        let mut tiles = Vec::with_capacity(width * rows.len());
        let mut starts = Vec::new();
        let mut flags = 0;
        for (row, line) in rows.iter().enumerate() {
            if line.len() != width {
                return Err(LevelError::Ragged {
                    row,
                    got: line.len(),
                    expected: width,
                });
            }
            for (col, c) in line.chars().enumerate() {
                match c {
                    '#' | '.' | '^' => {}
                    'F' => flags += 1,
                    'P' => starts.push((col, row)),
                    tile => return Err(LevelError::BadTile { row, col, tile }),
                }
                tiles.push(c as u8);
            }
        }
        if starts.len() != 1 {
            return Err(LevelError::Start(starts.len()));
        }
        if flags == 0 {
            return Err(LevelError::NoFlag);
        }
        Ok(Level {
            width,
            height: rows.len(),
            tiles,
            start: starts[0],
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }
}

#[derive(Debug, Clone)]
pub struct Platformer {
    level: Level,
    seed_frames: usize,
}

impl Default for Platformer {
    fn default() -> Self {
        Platformer::new(Level::parse(LEVEL1).expect("bundled level parses"))
    }
}

struct Player {
    x: i32,
    y: i32,
    vy: i32,
    on_ground: bool,
}

impl Platformer {
    pub fn new(level: Level) -> Self {
        // Enough frames to walk the whole level at full speed.
        let seed_frames = (level.width as i32 * TILE / SPEED) as usize;
        Platformer { level, seed_frames }
    }

    pub fn level(&self) -> &Level {
        &self.level
    }

    fn tile(&self, sys: &mut Sys<'_>, tx: i32, ty: i32) -> Result<u8, Trap> {
        if tx < 0 || tx >= self.level.width as i32 {
            return Ok(b'#');
        }
        if ty < 0 || ty >= self.level.height as i32 {
            return Ok(b'.');
        }
        sys.read_u8(LEVEL_BASE + ty as usize * self.level.width + tx as usize)
    }

    /// Tiles under the four corners of the player's box at `(x, y)`.
    fn corners(&self, sys: &mut Sys<'_>, x: i32, y: i32) -> Result<[u8; 4], Trap> {
        let (l, r) = (x.div_euclid(TILE), (x + TILE - 1).div_euclid(TILE));
        let (t, b) = (y.div_euclid(TILE), (y + TILE - 1).div_euclid(TILE));
        Ok([self.tile(sys, l, t)?, self.tile(sys, r, t)?, self.tile(sys, l, b)?, self.tile(sys, r, b)?])
    }

    fn collides(&self, sys: &mut Sys<'_>, x: i32, y: i32) -> Result<bool, Trap> {
        Ok(self.corners(sys, x, y)?.contains(&b'#'))
    }

    fn load(&self, sys: &mut Sys<'_>) -> Result<Player, Trap> {
        Ok(Player {
            x: sys.read_i32(P_X)?,
            y: sys.read_i32(P_Y)?,
            vy: sys.read_i32(P_VY)?,
            on_ground: sys.read_u32(P_GROUND)? != 0,
        })
    }

    fn store(&self, sys: &mut Sys<'_>, p: &Player) -> Result<(), Trap> {
        sys.write_i32(P_X, p.x)?;
        sys.write_i32(P_Y, p.y)?;
        sys.write_i32(P_VY, p.vy)?;
        sys.write_u32(P_GROUND, p.on_ground as u32)
    }

    /// Advances one frame. Returns false once the player is dead.
    fn frame(&self, sys: &mut Sys<'_>, h: u32, buttons: u8) -> Result<bool, Trap> {
        let frame = sys.read_u32(P_FRAME)?;
        sys.write_u32(P_FRAME, frame + 1)?;
        sys.write_u8(FRAME_LOG + frame as usize % FRAME_LOG_LEN, buttons)?;
        let mut p = self.load(sys)?;

        let mut vx = 0;
        if buttons & BUTTON_RIGHT != 0 {
            vx += SPEED;
        }
        if buttons & BUTTON_LEFT != 0 {
            vx -= SPEED;
        }
        if buttons & BUTTON_JUMP != 0 && p.on_ground {
            sys.edge(site("platformer.jump"))?;
            p.vy = -JUMP_VELOCITY;
        }
        p.vy = (p.vy + GRAVITY).min(MAX_FALL);

        if vx != 0 {
            if self.collides(sys, p.x + vx, p.y)? {
                sys.edge(site("platformer.bump"))?;
            } else {
                p.x += vx;
            }
        }
        let ny = p.y + p.vy;
        if self.collides(sys, p.x, ny)? {
            if p.vy > 0 {
                if !p.on_ground {
                    sys.edge(site("platformer.land"))?;
                }
                p.y = (ny + TILE - 1).div_euclid(TILE) * TILE - TILE;
                p.on_ground = true;
            } else {
                sys.edge(site("platformer.ceiling"))?;
                p.y = (ny.div_euclid(TILE) + 1) * TILE;
            }
            p.vy = 0;
        } else {
            p.y = ny;
            p.on_ground = false;
            sys.edge(site_n(site("platformer.air"), (p.vy + 16) as u32))?;
        }
        self.store(sys, &p)?;

        let width = self.level.width as i32 * TILE;
        let bucket = ((p.x.clamp(0, width - 1) as i64 * FEEDBACK_SLOTS as i64) / width as i64) as usize;
        let max_bucket = sys.read_u32(P_MAX_BUCKET)? as usize;
        if bucket > max_bucket {
            sys.write_u32(P_MAX_BUCKET, bucket as u32)?;
        }
        sys.feedback(bucket.max(max_bucket));

        let touching = self.corners(sys, p.x, p.y)?;
        let fell = p.y >= self.level.height as i32 * TILE;
        if fell || touching.contains(&b'^') {
            sys.edge(site(if fell { "platformer.pit" } else { "platformer.spikes" }))?;
            sys.write_u32(P_DEAD, 1)?;
            sys.send(h, b"DEAD\n")?;
            return Ok(false);
        }
        if touching.contains(&b'F') {
            return Err(sys.crash(SITE_FLAG));
        }
        Ok(true)
    }
}

impl Target for Platformer {
    fn name(&self) -> &str {
        "platformer"
    }

    fn mem_pages(&self) -> usize {
        (LEVEL_BASE + self.level.tiles.len()).div_ceil(4096) + 1
    }

    fn run(&self, sys: &mut Sys<'_>) -> Result<Yield, Trap> {
        if sys.read_u32(G_INIT)? != INIT_MAGIC {
            sys.edge(site("platformer.boot"))?;
            sys.write(LEVEL_BASE, &self.level.tiles)?;
            let (sx, sy) = self.level.start;
            sys.write_i32(P_X, sx as i32 * TILE)?;
            sys.write_i32(P_Y, sy as i32 * TILE)?;
            let l = sys.listen("0.0.0.0:6000")?;
            sys.write_u32(G_LISTENER, l)?;
            sys.write_u32(G_INIT, INIT_MAGIC)?;
        }
        let listener = sys.read_u32(G_LISTENER)?;
        loop {
            if let Some(h) = sys.accept(listener)? {
                if sys.read_u32(G_HAS_CONN)? != 0 {
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
                    for b in bytes {
                        if !self.frame(sys, h, b)? {
                            return Ok(Yield::Exit);
                        }
                    }
                }
                Recv::PeerClosed => return Ok(Yield::Exit),
                Recv::WouldBlock => return Ok(Yield::Blocked),
            }
        }
    }

    /// Holding right for the whole level: runs into the pit.
    fn default_seeds(&self, spec: &FormatSpec) -> Vec<Program> {
        let frames = vec![BUTTON_RIGHT; self.seed_frames];
        frames_program(spec, &frames, SEED_FRAMES_PER_PACKET).into_iter().collect()
    }
}

/// One connection carrying `per_packet` frames in each packet.
pub fn frames_program(spec: &FormatSpec, frames: &[u8], per_packet: usize) -> Option<Program> {
    let mut b = GraphBuilder::new(spec);
    let c = b.call("con_open", &[], b"").ok()??;
    for chunk in frames.chunks(per_packet.max(1)) {
        b.call("pkt", &[c], chunk).ok()?;
    }
    b.build().ok()
}
