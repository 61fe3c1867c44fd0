use std::sync::Arc;

use thiserror::Error;

use super::ftp_like::FtpLike;
use super::longprefix::LongPrefix;
use super::platformer::{Level, LevelError, Platformer};
use super::Target;

pub const TARGET_NAMES: [&str; 3] = ["ftp_like", "platformer", "longprefix"];

/// Per-target knobs selectable from the command line.
#[derive(Debug, Clone, Default)]
pub struct TargetOptions {
    /// Level text for the platformer; the bundled level if unset.
    pub level: Option<String>,
    /// Handshake length for longprefix.
    pub handshake: Option<usize>,
}

#[derive(Debug, Error)]
pub enum UnknownTarget {
    #[error("unknown target `{0}` (expected one of: ftp_like, platformer, longprefix)")]
    Name(String),
    #[error("bad level: {0}")]
    Level(#[from] LevelError),
}

pub fn lookup(name: &str, opts: &TargetOptions) -> Result<Arc<dyn Target>, UnknownTarget> {
    Ok(match name {
        "ftp_like" => Arc::new(FtpLike),
        "platformer" => match &opts.level {
            Some(text) => Arc::new(Platformer::new(Level::parse(text)?)),
            None => Arc::new(Platformer::default()),
        },
        "longprefix" => {
            let mut t = LongPrefix::default();
            if let Some(n) = opts.handshake {
                t.handshake = n;
            }
            Arc::new(t)
        }
        other => return Err(UnknownTarget::Name(other.to_string())),
    })
}
