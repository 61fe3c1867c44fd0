use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::queue::QueueEntry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Policy {
    /// Always execute from the root snapshot.
    None,
    Balanced,
    Aggressive,
}

impl FromStr for Policy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(Policy::None),
            "balanced" => Ok(Policy::Balanced),
            "aggressive" => Ok(Policy::Aggressive),
            other => Err(format!("unknown policy `{other}` (expected none, balanced or aggressive)")),
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Policy::None => "none",
            Policy::Balanced => "balanced",
            Policy::Aggressive => "aggressive",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyConfig {
    pub policy: Policy,
    /// Executions per incremental snapshot before it is discarded.
    pub reuse_limit: u32,
    /// Entries with fewer packets always run from the root.
    pub min_packets_for_inc: usize,
    pub balanced_root_prob: f64,
    /// Share of non-root balanced picks restricted to the second half.
    pub balanced_second_half_prob: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            policy: Policy::Balanced,
            reuse_limit: 50,
            min_packets_for_inc: 4,
            balanced_root_prob: 0.04,
            balanced_second_half_prob: 0.5,
        }
    }
}

impl PolicyConfig {
    pub fn with_policy(policy: Policy) -> Self {
        PolicyConfig {
            policy,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let unit = 0.0..=1.0;
        if !unit.contains(&self.balanced_root_prob) || !unit.contains(&self.balanced_second_half_prob) {
            return Err("probabilities must lie in [0, 1]".into());
        }
        if self.reuse_limit == 0 {
            return Err("reuse_limit must be at least 1".into());
        }
        Ok(())
    }
}

/// Where the next round of fuzzing starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Placement {
    Root,
    /// Snapshot taken after this many packets; only later packets mutate.
    AfterPacket(usize),
}

/// Picks the snapshot position for the next round on `entry`. The
/// aggressive policy advances the entry's cursor when the previous round
/// stalled.
pub fn choose_placement<R: Rng + ?Sized>(cfg: &PolicyConfig, entry: &mut QueueEntry, rng: &mut R) -> Placement {
    let n = entry.packet_count;
    if cfg.policy == Policy::None || n < cfg.min_packets_for_inc.max(2) {
        return Placement::Root;
    }
    match cfg.policy {
        Policy::None => Placement::Root,
        Policy::Balanced => {
            if rng.gen_bool(cfg.balanced_root_prob) {
                Placement::Root
            } else if rng.gen_bool(cfg.balanced_second_half_prob) {
                Placement::AfterPacket(rng.gen_range(n.div_ceil(2)..=n - 1))
            } else {
                Placement::AfterPacket(rng.gen_range(1..=n - 1))
            }
        }
        Policy::Aggressive => {
            let c = entry.aggressive_cursor;
            entry.aggressive_cursor = if c == 0 || c > n - 1 {
                n - 1
            } else if entry.iters_since_new >= cfg.reuse_limit {
                entry.iters_since_new = 0;
                if c <= 1 {
                    n - 1
                } else {
                    c - 1
                }
            } else {
                c
            };
            Placement::AfterPacket(entry.aggressive_cursor)
        }
    }
}
