//! Campaign engine: queue scheduling, snapshot placement, incremental
//! snapshot reuse and crash triage.

mod campaign;
mod config;
mod crash;
mod entry;
mod policy;
mod queue;

pub use campaign::{Campaign, CampaignConfig, CampaignError, CampaignReport, CrashSummary, TrajectoryRow, STATS_HEADER, TRAJECTORY_HEADER};
pub use config::{ConfigError, FileConfig};
pub use crash::{reproducer_name, write_atomic, CrashRecord, CrashStore, CrashVerdict, MAX_REPRODUCERS, REPLAYS};
pub use entry::{fuzz_entry, fuzz_entry_at, Finding, Maps, Round, RoundStats};
pub use policy::{choose_placement, Placement, Policy, PolicyConfig};
pub use queue::{Queue, QueueEntry};
