//! Paged memory with dirty tracking, and root/incremental snapshots whose
//! restore cost scales with the number of dirtied pages.

mod memory;
mod snapshot;

pub use memory::{MemCounters, MemError, PagedMemory, DEFAULT_PAGE_SIZE, PML_BATCH};
pub use snapshot::{AuxState, IncStats, IncrementalSnapshot, RootSnapshot, DEFAULT_REMIRROR_INTERVAL};
