use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::memory::{MemError, PagedMemory};

/// Incremental snapshots re-mirror to pristine root content after this many
/// creations.
pub const DEFAULT_REMIRROR_INTERVAL: u32 = 2000;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Opaque device-state blob captured alongside memory.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct AuxState(pub Vec<u8>);

impl AuxState {
    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }
}

/// Full copy of memory plus aux state. Immutable once created; share it
/// between workers behind an `Arc`.
#[derive(Debug)]
pub struct RootSnapshot {
    id: u64,
    page_size: usize,
    num_pages: usize,
    full_copy: Box<[u8]>,
    aux: AuxState,
}

impl RootSnapshot {
    /// Copies all of `mem` and clears its dirty tracking.
    pub fn capture(mem: &mut PagedMemory, aux: AuxState) -> RootSnapshot {
        let ps = mem.page_size();
        // Zero-initialised allocation is lazily backed; only pages that may
        // hold data are copied.
        let mut full_copy = vec![0u8; mem.size()].into_boxed_slice();
        for page in 0..mem.num_pages() {
            if mem.is_touched(page) {
                full_copy[page * ps..(page + 1) * ps].copy_from_slice(mem.page(page));
            }
        }
        let id = next_id();
        mem.clear_dirty();
        mem.root_id = Some(id);
        RootSnapshot {
            id,
            page_size: ps,
            num_pages: mem.num_pages(),
            full_copy,
            aux,
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn aux(&self) -> &AuxState {
        &self.aux
    }

    pub fn page_size(&self) -> usize {
        self.page_size
    }

    pub fn num_pages(&self) -> usize {
        self.num_pages
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.full_copy
    }

    pub fn page(&self, page: usize) -> &[u8] {
        &self.full_copy[page * self.page_size..(page + 1) * self.page_size]
    }

    /// Address of the full-copy allocation, for asserting it is shared.
    pub fn storage_ptr(&self) -> *const u8 {
        self.full_copy.as_ptr()
    }

    fn check_geometry(&self, mem: &PagedMemory) -> Result<(), MemError> {
        if self.page_size != mem.page_size() || self.num_pages != mem.num_pages() {
            return Err(MemError::GeometryMismatch);
        }
        Ok(())
    }

    /// Fresh memory whose contents equal this snapshot.
    pub fn instantiate(&self) -> PagedMemory {
        let mut mem = PagedMemory::new(self.num_pages, self.page_size)
            .expect("snapshot geometry was validated at capture");
        mem.restore_root(self).expect("same geometry");
        mem
    }
}

const NO_SLOT: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IncStats {
    pub creations: u64,
    pub remirrors: u64,
    pub pages_captured: u64,
    pub pages_recycled: u64,
}

/// Second-level snapshot: a logical full-memory mirror that reads through to
/// the root except on pages it holds private copies of.
///
/// The object is recycled across creations. Private pages accumulate between
/// re-mirrors; pages from the previous capture that were not dirtied again
/// are overwritten with root content instead of being unmapped.
#[derive(Debug)]
pub struct IncrementalSnapshot {
    root: Arc<RootSnapshot>,
    generation: u64,
    slot_of: Vec<u32>,
    pool: Vec<u8>,
    private_pages: Vec<u32>,
    active: Vec<u32>,
    aux: AuxState,
    creations_since_remirror: u32,
    remirror_interval: u32,
    stats: IncStats,
}

impl IncrementalSnapshot {
    fn empty(root: Arc<RootSnapshot>, remirror_interval: u32) -> Self {
        let num_pages = root.num_pages;
        Self {
            root,
            generation: 0,
            slot_of: vec![NO_SLOT; num_pages],
            pool: Vec::new(),
            private_pages: Vec::new(),
            active: Vec::new(),
            aux: AuxState::default(),
            creations_since_remirror: 0,
            remirror_interval: remirror_interval.max(1),
            stats: IncStats::default(),
        }
    }

    /// Captures every page dirtied since the root into the mirror. A prior
    /// snapshot over the same root is recycled; one over a different root is
    /// dropped.
    pub fn capture(
        mem: &mut PagedMemory,
        root: &Arc<RootSnapshot>,
        aux: AuxState,
        prior: Option<IncrementalSnapshot>,
        remirror_interval: u32,
    ) -> Result<IncrementalSnapshot, MemError> {
        root.check_geometry(mem)?;
        if mem.root_id != Some(root.id) {
            return Err(MemError::StaleSnapshot);
        }
        let mut inc = match prior {
            Some(mut p) if p.root.id == root.id => {
                p.remirror_interval = remirror_interval.max(1);
                p
            }
            _ => Self::empty(Arc::clone(root), remirror_interval),
        };
        inc.creations_since_remirror += 1;
        if inc.creations_since_remirror >= inc.remirror_interval {
            inc.remirror();
            inc.creations_since_remirror = 0;
        } else {
            let active = std::mem::take(&mut inc.active);
            for &p in &active {
                if !mem.is_dirty(p as usize) {
                    let slot = inc.slot_of[p as usize];
                    let ps = inc.root.page_size;
                    let off = slot as usize * ps;
                    inc.pool[off..off + ps].copy_from_slice(inc.root.page(p as usize));
                    inc.stats.pages_recycled += 1;
                }
            }
        }

        let ps = root.page_size;
        for &p in mem.dirty_pages() {
            let p = p as usize;
            let slot = match inc.slot_of[p] {
                NO_SLOT => {
                    let slot = inc.private_pages.len() as u32;
                    inc.private_pages.push(p as u32);
                    inc.pool.resize(inc.pool.len() + ps, 0);
                    inc.slot_of[p] = slot;
                    slot
                }
                s => s,
            };
            let off = slot as usize * ps;
            inc.pool[off..off + ps].copy_from_slice(mem.page(p));
        }
        inc.active = mem.dirty_pages().to_vec();
        inc.stats.pages_captured += inc.active.len() as u64;
        inc.stats.creations += 1;
        inc.aux = aux;
        inc.generation = next_id();
        mem.start_inc_tracking(inc.generation);
        Ok(inc)
    }

    fn remirror(&mut self) {
        for &p in &self.private_pages {
            self.slot_of[p as usize] = NO_SLOT;
        }
        self.private_pages.clear();
        self.pool = Vec::new();
        self.active.clear();
        self.stats.remirrors += 1;
    }

    /// Contents of the mirror at `page`.
    pub fn mirror_page(&self, page: usize) -> &[u8] {
        match self.slot_of[page] {
            NO_SLOT => self.root.page(page),
            slot => {
                let ps = self.root.page_size;
                &self.pool[slot as usize * ps..(slot as usize + 1) * ps]
            }
        }
    }

    /// Pages backed by private copies (the union since the last re-mirror).
    pub fn captured_pages(&self) -> &[u32] {
        &self.private_pages
    }

    /// Pages captured by the most recent creation.
    pub fn active_pages(&self) -> &[u32] {
        &self.active
    }

    pub fn is_captured(&self, page: usize) -> bool {
        self.slot_of[page] != NO_SLOT
    }

    pub fn aux(&self) -> &AuxState {
        &self.aux
    }

    pub fn root(&self) -> &Arc<RootSnapshot> {
        &self.root
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn creations_since_remirror(&self) -> u32 {
        self.creations_since_remirror
    }

    pub fn remirror_interval(&self) -> u32 {
        self.remirror_interval
    }

    pub fn stats(&self) -> IncStats {
        self.stats
    }

    /// Materialises the mirror as a flat byte vector.
    pub fn mirror_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.root.full_copy.len());
        for p in 0..self.root.num_pages {
            out.extend_from_slice(self.mirror_page(p));
        }
        out
    }
}

impl PagedMemory {
    /// Resets memory to `root`, copying only the pages dirtied since the
    /// root point. Memory that was never synchronised with this root is
    /// copied in full.
    pub fn restore_root(&mut self, root: &RootSnapshot) -> Result<usize, MemError> {
        root.check_geometry(self)?;
        let copied = if self.root_id == Some(root.id) {
            self.copy_logged_pages(false, |p| root.page(p))
        } else {
            for p in 0..root.num_pages {
                self.copy_page_in(p, root.page(p));
            }
            root.num_pages
        };
        self.clear_dirty();
        self.root_id = Some(root.id);
        self.counters.pages_copied += copied as u64;
        self.counters.root_restores += 1;
        Ok(copied)
    }

    /// Same result as [`restore_root`](Self::restore_root) but finds dirty
    /// pages by scanning the whole bitmap, one byte per page. Returns
    /// `(pages_copied, bitmap_bytes_scanned)`.
    pub fn restore_root_scanning(&mut self, root: &RootSnapshot) -> Result<(usize, usize), MemError> {
        root.check_geometry(self)?;
        if self.root_id != Some(root.id) {
            return Ok((self.restore_root(root)?, 0));
        }
        let mut copied = 0;
        let ps = self.page_size();
        for p in 0..self.num_pages() {
            if self.dirty_bitmap()[p] != 0 {
                self.copy_page_in(p, &root.as_bytes()[p * ps..(p + 1) * ps]);
                copied += 1;
            }
        }
        self.clear_dirty();
        self.counters.pages_copied += copied as u64;
        self.counters.root_restores += 1;
        Ok((copied, self.num_pages()))
    }

    /// Resets memory to the incremental snapshot's mirror, copying only pages
    /// dirtied since it was captured (or last restored).
    pub fn restore_incremental(&mut self, inc: &IncrementalSnapshot) -> Result<usize, MemError> {
        inc.root.check_geometry(self)?;
        if self.root_id != Some(inc.root.id) {
            return Err(MemError::StaleSnapshot);
        }
        let copied = if self.inc_epoch == Some(inc.generation) {
            self.copy_logged_pages(true, |p| inc.mirror_page(p))
        } else {
            // Memory is tracked against the root only: everything that
            // differs from the root, plus the snapshot's own captures.
            let mut pages = self.dirty_pages().to_vec();
            for &p in &inc.active {
                if !self.is_dirty(p as usize) {
                    pages.push(p);
                }
            }
            for &p in &pages {
                self.copy_page_in(p as usize, inc.mirror_page(p as usize));
                self.mark_root_dirty(p as usize);
            }
            pages.len()
        };
        self.start_inc_tracking(inc.generation);
        self.counters.pages_copied += copied as u64;
        self.counters.inc_restores += 1;
        Ok(copied)
    }
}
