use thiserror::Error;

/// Page size used by the built-in targets and the benchmark.
pub const DEFAULT_PAGE_SIZE: usize = 4096;

/// Number of dirtied pages after which the modelled page-modification log
/// flushes to the hypervisor.
pub const PML_BATCH: u64 = 512;

const MIN_PAGE_SIZE: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MemError {
    #[error("invalid geometry: {num_pages} pages of {page_size} bytes")]
    InvalidGeometry { num_pages: usize, page_size: usize },
    #[error("access of {len} bytes at {addr:#x} exceeds memory size {size:#x}")]
    OutOfBounds { addr: usize, len: usize, size: usize },
    #[error("snapshot geometry does not match memory")]
    GeometryMismatch,
    #[error("incremental snapshot was built over a different root")]
    StaleSnapshot,
}

/// Instrumentation counters. Never reset.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MemCounters {
    pub pages_copied: u64,
    pub pml_flushes: u64,
    pub root_restores: u64,
    pub inc_restores: u64,
}

/// One flag per page plus the stack of flagged pages in first-touch order.
#[derive(Debug, Clone)]
pub(crate) struct DirtyLog {
    flags: Vec<u8>,
    stack: Vec<u32>,
}

impl DirtyLog {
    fn new(num_pages: usize) -> Self {
        Self {
            flags: vec![0; num_pages],
            stack: Vec::new(),
        }
    }

    /// Returns true if the page was not already flagged.
    #[inline]
    fn mark(&mut self, page: usize) -> bool {
        if self.flags[page] != 0 {
            return false;
        }
        self.flags[page] = 1;
        self.stack.push(page as u32);
        true
    }

    #[inline]
    pub(crate) fn contains(&self, page: usize) -> bool {
        self.flags[page] != 0
    }

    fn clear(&mut self) {
        for &p in &self.stack {
            self.flags[p as usize] = 0;
        }
        self.stack.clear();
    }

    pub(crate) fn pages(&self) -> &[u32] {
        &self.stack
    }

    fn coherent(&self) -> bool {
        let mut seen = vec![false; self.flags.len()];
        for &p in &self.stack {
            let p = p as usize;
            if p >= self.flags.len() || seen[p] || self.flags[p] == 0 {
                return false;
            }
            seen[p] = true;
        }
        self.flags.iter().filter(|&&f| f != 0).count() == self.stack.len()
    }
}

/// Byte-addressable memory split into fixed-size pages, with dirty tracking
/// relative to the root snapshot and, while one is live, relative to the
/// incremental snapshot.
///
/// Every write flags the touched pages in both logs. Restoring walks the
/// relevant stack, so restore cost is proportional to the number of pages
/// dirtied rather than to the memory size.
#[derive(Debug)]
pub struct PagedMemory {
    page_shift: u32,
    num_pages: usize,
    data: Vec<u8>,
    // Pages that may hold non-zero bytes. Lets root capture skip untouched
    // pages of very large, lazily-zeroed memories.
    touched: Vec<u8>,
    pub(crate) root_dirty: DirtyLog,
    pub(crate) inc_dirty: DirtyLog,
    pub(crate) inc_epoch: Option<u64>,
    pub(crate) root_id: Option<u64>,
    pml_pending: u64,
    pub(crate) counters: MemCounters,
}

impl PagedMemory {
    pub fn new(num_pages: usize, page_size: usize) -> Result<Self, MemError> {
        let bad = MemError::InvalidGeometry {
            num_pages,
            page_size,
        };
        if num_pages == 0
            || num_pages > u32::MAX as usize
            || page_size < MIN_PAGE_SIZE
            || !page_size.is_power_of_two()
        {
            return Err(bad);
        }
        let size = num_pages.checked_mul(page_size).ok_or(bad.clone())?;
        if size > isize::MAX as usize {
            return Err(bad);
        }
        Ok(Self {
            page_shift: page_size.trailing_zeros(),
            num_pages,
            data: vec![0; size],
            touched: vec![0; num_pages],
            root_dirty: DirtyLog::new(num_pages),
            inc_dirty: DirtyLog::new(num_pages),
            inc_epoch: None,
            root_id: None,
            pml_pending: 0,
            counters: MemCounters::default(),
        })
    }

    pub fn page_size(&self) -> usize {
        1 << self.page_shift
    }

    pub fn num_pages(&self) -> usize {
        self.num_pages
    }

    pub fn size(&self) -> usize {
        self.data.len()
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn page(&self, page: usize) -> &[u8] {
        let ps = self.page_size();
        &self.data[page * ps..(page + 1) * ps]
    }

    fn check(&self, addr: usize, len: usize) -> Result<(), MemError> {
        match addr.checked_add(len) {
            Some(end) if end <= self.data.len() => Ok(()),
            _ => Err(MemError::OutOfBounds {
                addr,
                len,
                size: self.data.len(),
            }),
        }
    }

    pub fn write(&mut self, addr: usize, bytes: &[u8]) -> Result<(), MemError> {
        self.check(addr, bytes.len())?;
        if bytes.is_empty() {
            return Ok(());
        }
        let first = addr >> self.page_shift;
        let last = (addr + bytes.len() - 1) >> self.page_shift;
        for page in first..=last {
            self.mark_dirty(page);
        }
        self.data[addr..addr + bytes.len()].copy_from_slice(bytes);
        Ok(())
    }

    pub fn read(&self, addr: usize, len: usize) -> Result<Vec<u8>, MemError> {
        self.check(addr, len)?;
        Ok(self.data[addr..addr + len].to_vec())
    }

    pub fn read_into(&self, addr: usize, out: &mut [u8]) -> Result<(), MemError> {
        self.check(addr, out.len())?;
        out.copy_from_slice(&self.data[addr..addr + out.len()]);
        Ok(())
    }

    #[inline]
    fn mark_dirty(&mut self, page: usize) {
        self.touched[page] = 1;
        if self.root_dirty.mark(page) {
            self.pml_pending += 1;
            if self.pml_pending == PML_BATCH {
                self.counters.pml_flushes += 1;
                self.pml_pending = 0;
            }
        }
        if self.inc_epoch.is_some() {
            self.inc_dirty.mark(page);
        }
    }

    pub(crate) fn flush_pml(&mut self) {
        if self.pml_pending > 0 {
            self.counters.pml_flushes += 1;
            self.pml_pending = 0;
        }
    }

    /// Pages dirtied since the last root capture or restore, in first-touch
    /// order.
    pub fn dirty_pages(&self) -> &[u32] {
        self.root_dirty.pages()
    }

    pub fn is_dirty(&self, page: usize) -> bool {
        self.root_dirty.contains(page)
    }

    /// Pages dirtied since the incremental snapshot was captured or restored.
    /// Empty when no incremental snapshot is being tracked.
    pub fn inc_dirty_pages(&self) -> &[u32] {
        self.inc_dirty.pages()
    }

    pub fn counters(&self) -> MemCounters {
        self.counters
    }

    pub(crate) fn is_touched(&self, page: usize) -> bool {
        self.touched[page] != 0
    }

    pub(crate) fn copy_page_in(&mut self, page: usize, src: &[u8]) {
        let ps = self.page_size();
        self.data[page * ps..(page + 1) * ps].copy_from_slice(src);
        self.touched[page] = 1;
    }

    /// Copies every page on one of the dirty stacks from `src`, in stack
    /// order. Returns the number of pages copied.
    pub(crate) fn copy_logged_pages<'a>(
        &mut self,
        inc_log: bool,
        src: impl Fn(usize) -> &'a [u8],
    ) -> usize {
        let ps = self.page_size();
        let log = if inc_log { &self.inc_dirty } else { &self.root_dirty };
        for &p in &log.stack {
            let p = p as usize;
            self.data[p * ps..(p + 1) * ps].copy_from_slice(src(p));
        }
        log.stack.len()
    }

    pub(crate) fn clear_dirty(&mut self) {
        self.root_dirty.clear();
        self.inc_dirty.clear();
        self.inc_epoch = None;
        self.flush_pml();
    }

    pub(crate) fn mark_root_dirty(&mut self, page: usize) {
        self.root_dirty.mark(page);
    }

    pub(crate) fn start_inc_tracking(&mut self, generation: u64) {
        self.inc_dirty.clear();
        self.inc_epoch = Some(generation);
        self.flush_pml();
    }

    /// Checks that both dirty logs agree with their bitmaps.
    pub fn dirty_tracking_coherent(&self) -> bool {
        self.root_dirty.coherent()
            && self.inc_dirty.coherent()
            && self
                .inc_dirty
                .pages()
                .iter()
                .all(|&p| self.root_dirty.contains(p as usize))
    }

    /// Flags of the root-relative log, one byte per page.
    pub fn dirty_bitmap(&self) -> &[u8] {
        &self.root_dirty.flags
    }
}
