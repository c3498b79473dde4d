//! Safe memory reclamation: per-thread handles over interchangeable
//! hazard-pointer, epoch and interval based backends.
//!
//! A [`Domain`] owns the global reclamation state for one scheme. Threads
//! register to obtain a [`ThreadHandle`], wrap each data structure operation
//! in `begin_op`/`end_op`, publish reservations with `protect`/`duplicate`,
//! and hand removed nodes to `retire`. Retired nodes sit in the handle's
//! local limbo list until a reclamation scan proves no reservation can still
//! reach them.
//!
//! The backends differ in what a reservation is:
//!
//! * **HP** — a per-thread array of single-node hazard slots. Bounded
//!   garbage even under stalled threads.
//! * **EBR** — a per-thread epoch announcement; cheap, but one stalled
//!   thread blocks reclamation globally.
//! * **IBR** — per-node birth/retire era stamps checked against announced
//!   per-thread era intervals; bounded like HP.
//! * **LEAK** — retires without ever freeing; baseline for benchmarks.

use std::collections::VecDeque;
use std::fmt;
use std::sync::atomic::{fence, AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use crossbeam_utils::CachePadded;

use crate::tagged::{AtomicCell, TaggedRef};

/// Pattern written over reclaimed node memory in poisoned-free mode. Valid
/// keys are constrained below `2^62`, so a canary can never be a live key.
pub const CANARY: u64 = 0xDEAD_BEEF_DEAD_BEEF;

/// Largest permitted key; everything above is reserved for sentinels and
/// canary detection.
pub const MAX_KEY: u64 = (1 << 62) - 1;

const QUIESCENT: u64 = u64::MAX;

// Interleaving-instrumented wrappers for scheduler-visible shared accesses.
// Outside unit tests these compile to the bare atomic op.
#[inline]
fn au_load(a: &AtomicUsize) -> usize {
    #[cfg(test)]
    crate::interleave::step();
    a.load(Ordering::SeqCst)
}
#[inline]
fn au_store(a: &AtomicUsize, v: usize) {
    #[cfg(test)]
    crate::interleave::step();
    a.store(v, Ordering::SeqCst);
}
#[inline]
fn a64_load(a: &AtomicU64) -> u64 {
    #[cfg(test)]
    crate::interleave::step();
    a.load(Ordering::SeqCst)
}
#[inline]
fn a64_store(a: &AtomicU64, v: u64) {
    #[cfg(test)]
    crate::interleave::step();
    a.store(v, Ordering::SeqCst);
}
#[inline]
fn full_fence() {
    #[cfg(test)]
    crate::interleave::step();
    fence(Ordering::SeqCst);
}

/// Reclamation scheme selected at domain construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    /// Hazard pointers.
    Hp,
    /// Epoch-based reclamation.
    Ebr,
    /// Interval-based reclamation (birth/retire eras).
    Ibr,
    /// Never frees; diagnostic baseline.
    Leak,
}

impl Scheme {
    /// All reclaiming schemes plus the leak baseline.
    pub const ALL: [Scheme; 4] = [Scheme::Hp, Scheme::Ebr, Scheme::Ibr, Scheme::Leak];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Hp => "hp",
            Scheme::Ebr => "ebr",
            Scheme::Ibr => "ibr",
            Scheme::Leak => "leak",
        }
    }
}

impl std::str::FromStr for Scheme {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "hp" => Ok(Scheme::Hp),
            "ebr" => Ok(Scheme::Ebr),
            "ibr" => Ok(Scheme::Ibr),
            "leak" => Ok(Scheme::Leak),
            other => Err(format!("unknown reclamation scheme `{other}`")),
        }
    }
}

/// Errors from domain construction and thread registration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SmrError {
    /// A constructor argument was out of range.
    InvalidConfig(&'static str),
    /// `register` was called with all `max_threads` handles outstanding.
    ThreadCapacity { max_threads: usize },
    /// `drain` was called while handles are still registered.
    ActiveHandles { count: usize },
    /// An environment override did not parse as a positive integer.
    InvalidEnv { var: &'static str },
}

impl fmt::Display for SmrError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SmrError::InvalidConfig(what) => write!(f, "invalid configuration: {what}"),
            SmrError::ThreadCapacity { max_threads } => {
                write!(f, "thread capacity exceeded (max_threads = {max_threads})")
            }
            SmrError::ActiveHandles { count } => {
                write!(f, "cannot drain: {count} thread handle(s) still registered")
            }
            SmrError::InvalidEnv { var } => {
                write!(f, "environment override {var} must be a positive decimal integer")
            }
        }
    }
}

impl std::error::Error for SmrError {}

/// Per-node reclamation header; carries the birth era stamped at allocation.
/// Only IBR consults it, but keeping it unconditionally makes nodes
/// scheme-independent.
#[derive(Debug, Default)]
pub struct NodeHeader {
    birth: AtomicU64,
}

impl NodeHeader {
    pub fn new() -> Self {
        NodeHeader { birth: AtomicU64::new(0) }
    }

    /// Era stamped when the node was allocated.
    #[inline]
    pub fn birth_era(&self) -> u64 {
        self.birth.load(Ordering::Relaxed)
    }

    fn set_birth(&self, era: u64) {
        self.birth.store(era, Ordering::Relaxed);
    }

    /// Overwrites the header with the canary; returns true if it already
    /// held the canary (a double free).
    pub fn poison(&self) -> bool {
        self.birth.swap(CANARY, Ordering::Relaxed) == CANARY
    }
}

/// Implemented by node types managed through a [`Domain`].
///
/// # Safety
///
/// `header` must return a header embedded in the node itself, and `poison`
/// must overwrite every field a concurrent reader could dereference using
/// atomic stores, returning true iff the node was already poisoned.
pub unsafe trait SmrNode: Send {
    fn header(&self) -> &NodeHeader;
    fn poison(&self) -> bool;
}

unsafe fn dealloc_thunk<T>(p: *mut u8) {
    drop(Box::from_raw(p as *mut T));
}

unsafe fn poison_thunk<T: SmrNode>(p: *mut u8) -> bool {
    (*(p as *mut T)).poison()
}

/// A retired node awaiting reclamation.
struct RetiredRecord {
    ptr: *mut u8,
    poison_fn: unsafe fn(*mut u8) -> bool,
    dealloc_fn: unsafe fn(*mut u8),
    birth_era: u64,
    retire_era: u64,
}

// Records own their node exclusively once retired.
unsafe impl Send for RetiredRecord {}

struct Quarantined {
    ptr: *mut u8,
    dealloc_fn: unsafe fn(*mut u8),
}

unsafe impl Send for Quarantined {}

/// Globally readable reservation state of one thread.
struct ThreadState {
    slots: Box<[AtomicUsize]>,
    /// EBR announcement / IBR interval lower bound; `QUIESCENT` when idle.
    lower: AtomicU64,
    /// IBR interval upper bound; `QUIESCENT` when idle.
    upper: AtomicU64,
}

impl ThreadState {
    fn new(slot_count: usize) -> Self {
        ThreadState {
            slots: (0..slot_count).map(|_| AtomicUsize::new(0)).collect(),
            lower: AtomicU64::new(QUIESCENT),
            upper: AtomicU64::new(QUIESCENT),
        }
    }
}

#[derive(Default)]
struct Counters {
    allocations: AtomicU64,
    retirements: AtomicU64,
    freed_retired: AtomicU64,
    freed_unlinked: AtomicU64,
    peak_unreclaimed: AtomicU64,
}

struct IdPool {
    free: Vec<usize>,
    next: usize,
    live: usize,
}

/// Snapshot of a domain's monotone counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SmrStats {
    pub allocations: u64,
    pub retirements: u64,
    /// Total frees: reclaimed retired nodes plus nodes released before
    /// ever being published.
    pub reclamations: u64,
    /// Maximum over time of retired-but-not-yet-reclaimed nodes.
    pub peak_unreclaimed: u64,
}

/// Configuration for [`Domain::with_config`].
#[derive(Debug, Clone)]
pub struct DomainConfig {
    pub scheme: Scheme,
    pub max_threads: usize,
    pub slot_count: usize,
    /// Retire-list length that triggers a scan; defaults to 64 or the
    /// `SCOT_SCAN_THRESHOLD` environment override.
    pub scan_threshold: Option<usize>,
    /// IBR: allocations per thread between global era bumps; defaults to 32
    /// or the `SCOT_ERA_FREQ` environment override.
    pub era_freq: Option<u64>,
    /// Poisoned-free instrumentation: overwrite reclaimed nodes with the
    /// canary and quarantine their memory instead of recycling it.
    pub poison: bool,
    /// Poisoned blocks held back from the allocator before the oldest are
    /// released for real.
    pub quarantine_cap: usize,
}

impl DomainConfig {
    pub fn new(scheme: Scheme, max_threads: usize, slot_count: usize) -> Self {
        DomainConfig {
            scheme,
            max_threads,
            slot_count,
            scan_threshold: None,
            era_freq: None,
            poison: false,
            quarantine_cap: 1 << 21,
        }
    }

    pub fn poison(mut self, on: bool) -> Self {
        self.poison = on;
        self
    }

    pub fn scan_threshold(mut self, t: usize) -> Self {
        self.scan_threshold = Some(t);
        self
    }

    pub fn era_freq(mut self, f: u64) -> Self {
        self.era_freq = Some(f);
        self
    }
}

fn env_override(var: &'static str) -> Result<Option<u64>, SmrError> {
    match std::env::var(var) {
        Ok(s) => match s.trim().parse::<u64>() {
            Ok(v) if v > 0 => Ok(Some(v)),
            _ => Err(SmrError::InvalidEnv { var }),
        },
        Err(_) => Ok(None),
    }
}

pub(crate) struct DomainShared {
    scheme: Scheme,
    max_threads: usize,
    slot_count: usize,
    scan_threshold: usize,
    era_freq: u64,
    poison: bool,
    quarantine_cap: usize,
    /// Global epoch (EBR) or era clock (IBR).
    era: AtomicU64,
    threads: Box<[CachePadded<ThreadState>]>,
    ids: Mutex<IdPool>,
    orphans: Mutex<Vec<RetiredRecord>>,
    quarantine: Mutex<VecDeque<Quarantined>>,
    counters: Counters,
    corrupted: AtomicBool,
    corruption: Mutex<Option<String>>,
}

unsafe impl Send for DomainShared {}
unsafe impl Sync for DomainShared {}

impl DomainShared {
    fn note_retirement(&self) {
        let retired = self.counters.retirements.fetch_add(1, Ordering::Relaxed) + 1;
        let freed = self.counters.freed_retired.load(Ordering::Relaxed);
        self.counters
            .peak_unreclaimed
            .fetch_max(retired.saturating_sub(freed), Ordering::Relaxed);
    }

    /// Poisons (in poison mode) and releases one retired node.
    unsafe fn free_record(&self, rec: RetiredRecord) {
        if self.poison {
            if (rec.poison_fn)(rec.ptr) {
                self.corruption_trap(format!("double free detected at node {:p}", rec.ptr));
            }
            let mut q = self.quarantine.lock().unwrap();
            q.push_back(Quarantined { ptr: rec.ptr, dealloc_fn: rec.dealloc_fn });
            if q.len() > self.quarantine_cap {
                let old = q.pop_front().unwrap();
                (old.dealloc_fn)(old.ptr);
            }
        } else {
            (rec.dealloc_fn)(rec.ptr);
        }
        self.counters.freed_retired.fetch_add(1, Ordering::Relaxed);
    }

    /// Records a corruption diagnostic and aborts the current operation by
    /// panicking; stress harnesses catch the unwind and report.
    pub(crate) fn corruption_trap(&self, msg: String) -> ! {
        self.corrupted.store(true, Ordering::SeqCst);
        let mut slot = self.corruption.lock().unwrap();
        if slot.is_none() {
            *slot = Some(msg.clone());
        }
        drop(slot);
        panic!("memory corruption: {msg}");
    }

    pub(crate) unsafe fn retire_orphan<T: SmrNode>(&self, node: *mut T) {
        let rec = RetiredRecord {
            ptr: node as *mut u8,
            poison_fn: poison_thunk::<T>,
            dealloc_fn: dealloc_thunk::<T>,
            birth_era: (*node).header().birth_era(),
            retire_era: self.era.load(Ordering::SeqCst),
        };
        self.note_retirement();
        self.orphans.lock().unwrap().push(rec);
    }

    pub(crate) fn alloc_raw<T: SmrNode>(&self, value: T) -> *mut T {
        let p = Box::into_raw(Box::new(value));
        // Stamp before the node can be published.
        unsafe { (*p).header().set_birth(self.era.load(Ordering::SeqCst)) };
        self.counters.allocations.fetch_add(1, Ordering::Relaxed);
        p
    }

}

impl Drop for DomainShared {
    fn drop(&mut self) {
        // No handles can exist here: each holds an Arc to this state.
        let orphans = std::mem::take(&mut *self.orphans.lock().unwrap());
        for rec in orphans {
            unsafe { self.free_record(rec) };
        }
        let q = std::mem::take(&mut *self.quarantine.lock().unwrap());
        for item in q {
            unsafe { (item.dealloc_fn)(item.ptr) };
        }
    }
}

/// Shared reclamation domain; cheap to clone, all clones refer to the same
/// state.
#[derive(Clone)]
pub struct Domain {
    shared: Arc<DomainShared>,
}

impl fmt::Debug for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Domain")
            .field("scheme", &self.shared.scheme)
            .field("max_threads", &self.shared.max_threads)
            .field("slot_count", &self.shared.slot_count)
            .finish()
    }
}

impl Domain {
    /// Creates a domain with a zeroed epoch/era clock and no registered
    /// threads. Requires `max_threads >= 1` and `slot_count >= 4`.
    pub fn new(scheme: Scheme, max_threads: usize, slot_count: usize) -> Result<Domain, SmrError> {
        Domain::with_config(DomainConfig::new(scheme, max_threads, slot_count))
    }

    pub fn with_config(cfg: DomainConfig) -> Result<Domain, SmrError> {
        if cfg.max_threads == 0 {
            return Err(SmrError::InvalidConfig("max_threads must be at least 1"));
        }
        if cfg.slot_count < 4 {
            return Err(SmrError::InvalidConfig("slot_count must be at least 4"));
        }
        let scan_threshold = match cfg.scan_threshold {
            Some(t) if t == 0 => return Err(SmrError::InvalidConfig("scan_threshold must be positive")),
            Some(t) => t,
            None => env_override("SCOT_SCAN_THRESHOLD")?.map(|v| v as usize).unwrap_or(64),
        };
        let era_freq = match cfg.era_freq {
            Some(f) if f == 0 => return Err(SmrError::InvalidConfig("era_freq must be positive")),
            Some(f) => f,
            None => env_override("SCOT_ERA_FREQ")?.unwrap_or(32),
        };
        let threads = (0..cfg.max_threads)
            .map(|_| CachePadded::new(ThreadState::new(cfg.slot_count)))
            .collect();
        Ok(Domain {
            shared: Arc::new(DomainShared {
                scheme: cfg.scheme,
                max_threads: cfg.max_threads,
                slot_count: cfg.slot_count,
                scan_threshold,
                era_freq,
                poison: cfg.poison,
                quarantine_cap: cfg.quarantine_cap,
                era: AtomicU64::new(0),
                threads,
                ids: Mutex::new(IdPool { free: Vec::new(), next: 0, live: 0 }),
                orphans: Mutex::new(Vec::new()),
                quarantine: Mutex::new(VecDeque::new()),
                counters: Counters::default(),
                corrupted: AtomicBool::new(false),
                corruption: Mutex::new(None),
            }),
        })
    }

    pub fn scheme(&self) -> Scheme {
        self.shared.scheme
    }

    pub fn max_threads(&self) -> usize {
        self.shared.max_threads
    }

    pub fn slot_count(&self) -> usize {
        self.shared.slot_count
    }

    pub fn scan_threshold(&self) -> usize {
        self.shared.scan_threshold
    }

    pub fn era_freq(&self) -> u64 {
        self.shared.era_freq
    }

    pub fn poison_enabled(&self) -> bool {
        self.shared.poison
    }

    /// Registers the calling context, yielding an exclusive per-thread
    /// handle. Freed ids are reused.
    pub fn register(&self) -> Result<ThreadHandle, SmrError> {
        let id = {
            let mut ids = self.shared.ids.lock().unwrap();
            if ids.live == self.shared.max_threads {
                return Err(SmrError::ThreadCapacity { max_threads: self.shared.max_threads });
            }
            ids.live += 1;
            ids.free.pop().unwrap_or_else(|| {
                let n = ids.next;
                ids.next += 1;
                n
            })
        };
        let state = &self.shared.threads[id];
        for s in state.slots.iter() {
            s.store(0, Ordering::SeqCst);
        }
        state.lower.store(QUIESCENT, Ordering::SeqCst);
        state.upper.store(QUIESCENT, Ordering::SeqCst);
        Ok(ThreadHandle {
            domain: self.shared.clone(),
            id,
            retired: Vec::new(),
            active: false,
            alloc_tick: 0,
            counters: OpCounters::default(),
        })
    }

    pub fn stats(&self) -> SmrStats {
        let c = &self.shared.counters;
        SmrStats {
            allocations: c.allocations.load(Ordering::Relaxed),
            retirements: c.retirements.load(Ordering::Relaxed),
            reclamations: c.freed_retired.load(Ordering::Relaxed)
                + c.freed_unlinked.load(Ordering::Relaxed),
            peak_unreclaimed: c.peak_unreclaimed.load(Ordering::Relaxed),
        }
    }

    /// Current count of retired-but-unreclaimed nodes.
    pub fn unreclaimed(&self) -> u64 {
        let c = &self.shared.counters;
        c.retirements
            .load(Ordering::Relaxed)
            .saturating_sub(c.freed_retired.load(Ordering::Relaxed))
    }

    /// Frees every orphaned retired node. Only legal once all handles have
    /// been released; typically called after dropping the data structures.
    pub fn drain(&self) -> Result<usize, SmrError> {
        {
            let ids = self.shared.ids.lock().unwrap();
            if ids.live > 0 {
                return Err(SmrError::ActiveHandles { count: ids.live });
            }
        }
        let orphans = std::mem::take(&mut *self.shared.orphans.lock().unwrap());
        let n = orphans.len();
        for rec in orphans {
            unsafe { self.shared.free_record(rec) };
        }
        Ok(n)
    }

    /// Diagnostic recorded by the first canary or double-free trap, if any.
    pub fn corruption(&self) -> Option<String> {
        if !self.shared.corrupted.load(Ordering::SeqCst) {
            return None;
        }
        self.shared.corruption.lock().unwrap().clone()
    }

    /// Bumps the global era; exposed for tests that need to place birth and
    /// retire stamps at chosen eras.
    #[doc(hidden)]
    pub fn advance_era(&self) {
        self.shared.era.fetch_add(1, Ordering::SeqCst);
    }

    #[doc(hidden)]
    pub fn current_era(&self) -> u64 {
        self.shared.era.load(Ordering::SeqCst)
    }

    pub(crate) fn shared(&self) -> &Arc<DomainShared> {
        &self.shared
    }

    pub(crate) fn same_domain(&self, handle: &ThreadHandle) -> bool {
        Arc::ptr_eq(&self.shared, &handle.domain)
    }

    #[cfg(test)]
    pub(crate) fn announced(&self, thread: usize) -> (u64, u64) {
        let t = &self.shared.threads[thread];
        (t.lower.load(Ordering::SeqCst), t.upper.load(Ordering::SeqCst))
    }
}

/// Per-operation instrumentation counters, maintained by the data
/// structures and read by the benchmark harness.
#[derive(Debug, Default, Clone, Copy)]
pub struct OpCounters {
    /// Structural compare-and-swap attempts (marking, linking, unlinking).
    pub cas_attempts: u64,
    /// Failed structural CAS attempts.
    pub cas_failures: u64,
    /// Traversal restarts forced by a failed safety validation.
    pub validation_restarts: u64,
    /// Highest hazard slot index this handle ever touched.
    pub max_slot: usize,
}

/// Exclusive per-thread reclamation state. May migrate between threads when
/// idle but must only be used by one thread at a time.
pub struct ThreadHandle {
    domain: Arc<DomainShared>,
    id: usize,
    retired: Vec<RetiredRecord>,
    active: bool,
    alloc_tick: u64,
    counters: OpCounters,
}

// Retired records are exclusively owned by the handle.
unsafe impl Send for ThreadHandle {}

impl fmt::Debug for ThreadHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ThreadHandle")
            .field("id", &self.id)
            .field("retired", &self.retired.len())
            .finish()
    }
}

impl ThreadHandle {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn counters(&self) -> OpCounters {
        self.counters
    }

    pub fn reset_counters(&mut self) {
        self.counters = OpCounters::default();
    }

    #[inline]
    fn state(&self) -> &ThreadState {
        &self.domain.threads[self.id]
    }

    #[inline]
    pub(crate) fn note_cas(&mut self, ok: bool) {
        self.counters.cas_attempts += 1;
        if !ok {
            self.counters.cas_failures += 1;
        }
    }

    #[inline]
    pub(crate) fn note_validation_restart(&mut self) {
        self.counters.validation_restarts += 1;
    }

    #[inline]
    fn note_slot(&mut self, slot: usize) {
        if slot > self.counters.max_slot {
            self.counters.max_slot = slot;
        }
    }

    /// Allocates a node, stamping its birth era. IBR advances the global
    /// era every `era_freq` allocations by this handle.
    pub fn alloc<T: SmrNode>(&mut self, value: T) -> *mut T {
        let p = self.domain.alloc_raw(value);
        if self.domain.scheme == Scheme::Ibr {
            self.alloc_tick += 1;
            if self.alloc_tick % self.domain.era_freq == 0 {
                #[cfg(test)]
                crate::interleave::step();
                self.domain.era.fetch_add(1, Ordering::SeqCst);
            }
        }
        p
    }

    /// Releases a node that was never published to shared memory.
    ///
    /// # Safety
    ///
    /// `node` must come from [`alloc`](Self::alloc) on this domain and no
    /// other reference to it may exist.
    pub unsafe fn discard<T: SmrNode>(&mut self, node: *mut T) {
        drop(Box::from_raw(node));
        self.domain.counters.freed_unlinked.fetch_add(1, Ordering::Relaxed);
    }

    /// Opens an operation: EBR/IBR announce the current epoch/era; HP does
    /// nothing. Operations must not nest.
    pub fn begin_op(&mut self) {
        debug_assert!(!self.active, "begin_op while an operation is already active");
        self.active = true;
        match self.domain.scheme {
            Scheme::Hp | Scheme::Leak => {}
            Scheme::Ebr => {
                let e = a64_load(&self.domain.era);
                a64_store(&self.state().lower, e);
            }
            Scheme::Ibr => {
                let e = a64_load(&self.domain.era);
                // Lower first: a concurrent scan that tears the two stores
                // sees a wider interval, which is conservative.
                a64_store(&self.state().lower, e);
                a64_store(&self.state().upper, e);
            }
        }
    }

    /// Closes the current operation: EBR/IBR return to quiescence; HP
    /// clears all hazard slots.
    pub fn end_op(&mut self) {
        debug_assert!(self.active, "end_op without a matching begin_op");
        self.active = false;
        match self.domain.scheme {
            Scheme::Leak => {}
            Scheme::Hp => {
                for s in self.state().slots.iter() {
                    au_store(s, 0);
                }
            }
            Scheme::Ebr => a64_store(&self.state().lower, QUIESCENT),
            Scheme::Ibr => {
                a64_store(&self.state().lower, QUIESCENT);
                a64_store(&self.state().upper, QUIESCENT);
            }
        }
    }

    pub fn op_active(&self) -> bool {
        self.active
    }

    /// Reads `source` and publishes a reservation for the referenced node
    /// before confirming the read, looping until the confirmation holds.
    ///
    /// * HP — stores the stripped address into `slot`, then re-reads
    ///   `source`; the slot store is globally visible before the re-read
    ///   (both are sequentially consistent), which is the hinge of the HP
    ///   safety argument.
    /// * IBR — extends the announced era interval to cover the current
    ///   global era, then confirms the era did not move.
    /// * EBR/LEAK — a plain load; the epoch announcement already protects.
    ///
    /// The returned value keeps its mark bits; the reservation covers the
    /// stripped address. If the call returns `v` and the node had not been
    /// retired before the reservation became visible, the node will not be
    /// reclaimed while the reservation holds.
    pub fn protect<T>(&mut self, source: &AtomicCell<T>, slot: usize) -> TaggedRef<T> {
        debug_assert!(slot < self.domain.slot_count, "slot {slot} out of range");
        self.note_slot(slot);
        match self.domain.scheme {
            Scheme::Ebr | Scheme::Leak => source.load(),
            Scheme::Hp => {
                let mut v = source.load();
                loop {
                    au_store(&self.state().slots[slot], v.strip_marks().into_raw());
                    let confirm = source.load();
                    if confirm == v {
                        return v;
                    }
                    v = confirm;
                }
            }
            Scheme::Ibr => {
                let mut prev = a64_load(&self.state().upper);
                loop {
                    let v = source.load();
                    let e = a64_load(&self.domain.era);
                    if e == prev {
                        return v;
                    }
                    a64_store(&self.state().upper, e);
                    prev = e;
                }
            }
        }
    }

    /// Publishes a reservation for `node` directly, without the
    /// confirmation loop. Only sound for nodes that can never be retired
    /// (structure anchors) or nodes already covered by another slot; used
    /// to seed the slot window at traversal start so later duplicates never
    /// copy a stale reservation from a previous attempt.
    pub(crate) fn pin_slot<T>(&mut self, node: *mut T, slot: usize) {
        debug_assert!(slot < self.domain.slot_count);
        self.note_slot(slot);
        if self.domain.scheme == Scheme::Hp {
            au_store(&self.state().slots[slot], node as usize);
        }
    }

    /// Copies the reservation in `from_slot` into `to_slot`. The old index
    /// must be numerically lower than the new one so that a concurrent scan
    /// reading slots in ascending order cannot miss the node: the scan
    /// either sees the copy already published in `to_slot`, or reaches
    /// `from_slot` first while the original is still there.
    pub fn duplicate(&mut self, from_slot: usize, to_slot: usize) {
        debug_assert!(
            from_slot < to_slot,
            "duplicate must copy to a higher slot index (got {from_slot} -> {to_slot})"
        );
        debug_assert!(to_slot < self.domain.slot_count);
        self.note_slot(to_slot);
        if self.domain.scheme == Scheme::Hp {
            let v = au_load(&self.state().slots[from_slot]);
            au_store(&self.state().slots[to_slot], v);
        }
    }

    /// Hands an unlinked node to the reclamation scheme. Runs a scan when
    /// the local limbo list reaches the scan threshold, so the list length
    /// never exceeds it after this call returns.
    ///
    /// # Safety
    ///
    /// The node must be unlinked (no shared cell can produce new references
    /// to it) and must not have been retired before.
    pub unsafe fn retire<T: SmrNode>(&mut self, node: *mut T) {
        let retire_era = match self.domain.scheme {
            Scheme::Hp | Scheme::Leak => 0,
            Scheme::Ebr | Scheme::Ibr => a64_load(&self.domain.era),
        };
        self.retired.push(RetiredRecord {
            ptr: node as *mut u8,
            poison_fn: poison_thunk::<T>,
            dealloc_fn: dealloc_thunk::<T>,
            birth_era: (*node).header().birth_era(),
            retire_era,
        });
        self.domain.note_retirement();
        if self.retired.len() >= self.domain.scan_threshold {
            self.scan_reclaim();
        }
    }

    /// Frees every retired node no reservation can still reach; returns the
    /// number freed.
    pub fn scan_reclaim(&mut self) -> usize {
        match self.domain.scheme {
            Scheme::Leak => 0,
            Scheme::Hp => self.scan_hp(),
            Scheme::Ebr => self.scan_ebr(),
            Scheme::Ibr => self.scan_ibr(),
        }
    }

    fn scan_hp(&mut self) -> usize {
        // The fence orders the snapshot after any unlink CAS this thread
        // performed; protect's slot store is sequentially consistent, so
        // either the traverser's re-read sees the unlink or this snapshot
        // sees the slot.
        full_fence();
        let mut held: Vec<usize> = Vec::with_capacity(self.domain.max_threads * self.domain.slot_count);
        for t in self.domain.threads.iter() {
            // Ascending slot order, matching the duplicate ordering rule.
            for s in t.slots.iter() {
                let v = au_load(s);
                if v != 0 {
                    held.push(v);
                }
            }
        }
        self.free_retained(|rec| !held.contains(&(rec.ptr as usize)))
    }

    fn scan_ebr(&mut self) -> usize {
        let current = a64_load(&self.domain.era);
        let mut min = u64::MAX;
        let mut all_at_current = true;
        for t in self.domain.threads.iter() {
            let a = a64_load(&t.lower);
            if a != QUIESCENT {
                min = min.min(a);
                if a != current {
                    all_at_current = false;
                }
            }
        }
        if all_at_current {
            #[cfg(test)]
            crate::interleave::step();
            let _ = self.domain.era.compare_exchange(
                current,
                current + 1,
                Ordering::SeqCst,
                Ordering::SeqCst,
            );
        }
        // Free records at least two grace periods behind every active
        // announcement.
        self.free_retained(|rec| min == u64::MAX || rec.retire_era + 2 <= min)
    }

    fn scan_ibr(&mut self) -> usize {
        let mut intervals: Vec<(u64, u64)> = Vec::with_capacity(self.domain.max_threads);
        for t in self.domain.threads.iter() {
            let lower = a64_load(&t.lower);
            if lower == QUIESCENT {
                continue;
            }
            let upper = a64_load(&t.upper);
            intervals.push((lower, upper));
        }
        self.free_retained(|rec| {
            !intervals
                .iter()
                .any(|&(l, u)| rec.birth_era <= u && l <= rec.retire_era)
        })
    }

    fn free_retained(&mut self, can_free: impl Fn(&RetiredRecord) -> bool) -> usize {
        let mut freed = 0;
        let mut kept = Vec::with_capacity(self.retired.len());
        for rec in self.retired.drain(..) {
            if can_free(&rec) {
                unsafe { self.domain.free_record(rec) };
                freed += 1;
            } else {
                kept.push(rec);
            }
        }
        self.retired = kept;
        freed
    }

    /// Length of the local limbo list.
    pub fn retired_len(&self) -> usize {
        self.retired.len()
    }

    /// Traps on a canary read; used by the data structures in poisoned-free
    /// mode when a key or link word turns out to be reclaimed memory.
    #[cold]
    pub(crate) fn canary_trap(&self, what: &str, op: &str, value: u64) -> ! {
        self.domain.corruption_trap(format!(
            "canary {what} observed by thread {} during {op} (value {value:#x})",
            self.id
        ));
    }

    #[cfg(test)]
    pub(crate) fn slot_raw(&self, slot: usize) -> usize {
        self.state().slots[slot].load(Ordering::SeqCst)
    }

    /// Debug-build slot inspection backing traversal assertions.
    #[cfg(debug_assertions)]
    pub(crate) fn debug_slot(&self, slot: usize) -> usize {
        self.state().slots[slot].load(Ordering::SeqCst)
    }
}

impl Drop for ThreadHandle {
    fn drop(&mut self) {
        if self.active {
            self.end_op();
        } else if self.domain.scheme == Scheme::Hp {
            for s in self.state().slots.iter() {
                s.store(0, Ordering::SeqCst);
            }
        }
        self.scan_reclaim();
        if !self.retired.is_empty() {
            let rest: Vec<_> = self.retired.drain(..).collect();
            self.domain.orphans.lock().unwrap().extend(rest);
        }
        let state = self.state();
        state.lower.store(QUIESCENT, Ordering::SeqCst);
        state.upper.store(QUIESCENT, Ordering::SeqCst);
        let mut ids = self.domain.ids.lock().unwrap();
        ids.live -= 1;
        ids.free.push(self.id);
    }
}
