//! Sorted lock-free linked-list set with safe optimistic traversals.
//!
//! The list keeps logically deleted nodes linked (one mark bit stolen from
//! the successor pointer) and lets traversals skip over them; update
//! traversals unlink a whole skipped chain with a single CAS. Under
//! hazard-pointer-style reclamation that skipping is only safe with extra
//! care: the first deleted node is protected the normal way, but nodes
//! behind it may already be reclaimed. Traversals here hold the last safe
//! node (slot 2) and the first unsafe node (slot 3) and re-validate, after
//! every reservation inside a deleted region, that the last safe node still
//! points at the first unsafe one; on mismatch the whole traversal restarts.
//!
//! A construction flag switches to the Harris-Michael variant, which
//! unlinks every marked node on first encounter (one CAS per node, no
//! read-only searches) and needs neither slot 3 nor the validation.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::smr::{Domain, NodeHeader, SmrNode, ThreadHandle, CANARY, MAX_KEY};
use crate::tagged::{AtomicCell, Bit, TaggedRef};

/// Hazard slot roles during list traversals.
const HP_NEXT: usize = 0;
const HP_CURR: usize = 1;
const HP_PREV: usize = 2; // last safe node
const HP_UNSAFE: usize = 3; // first unsafe (logically deleted) node

/// Physical unlinking policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ListVariant {
    /// Skip logically deleted chains and unlink them in one CAS.
    #[default]
    Harris,
    /// Unlink each logically deleted node upon first encounter.
    HarrisMichael,
}

/// Construction options.
#[derive(Debug, Clone)]
pub struct ListOptions {
    pub variant: ListVariant,
    /// Dangerous-zone validation; disabling it (tests only) reproduces the
    /// unsafe traversal that crashes under hazard-pointer reclamation.
    pub scot_validation: bool,
    /// Yield to the scheduler while inside a deleted region; widens race
    /// windows for stress runs.
    pub stress_yield: bool,
}

impl Default for ListOptions {
    fn default() -> Self {
        ListOptions { variant: ListVariant::Harris, scot_validation: true, stress_yield: false }
    }
}

/// List node: key plus a successor link whose low bit is the deletion mark.
///
/// The key field is atomic only so poisoned-free instrumentation may
/// overwrite it while racy readers are still looking; it is written once at
/// construction.
pub struct ListNode {
    header: NodeHeader,
    key: AtomicU64,
    next: AtomicCell<ListNode>,
}

impl ListNode {
    fn new(key: u64) -> Self {
        ListNode { header: NodeHeader::new(), key: AtomicU64::new(key), next: AtomicCell::null() }
    }

    #[inline]
    fn key(&self) -> u64 {
        self.key.load(Ordering::Relaxed)
    }
}

unsafe impl SmrNode for ListNode {
    fn header(&self) -> &NodeHeader {
        &self.header
    }
    fn poison(&self) -> bool {
        let already = self.key.swap(CANARY, Ordering::Relaxed) == CANARY;
        self.next.store(TaggedRef::from_raw(CANARY as usize));
        self.header.poison();
        already
    }
}

/// Traversal outcome: the cell that pointed at `curr`, the first unmarked
/// node with key >= the search key (null at list end), and its successor
/// value.
pub(crate) struct FindResult {
    pub(crate) prev: *const AtomicCell<ListNode>,
    pub(crate) curr: TaggedRef<ListNode>,
    pub(crate) next: TaggedRef<ListNode>,
    pub(crate) found: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum TraversalMode {
    /// Read-only: skip unlinking entirely (Harris variant).
    Search,
    /// Unlink the skipped chain before returning.
    Update,
}

/// Sorted lock-free set over 64-bit keys.
pub struct HarrisList {
    /// Anchor cell; never marked and never reclaimed, so traversals always
    /// have a safe restart point.
    head: AtomicCell<ListNode>,
    domain: Domain,
    variant: ListVariant,
    scot: bool,
    stress_yield: bool,
    poison: bool,
}

unsafe impl Send for HarrisList {}
unsafe impl Sync for HarrisList {}

impl HarrisList {
    pub fn new(domain: &Domain) -> Self {
        Self::with_options(domain, ListOptions::default())
    }

    pub fn with_options(domain: &Domain, opts: ListOptions) -> Self {
        HarrisList {
            head: AtomicCell::null(),
            domain: domain.clone(),
            variant: opts.variant,
            scot: opts.scot_validation,
            stress_yield: opts.stress_yield,
            poison: domain.poison_enabled(),
        }
    }

    pub fn variant(&self) -> ListVariant {
        self.variant
    }

    fn enter(&self, handle: &mut ThreadHandle) {
        debug_assert!(self.domain.same_domain(handle), "handle from a different domain");
        handle.begin_op();
    }

    fn exit(&self, handle: &mut ThreadHandle) {
        handle.end_op();
    }

    #[inline]
    fn guard_word(&self, handle: &ThreadHandle, word: TaggedRef<ListNode>, op: &'static str) {
        if self.poison && word.into_raw() as u64 == CANARY {
            handle.canary_trap("link", op, word.into_raw() as u64);
        }
    }

    #[inline]
    fn guard_key(&self, handle: &ThreadHandle, key: u64, op: &'static str) {
        if self.poison && key == CANARY {
            handle.canary_trap("key", op, key);
        }
    }

    fn find(&self, handle: &mut ThreadHandle, key: u64, mode: TraversalMode) -> FindResult {
        match self.variant {
            ListVariant::Harris => self.find_harris(handle, key, mode),
            ListVariant::HarrisMichael => self.find_harris_michael(handle, key),
        }
    }

    /// Optimistic traversal with chain unlinking.
    fn find_harris(&self, handle: &mut ThreadHandle, key: u64, mode: TraversalMode) -> FindResult {
        'again: loop {
            let mut prev: *const AtomicCell<ListNode> = &self.head;
            let mut curr = handle.protect(&self.head, HP_CURR);
            // The value *prev held when prev was last moved; the head anchor
            // is never marked, so this starts out clean.
            let mut prev_next = curr;
            if self.scot {
                // The zone may start at the very first node, so the
                // first-unsafe reservation must cover it from the start;
                // otherwise the node could be recycled and the address
                // comparison below would be fooled.
                handle.duplicate(HP_CURR, HP_UNSAFE);
            }
            let mut next = TaggedRef::null();

            loop {
                if curr.is_null() {
                    break;
                }
                let curr_ref = unsafe { curr.deref() };
                next = handle.protect(&curr_ref.next, HP_NEXT);
                self.guard_word(handle, next, "find");
                if !next.is_marked(Bit::Mark) {
                    let k = curr_ref.key();
                    self.guard_key(handle, k, "find");
                    if k >= key {
                        break;
                    }
                    prev = &curr_ref.next;
                    prev_next = next;
                    handle.duplicate(HP_CURR, HP_PREV);
                    if self.scot {
                        handle.duplicate(HP_NEXT, HP_UNSAFE);
                    }
                } else {
                    // Dangerous zone: curr is logically deleted. The chain
                    // from prev_next onward may be unlinked wholesale at any
                    // moment, after which nodes behind the first one can be
                    // reclaimed. Validate that the last safe node still
                    // points at the first unsafe node; the reservation for
                    // `next` is already visible, so success here means the
                    // chain -- `next` included -- was still linked.
                    if self.stress_yield {
                        std::thread::yield_now();
                    }
                    if self.scot {
                        #[cfg(debug_assertions)]
                        if self.domain.scheme() == crate::smr::Scheme::Hp {
                            debug_assert_eq!(
                                handle.debug_slot(HP_UNSAFE),
                                prev_next.strip_marks().into_raw(),
                                "slot 3 must hold the first unsafe node"
                            );
                        }
                        if unsafe { (*prev).load() } != prev_next {
                            handle.note_validation_restart();
                            continue 'again;
                        }
                    }
                }
                curr = next.strip_marks();
                handle.duplicate(HP_NEXT, HP_CURR);
            }

            if mode == TraversalMode::Update && prev_next != curr {
                // Swing the last safe node over the whole marked chain. The
                // expected value is unmarked, so this can never unlink from
                // a node that is itself logically deleted.
                debug_assert!(!prev_next.is_marked(Bit::Mark));
                let ok = unsafe { (*prev).compare_exchange(prev_next, curr) }.is_ok();
                handle.note_cas(ok);
                if !ok {
                    continue 'again;
                }
                // We unlinked the chain, so we are its unique retirer; the
                // marked links are frozen and safe to walk.
                let mut node = prev_next;
                while node != curr {
                    let p = node.as_ptr();
                    let nx = unsafe { (*p).next.load() }.strip_marks();
                    unsafe { handle.retire(p) };
                    node = nx;
                }
            }

            let found = !curr.is_null() && {
                let k = unsafe { curr.deref() }.key();
                self.guard_key(handle, k, "find");
                k == key
            };
            return FindResult { prev, curr, next, found };
        }
    }

    /// Unlink-on-encounter traversal; uses slots 0-2 only and needs no
    /// dangerous-zone validation because it never walks past a marked node.
    fn find_harris_michael(&self, handle: &mut ThreadHandle, key: u64) -> FindResult {
        'again: loop {
            let mut prev: *const AtomicCell<ListNode> = &self.head;
            let mut curr = handle.protect(&self.head, HP_CURR);
            let mut next = TaggedRef::null();

            loop {
                if curr.is_null() {
                    break;
                }
                let curr_ref = unsafe { curr.deref() };
                next = handle.protect(&curr_ref.next, HP_NEXT);
                self.guard_word(handle, next, "find");
                if next.is_marked(Bit::Mark) {
                    let target = next.strip_marks();
                    let ok = unsafe { (*prev).compare_exchange(curr, target) }.is_ok();
                    handle.note_cas(ok);
                    if !ok {
                        continue 'again;
                    }
                    unsafe { handle.retire(curr.as_ptr()) };
                    curr = target;
                    handle.duplicate(HP_NEXT, HP_CURR);
                    continue;
                }
                let k = curr_ref.key();
                self.guard_key(handle, k, "find");
                if k >= key {
                    break;
                }
                prev = &curr_ref.next;
                handle.duplicate(HP_CURR, HP_PREV);
                curr = next;
                handle.duplicate(HP_NEXT, HP_CURR);
            }

            let found = !curr.is_null() && unsafe { curr.deref() }.key() == key;
            return FindResult { prev, curr, next, found };
        }
    }

    /// Inserts `key`; returns false if it was already present.
    pub fn insert(&self, handle: &mut ThreadHandle, key: u64) -> bool {
        assert!(key <= MAX_KEY, "key {key} above MAX_KEY");
        self.enter(handle);
        let r = self.insert_inner(handle, key);
        self.exit(handle);
        r
    }

    fn insert_inner(&self, handle: &mut ThreadHandle, key: u64) -> bool {
        let node = handle.alloc(ListNode::new(key));
        loop {
            let r = self.find(handle, key, TraversalMode::Update);
            if r.found {
                // SAFETY: never published.
                unsafe { handle.discard(node) };
                return false;
            }
            unsafe { (*node).next.store(r.curr) };
            let ok = unsafe { (*r.prev).compare_exchange(r.curr, TaggedRef::from_ptr(node)) }.is_ok();
            handle.note_cas(ok);
            if ok {
                return true;
            }
        }
    }

    /// Removes `key`; returns true iff this call performed the logical
    /// deletion. Physical unlinking is attempted once and otherwise left to
    /// a later traversal.
    pub fn remove(&self, handle: &mut ThreadHandle, key: u64) -> bool {
        self.enter(handle);
        let r = self.remove_inner(handle, key);
        self.exit(handle);
        r
    }

    fn remove_inner(&self, handle: &mut ThreadHandle, key: u64) -> bool {
        loop {
            let r = self.find(handle, key, TraversalMode::Update);
            if !r.found {
                return false;
            }
            let curr_ref = unsafe { r.curr.deref() };
            debug_assert!(!r.next.is_marked(Bit::Mark));
            let ok = curr_ref
                .next
                .compare_exchange(r.next, r.next.with_mark(Bit::Mark))
                .is_ok();
            handle.note_cas(ok);
            if !ok {
                continue;
            }
            let unlinked = unsafe { (*r.prev).compare_exchange(r.curr, r.next) }.is_ok();
            handle.note_cas(unlinked);
            if unlinked {
                unsafe { handle.retire(r.curr.as_ptr()) };
            }
            return true;
        }
    }

    /// Membership test. In the Harris variant this is read-only (no CAS);
    /// the Harris-Michael variant has no read-only traversal and may unlink
    /// marked nodes on the way.
    pub fn contains(&self, handle: &mut ThreadHandle, key: u64) -> bool {
        self.enter(handle);
        let r = self.find(handle, key, TraversalMode::Search);
        self.exit(handle);
        r.found
    }

    /// Marks `key` as logically deleted without attempting to unlink it;
    /// builds deleted chains for diagnostics and benchmarks.
    #[doc(hidden)]
    pub fn mark_for_removal(&self, handle: &mut ThreadHandle, key: u64) -> bool {
        self.enter(handle);
        let r = loop {
            let r = self.find_harris(handle, key, TraversalMode::Search);
            if !r.found {
                break false;
            }
            let curr_ref = unsafe { r.curr.deref() };
            if r.next.is_marked(Bit::Mark) {
                break false; // already deleted
            }
            if curr_ref
                .next
                .compare_exchange(r.next, r.next.with_mark(Bit::Mark))
                .is_ok()
            {
                break true;
            }
        };
        self.exit(handle);
        r
    }

    /// Opens an operation and parks reservations on the first few nodes,
    /// then returns with the operation still active. Models a reader that
    /// stalls mid-traversal; pair with [`end_stalled_read`](Self::end_stalled_read).
    pub fn begin_stalled_read(&self, handle: &mut ThreadHandle) {
        self.enter(handle);
        let mut v = handle.protect(&self.head, 0);
        let mut slot = 1;
        while !v.is_null() && slot <= HP_UNSAFE {
            let node = unsafe { v.strip_marks().deref() };
            v = handle.protect(&node.next, slot);
            slot += 1;
        }
    }

    pub fn end_stalled_read(&self, handle: &mut ThreadHandle) {
        self.exit(handle);
    }

    /// Keys of all unmarked nodes. Requires quiescence, which `&mut self`
    /// enforces.
    pub fn collect(&mut self) -> Vec<u64> {
        let mut out = Vec::new();
        let mut node = self.head.load();
        while !node.is_null() {
            let r = unsafe { node.deref() };
            let next = r.next.load();
            if !next.is_marked(Bit::Mark) {
                out.push(r.key());
            }
            node = next.strip_marks();
        }
        out
    }

    /// Structural invariant check after quiesce: strictly increasing keys
    /// along the physical list and no canary values.
    pub fn check_shape(&mut self) -> Result<(), String> {
        let mut last: Option<u64> = None;
        let mut node = self.head.load();
        let mut idx = 0usize;
        while !node.is_null() {
            let r = unsafe { node.deref() };
            let k = r.key();
            if k == CANARY {
                return Err(format!("canary key at position {idx}"));
            }
            if let Some(prev) = last {
                if k <= prev {
                    return Err(format!("keys not strictly increasing at position {idx}: {prev} then {k}"));
                }
            }
            last = Some(k);
            node = r.next.load().strip_marks();
            idx += 1;
        }
        Ok(())
    }
}

impl Drop for HarrisList {
    fn drop(&mut self) {
        // Quiesced teardown: every remaining node, marked or not, goes
        // through the domain so allocation accounting balances.
        let shared = self.domain.shared().clone();
        let mut node = self.head.load().strip_marks();
        while !node.is_null() {
            let p = node.as_ptr();
            let next = unsafe { (*p).next.load() }.strip_marks();
            unsafe { shared.retire_orphan(p) };
            node = next;
        }
    }
}
