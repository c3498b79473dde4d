//! Lock-free external binary search tree with flag/tag edge marking.
//!
//! Internal nodes route by key; all members live in leaves. A deletion
//! first *flags* the edge to the doomed leaf, then *tags* the sibling edge,
//! and finally swings the deepest untagged ancestor edge down to the
//! surviving node — one CAS that can eliminate a whole chain of tagged
//! edges at once. Concurrent operations that trip over a flagged or tagged
//! edge help complete the deletion before retrying.
//!
//! Traversals descend optimistically, straight through flagged and tagged
//! edges. Under hazard-pointer-style reclamation that is only sound with
//! revalidation: after reserving the next node, if the traversal has
//! crossed a flagged or tagged edge since its last clean anchor, it
//! re-reads the ancestor's child cell and restarts unless it still holds
//! the successor with unchanged mark bits (a tag appearing on that edge
//! must also fail the check). The five reservation slots already needed for
//! the seek window — current, leaf, parent, successor, ancestor — make this
//! possible without extra slots.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::smr::{Domain, NodeHeader, SmrNode, ThreadHandle, CANARY, MAX_KEY};
use crate::tagged::{AtomicCell, Bit, TaggedRef};

/// Edge flag: the target leaf is being deleted.
const FLAG: Bit = Bit::Mark;
/// Edge tag: the edge is frozen as part of a chain removal.
const TAG: Bit = Bit::Tag;

/// Hazard slot roles during a seek, lowest index deepest.
const SLOT_CURRENT: usize = 0;
const SLOT_LEAF: usize = 1;
const SLOT_PARENT: usize = 2;
const SLOT_SUCCESSOR: usize = 3;
const SLOT_ANCESTOR: usize = 4;

/// Key sentinels above every permitted key; the skeleton nodes carrying
/// them are never deleted.
const INF_0: u64 = u64::MAX - 2;
const INF_1: u64 = u64::MAX - 1;
const INF_2: u64 = u64::MAX;

/// Construction options.
#[derive(Debug, Clone)]
pub struct TreeOptions {
    /// Ancestor revalidation while crossing flagged/tagged edges; disabling
    /// it (tests only) reproduces the unsafe optimistic traversal.
    pub scot_validation: bool,
    /// Yield to the scheduler when crossing marked edges; widens race
    /// windows for stress runs.
    pub stress_yield: bool,
}

impl Default for TreeOptions {
    fn default() -> Self {
        TreeOptions { scot_validation: true, stress_yield: false }
    }
}

/// Tree node; leaves are the nodes with two null children, and a node's
/// role never changes after construction.
pub struct TreeNode {
    header: NodeHeader,
    key: AtomicU64,
    left: AtomicCell<TreeNode>,
    right: AtomicCell<TreeNode>,
}

impl TreeNode {
    fn leaf(key: u64) -> Self {
        TreeNode {
            header: NodeHeader::new(),
            key: AtomicU64::new(key),
            left: AtomicCell::null(),
            right: AtomicCell::null(),
        }
    }

    fn internal(key: u64, left: TaggedRef<TreeNode>, right: TaggedRef<TreeNode>) -> Self {
        TreeNode {
            header: NodeHeader::new(),
            key: AtomicU64::new(key),
            left: AtomicCell::new(left),
            right: AtomicCell::new(right),
        }
    }

    #[inline]
    fn key(&self) -> u64 {
        self.key.load(Ordering::Relaxed)
    }

    /// Child cell on the search path for `key`.
    #[inline]
    fn child_for(&self, key: u64) -> &AtomicCell<TreeNode> {
        if key < self.key() {
            &self.left
        } else {
            &self.right
        }
    }

    #[inline]
    fn sibling_for(&self, key: u64) -> &AtomicCell<TreeNode> {
        if key < self.key() {
            &self.right
        } else {
            &self.left
        }
    }
}

unsafe impl SmrNode for TreeNode {
    fn header(&self) -> &NodeHeader {
        &self.header
    }
    fn poison(&self) -> bool {
        let already = self.key.swap(CANARY, Ordering::Relaxed) == CANARY;
        self.left.store(TaggedRef::from_raw(CANARY as usize));
        self.right.store(TaggedRef::from_raw(CANARY as usize));
        self.header.poison();
        already
    }
}

/// Seek window: the two bottom nodes of the search path plus the deepest
/// node reached through an untagged edge (`successor`) and its parent
/// (`ancestor`); `anc_cell` names the exact edge cell between them for the
/// cleanup swing.
pub(crate) struct SeekRecord {
    ancestor: *mut TreeNode,
    successor: *mut TreeNode,
    parent: *mut TreeNode,
    pub(crate) leaf: *mut TreeNode,
    anc_cell: *const AtomicCell<TreeNode>,
}

#[derive(PartialEq, Eq)]
enum DeleteMode {
    Injection,
    Cleanup,
}

/// Lock-free external binary search tree over 64-bit keys.
pub struct NmTree {
    /// Sentinel skeleton: root (key above all), its left child (second
    /// sentinel) and three sentinel leaves. None of them can ever be
    /// flagged, tagged or unlinked, so seeks always restart safely here.
    root: *mut TreeNode,
    sentinel: *mut TreeNode,
    domain: Domain,
    scot: bool,
    stress_yield: bool,
    poison: bool,
}

unsafe impl Send for NmTree {}
unsafe impl Sync for NmTree {}

impl NmTree {
    pub fn new(domain: &Domain) -> Self {
        Self::with_options(domain, TreeOptions::default())
    }

    pub fn with_options(domain: &Domain, opts: TreeOptions) -> Self {
        let shared = domain.shared();
        let leaf_inf0 = shared.alloc_raw(TreeNode::leaf(INF_0));
        let leaf_inf1 = shared.alloc_raw(TreeNode::leaf(INF_1));
        let leaf_inf2 = shared.alloc_raw(TreeNode::leaf(INF_2));
        let sentinel = shared.alloc_raw(TreeNode::internal(
            INF_1,
            TaggedRef::from_ptr(leaf_inf0),
            TaggedRef::from_ptr(leaf_inf1),
        ));
        let root = shared.alloc_raw(TreeNode::internal(
            INF_2,
            TaggedRef::from_ptr(sentinel),
            TaggedRef::from_ptr(leaf_inf2),
        ));
        NmTree {
            root,
            sentinel,
            domain: domain.clone(),
            scot: opts.scot_validation,
            stress_yield: opts.stress_yield,
            poison: domain.poison_enabled(),
        }
    }

    fn enter(&self, handle: &mut ThreadHandle) {
        debug_assert!(self.domain.same_domain(handle), "handle from a different domain");
        handle.begin_op();
    }

    fn exit(&self, handle: &mut ThreadHandle) {
        handle.end_op();
    }

    #[inline]
    fn guard_word(&self, handle: &ThreadHandle, word: TaggedRef<TreeNode>, op: &'static str) {
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

    /// Descends to the leaf on `key`'s search path, maintaining the seek
    /// window. Restarts from the root whenever the revalidation fails.
    fn seek(&self, handle: &mut ThreadHandle, key: u64) -> SeekRecord {
        'restart: loop {
            let root = unsafe { &*self.root };
            let sent = unsafe { &*self.sentinel };

            // Record anchor per the base algorithm. Seed the window slots
            // with the immortal anchors so that the first anchor duplicate
            // of this attempt cannot re-publish a stale reservation from a
            // previous attempt within the same operation.
            let mut ancestor = self.root;
            let mut successor = self.sentinel;
            let mut parent = self.sentinel;
            let mut anc_cell: *const AtomicCell<TreeNode> = &root.left;
            handle.pin_slot(self.sentinel, SLOT_PARENT);
            handle.pin_slot(self.sentinel, SLOT_SUCCESSOR);
            handle.pin_slot(self.root, SLOT_ANCESTOR);

            // Edge into `leaf`, used both for the lagging record update and
            // for the eager validation anchor below.
            let mut edge_cell: *const AtomicCell<TreeNode> = &sent.left;
            let mut edge_word = handle.protect(&sent.left, SLOT_LEAF);
            self.guard_word(handle, edge_word, "seek");
            let mut leaf = edge_word.strip_marks().as_ptr();

            // Validation anchor: the deepest untagged edge seen so far,
            // including the edge into `leaf` itself. Unlike the record
            // anchor it may briefly sit one level deeper; the node owning
            // the cell is always reservation-protected (parent or ancestor).
            let mut v_cell = anc_cell;
            let mut v_word = TaggedRef::from_ptr(self.sentinel);
            let mut danger = false;

            loop {
                if !edge_word.is_marked(TAG) {
                    v_cell = edge_cell;
                    v_word = edge_word;
                    if !edge_word.is_marked(FLAG) {
                        // Clean edge: fresh safe anchor.
                        danger = false;
                    }
                }

                let leaf_ref = unsafe { &*leaf };
                let leaf_key = leaf_ref.key();
                self.guard_key(handle, leaf_key, "seek");
                let cell = leaf_ref.child_for(key);
                let cur_word = handle.protect(cell, SLOT_CURRENT);
                self.guard_word(handle, cur_word, "seek");

                if cur_word.is_marked(FLAG) || cur_word.is_marked(TAG) {
                    danger = true;
                    if self.stress_yield {
                        std::thread::yield_now();
                    }
                }
                if self.scot && danger {
                    // The reservation for the next node is already visible;
                    // if the deepest untagged edge is intact (same address,
                    // same mark bits), no chain containing that node can
                    // have been unlinked yet.
                    if unsafe { (*v_cell).load() } != v_word {
                        handle.note_validation_restart();
                        continue 'restart;
                    }
                }

                if cur_word.strip_marks().is_null() {
                    break;
                }

                // `leaf` is internal: advance the record anchor exactly as
                // the base algorithm does, one edge behind the descent.
                if !edge_word.is_marked(TAG) {
                    ancestor = parent;
                    successor = leaf;
                    anc_cell = edge_cell;
                    handle.duplicate(SLOT_PARENT, SLOT_ANCESTOR);
                    handle.duplicate(SLOT_LEAF, SLOT_SUCCESSOR);
                }
                parent = leaf;
                handle.duplicate(SLOT_LEAF, SLOT_PARENT);
                leaf = cur_word.strip_marks().as_ptr();
                edge_cell = cell;
                edge_word = cur_word;
                handle.duplicate(SLOT_CURRENT, SLOT_LEAF);
            }

            return SeekRecord { ancestor, successor, parent, leaf, anc_cell };
        }
    }

    /// Completes the deletion pending at `record.parent`: tags the sibling
    /// edge, then swings the ancestor edge from the successor down to the
    /// surviving node. Returns true iff this call's swing succeeded, in
    /// which case it also retires the whole eliminated chain.
    fn cleanup(&self, handle: &mut ThreadHandle, key: u64, record: &SeekRecord) -> bool {
        let ancestor = unsafe { &*record.ancestor };
        let parent = unsafe { &*record.parent };

        let succ_cell = ancestor.child_for(key);
        let mut sibling_cell = parent.sibling_for(key);
        let child_word = parent.child_for(key).load();
        if !child_word.is_marked(FLAG) {
            // The pending deletion flagged the other side; the search-path
            // child is the survivor to tag.
            sibling_cell = parent.child_for(key);
        }

        // Freeze the sibling edge (bit test-and-set).
        loop {
            let w = sibling_cell.load();
            if w.is_marked(TAG) {
                break;
            }
            let ok = sibling_cell.compare_exchange(w, w.with_mark(TAG)).is_ok();
            handle.note_cas(ok);
            if ok {
                break;
            }
        }

        let sibling_word = sibling_cell.load();
        let survivor = sibling_word.strip_marks();
        // Preserve a pending flag on the survivor's edge, drop the tag.
        let mut new_word = survivor;
        if sibling_word.is_marked(FLAG) {
            new_word = new_word.with_mark(FLAG);
        }
        let expected = TaggedRef::from_ptr(record.successor);
        let swung = unsafe { &*record.anc_cell }
            .compare_exchange(expected, new_word)
            .is_ok();
        handle.note_cas(swung);
        debug_assert!(record.anc_cell == succ_cell as *const _ || record.ancestor == self.root);
        if swung {
            // The whole chain from successor down to parent, plus the
            // flagged leaf hanging off each chain node, is now unreachable;
            // the swinging thread is the unique retirer.
            unsafe { self.retire_chain(handle, record.successor, survivor.as_ptr()) };
        }
        swung
    }

    /// Retires the eliminated chain: every node from `successor` along
    /// tagged edges down to (excluding) `survivor`, plus the flagged leaf
    /// on each chain node's other side.
    unsafe fn retire_chain(
        &self,
        handle: &mut ThreadHandle,
        successor: *mut TreeNode,
        survivor: *mut TreeNode,
    ) {
        let mut node = successor;
        loop {
            let left = (*node).left.load();
            let right = (*node).right.load();
            let (follow, off) = if left.is_marked(TAG) { (left, right) } else { (right, left) };
            debug_assert!(follow.is_marked(TAG), "chain node without a tagged edge");
            debug_assert!(off.is_marked(FLAG), "off-chain edge must hold a flagged leaf");
            handle.retire(off.as_ptr());
            handle.retire(node);
            let next = follow.as_ptr();
            if next == survivor {
                return;
            }
            node = next;
        }
    }

    /// Inserts `key`; returns false if a leaf with the key exists.
    pub fn insert(&self, handle: &mut ThreadHandle, key: u64) -> bool {
        assert!(key <= MAX_KEY, "key {key} above MAX_KEY");
        self.enter(handle);
        let r = self.insert_inner(handle, key);
        self.exit(handle);
        r
    }

    fn insert_inner(&self, handle: &mut ThreadHandle, key: u64) -> bool {
        let mut new_leaf: *mut TreeNode = std::ptr::null_mut();
        let mut new_internal: *mut TreeNode = std::ptr::null_mut();
        loop {
            let record = self.seek(handle, key);
            let leaf_ref = unsafe { &*record.leaf };
            let leaf_key = leaf_ref.key();
            self.guard_key(handle, leaf_key, "insert");
            if leaf_key == key {
                if !new_leaf.is_null() {
                    // SAFETY: never published.
                    unsafe {
                        handle.discard(new_leaf);
                        handle.discard(new_internal);
                    }
                }
                return false;
            }

            if new_leaf.is_null() {
                new_leaf = handle.alloc(TreeNode::leaf(key));
                new_internal = handle.alloc(TreeNode::internal(
                    0,
                    TaggedRef::null(),
                    TaggedRef::null(),
                ));
            }
            // Route the smaller key left; the internal key is the maximum.
            let (left, right) = if key < leaf_key {
                (new_leaf, record.leaf)
            } else {
                (record.leaf, new_leaf)
            };
            unsafe {
                (*new_internal).key.store(key.max(leaf_key), Ordering::Relaxed);
                (*new_internal).left.store(TaggedRef::from_ptr(left));
                (*new_internal).right.store(TaggedRef::from_ptr(right));
            }

            let parent_ref = unsafe { &*record.parent };
            let cell = parent_ref.child_for(key);
            let expected = TaggedRef::from_ptr(record.leaf);
            let ok = cell
                .compare_exchange(expected, TaggedRef::from_ptr(new_internal))
                .is_ok();
            handle.note_cas(ok);
            if ok {
                return true;
            }
            // Help an in-flight deletion of this leaf before retrying.
            let w = cell.load();
            if w.as_ptr() == record.leaf && (w.is_marked(FLAG) || w.is_marked(TAG)) {
                self.cleanup(handle, key, &record);
            }
        }
    }

    /// Removes `key`; returns true iff this call flagged the leaf's edge
    /// (the injection point). The physical chain removal may be completed
    /// by any helping thread, but this call does not return until the leaf
    /// is unlinked.
    pub fn remove(&self, handle: &mut ThreadHandle, key: u64) -> bool {
        assert!(key <= MAX_KEY, "key {key} above MAX_KEY");
        self.enter(handle);
        let r = self.remove_inner(handle, key);
        self.exit(handle);
        r
    }

    fn remove_inner(&self, handle: &mut ThreadHandle, key: u64) -> bool {
        let mut mode = DeleteMode::Injection;
        let mut target: *mut TreeNode = std::ptr::null_mut();
        loop {
            let record = self.seek(handle, key);
            match mode {
                DeleteMode::Injection => {
                    let leaf_ref = unsafe { &*record.leaf };
                    let leaf_key = leaf_ref.key();
                    self.guard_key(handle, leaf_key, "remove");
                    if leaf_key != key {
                        return false;
                    }
                    let parent_ref = unsafe { &*record.parent };
                    let cell = parent_ref.child_for(key);
                    let expected = TaggedRef::from_ptr(record.leaf);
                    let ok = cell
                        .compare_exchange(expected, expected.with_mark(FLAG))
                        .is_ok();
                    handle.note_cas(ok);
                    if ok {
                        mode = DeleteMode::Cleanup;
                        target = record.leaf;
                        if self.cleanup(handle, key, &record) {
                            return true;
                        }
                    } else {
                        let w = cell.load();
                        if w.as_ptr() == record.leaf
                            && (w.is_marked(FLAG) || w.is_marked(TAG))
                        {
                            self.cleanup(handle, key, &record);
                        }
                    }
                }
                DeleteMode::Cleanup => {
                    if record.leaf != target {
                        // A helper finished unlinking our leaf.
                        return true;
                    }
                    // Same address but no flag on its edge means the node
                    // was reclaimed and recycled as a fresh leaf; our
                    // deletion is long done.
                    let parent_ref = unsafe { &*record.parent };
                    let w = parent_ref.child_for(key).load();
                    if !(w.as_ptr() == record.leaf && w.is_marked(FLAG)) {
                        return true;
                    }
                    if self.cleanup(handle, key, &record) {
                        return true;
                    }
                }
            }
        }
    }

    /// Membership test: read-only seek plus a key comparison at the leaf.
    pub fn contains(&self, handle: &mut ThreadHandle, key: u64) -> bool {
        self.enter(handle);
        let record = self.seek(handle, key);
        let leaf_key = unsafe { &*record.leaf }.key();
        self.guard_key(handle, leaf_key, "search");
        self.exit(handle);
        leaf_key == key
    }

    /// Flags `key`'s leaf edge and tags the sibling edge, then abandons the
    /// deletion before the swing; builds tagged chains for tests.
    #[cfg(test)]
    pub(crate) fn inject_and_tag(&self, handle: &mut ThreadHandle, key: u64) -> bool {
        self.enter(handle);
        let ok = loop {
            let record = self.seek(handle, key);
            let leaf_ref = unsafe { &*record.leaf };
            if leaf_ref.key() != key {
                break false;
            }
            let parent_ref = unsafe { &*record.parent };
            let cell = parent_ref.child_for(key);
            let expected = TaggedRef::from_ptr(record.leaf);
            if cell.compare_exchange(expected, expected.with_mark(FLAG)).is_ok() {
                let sibling = parent_ref.sibling_for(key);
                loop {
                    let w = sibling.load();
                    if w.is_marked(TAG) || sibling.compare_exchange(w, w.with_mark(TAG)).is_ok() {
                        break;
                    }
                }
                break true;
            }
        };
        self.exit(handle);
        ok
    }

    #[cfg(test)]
    pub(crate) fn seek_for_test(&self, handle: &mut ThreadHandle, key: u64) -> SeekRecord {
        self.seek(handle, key)
    }

    #[cfg(test)]
    pub(crate) fn cleanup_for_test(
        &self,
        handle: &mut ThreadHandle,
        key: u64,
        record: &SeekRecord,
    ) -> bool {
        self.cleanup(handle, key, record)
    }

    /// Opens an operation and parks reservations along the leftmost path,
    /// then returns with the operation still active; models a reader that
    /// stalls mid-traversal.
    pub fn begin_stalled_read(&self, handle: &mut ThreadHandle) {
        self.enter(handle);
        let mut cell: *const AtomicCell<TreeNode> = unsafe { &(*self.sentinel).left };
        for slot in 0..=SLOT_ANCESTOR {
            let v = unsafe { handle.protect(&*cell, slot) };
            let p = v.strip_marks();
            if p.is_null() {
                break;
            }
            cell = unsafe { &(*p.as_ptr()).left };
        }
    }

    pub fn end_stalled_read(&self, handle: &mut ThreadHandle) {
        self.exit(handle);
    }

    /// Members in ascending order; requires quiescence.
    pub fn collect(&mut self) -> Vec<u64> {
        let mut out = Vec::new();
        let mut stack = vec![self.root];
        while let Some(p) = stack.pop() {
            let node = unsafe { &*p };
            let left = node.left.load().strip_marks();
            let right = node.right.load().strip_marks();
            if left.is_null() && right.is_null() {
                let k = node.key();
                if k <= MAX_KEY {
                    out.push(k);
                }
                continue;
            }
            // Right first so the in-order leaves pop ascending.
            if !right.is_null() {
                stack.push(right.as_ptr());
            }
            if !left.is_null() {
                stack.push(left.as_ptr());
            }
        }
        out
    }

    /// Structural invariants after quiesce: external shape (every internal
    /// node has two children), no leftover flags or tags, BST routing, and
    /// strictly increasing in-order leaf keys ending in the three
    /// sentinels.
    pub fn check_shape(&mut self) -> Result<(), String> {
        let mut leaves = Vec::new();
        // (node, lower bound, upper bound) over the routing keys.
        let mut stack: Vec<(*mut TreeNode, u64, u64)> = vec![(self.root, 0, u64::MAX)];
        while let Some((p, lo, hi)) = stack.pop() {
            let node = unsafe { &*p };
            let k = node.key();
            if k == CANARY {
                return Err("canary key reachable in tree".into());
            }
            if !(lo..=hi).contains(&k) {
                return Err(format!("routing key {k} outside [{lo}, {hi}]"));
            }
            let left = node.left.load();
            let right = node.right.load();
            for w in [left, right] {
                if w.is_marked(FLAG) || w.is_marked(TAG) {
                    return Err(format!(
                        "leftover edge marks under key {k} after quiesce: {w:?}"
                    ));
                }
            }
            match (left.is_null(), right.is_null()) {
                (true, true) => leaves.push(k),
                (false, false) => {
                    stack.push((right.as_ptr(), k, hi));
                    stack.push((left.as_ptr(), lo, k.saturating_sub(1)));
                }
                _ => return Err(format!("internal node {k} with exactly one child")),
            }
        }
        if leaves.len() < 3 || leaves[leaves.len() - 3..] != [INF_0, INF_1, INF_2] {
            return Err("sentinel leaves missing or out of place".into());
        }
        for pair in leaves.windows(2) {
            if pair[0] >= pair[1] {
                return Err(format!("leaf keys not increasing: {} then {}", pair[0], pair[1]));
            }
        }
        Ok(())
    }
}

impl Drop for NmTree {
    fn drop(&mut self) {
        let shared = self.domain.shared().clone();
        let mut stack = vec![self.root];
        while let Some(p) = stack.pop() {
            let node = unsafe { &*p };
            let left = node.left.load().strip_marks();
            let right = node.right.load().strip_marks();
            if !left.is_null() {
                stack.push(left.as_ptr());
            }
            if !right.is_null() {
                stack.push(right.as_ptr());
            }
            unsafe { shared.retire_orphan(p) };
        }
    }
}
