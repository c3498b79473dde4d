//! Tagged node references and the atomic cell they live in.
//!
//! Lock-free lists steal one low-order bit from a node pointer to mark the
//! node as logically deleted; the external tree additionally steals a second
//! bit to tag an edge whose subtree is being removed. Both bits fit below
//! the node alignment, so the address survives round trips unchanged.

use core::fmt;
use core::marker::PhantomData;
use core::sync::atomic::{AtomicUsize, Ordering};

/// Low bit stolen from an aligned node pointer.
///
/// `Mark` (bit 0) doubles as the list's deletion mark and the tree's edge
/// flag; `Tag` (bit 1) is only used by the tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bit {
    /// Bit 0: logical-deletion mark (lists) or edge flag (tree).
    Mark,
    /// Bit 1: edge tag (tree).
    Tag,
}

impl Bit {
    #[inline]
    const fn mask(self) -> usize {
        match self {
            Bit::Mark => 0b01,
            Bit::Tag => 0b10,
        }
    }
}

const BITS_MASK: usize = 0b11;

/// A machine word holding an aligned node address plus the two stolen bits.
///
/// Null encodes as an all-zero address; a null reference may legally carry
/// mark bits as a value but must never be dereferenced.
#[repr(transparent)]
pub struct TaggedRef<T> {
    raw: usize,
    _marker: PhantomData<*mut T>,
}

impl<T> Clone for TaggedRef<T> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<T> Copy for TaggedRef<T> {}

impl<T> PartialEq for TaggedRef<T> {
    fn eq(&self, other: &Self) -> bool {
        self.raw == other.raw
    }
}
impl<T> Eq for TaggedRef<T> {}

impl<T> fmt::Debug for TaggedRef<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TaggedRef({:#x}|{:02b})", self.raw & !BITS_MASK, self.raw & BITS_MASK)
    }
}

impl<T> TaggedRef<T> {
    /// The null reference (no mark bits).
    #[inline]
    pub const fn null() -> Self {
        TaggedRef { raw: 0, _marker: PhantomData }
    }

    /// Wraps a node pointer. The pointer must be at least 4-byte aligned so
    /// the two low bits are free.
    #[inline]
    pub fn from_ptr(ptr: *mut T) -> Self {
        let raw = ptr as usize;
        debug_assert_eq!(raw & BITS_MASK, 0, "node pointer must be 4-byte aligned");
        TaggedRef { raw, _marker: PhantomData }
    }

    /// Rebuilds a reference from a raw word (address bits plus mark bits).
    #[inline]
    pub const fn from_raw(raw: usize) -> Self {
        TaggedRef { raw, _marker: PhantomData }
    }

    /// The underlying word, address and mark bits included.
    #[inline]
    pub const fn into_raw(self) -> usize {
        self.raw
    }

    /// Returns this reference with the given bit set; the address bits are
    /// unchanged and setting an already-set bit is a no-op.
    #[inline]
    pub const fn with_mark(self, bit: Bit) -> Self {
        TaggedRef { raw: self.raw | bit.mask(), _marker: PhantomData }
    }

    /// Returns this reference with both low bits cleared. Idempotent.
    #[inline]
    pub const fn strip_marks(self) -> Self {
        TaggedRef { raw: self.raw & !BITS_MASK, _marker: PhantomData }
    }

    /// True iff the requested bit is set.
    #[inline]
    pub const fn is_marked(self, bit: Bit) -> bool {
        self.raw & bit.mask() != 0
    }

    /// True iff the address bits are zero (mark bits ignored).
    #[inline]
    pub const fn is_null(self) -> bool {
        self.raw & !BITS_MASK == 0
    }

    /// The address as a pointer, mark bits stripped.
    #[inline]
    pub const fn as_ptr(self) -> *mut T {
        (self.raw & !BITS_MASK) as *mut T
    }

    /// Dereferences the address bits.
    ///
    /// # Safety
    ///
    /// The reference must be non-null and the node must not have been
    /// reclaimed; callers uphold this through the reclamation protocol.
    #[inline]
    pub unsafe fn deref<'a>(self) -> &'a T {
        &*self.as_ptr()
    }
}

/// An atomically updatable cell holding a [`TaggedRef`].
///
/// Compare-and-swap compares the full word, so a CAS whose expected value
/// differs in any mark bit fails even when the addresses agree.
#[repr(transparent)]
pub struct AtomicCell<T> {
    raw: AtomicUsize,
    _marker: PhantomData<*mut T>,
}

// The cell hands out only copyable words; the nodes behind them are managed
// by the reclamation protocol.
unsafe impl<T> Send for AtomicCell<T> {}
unsafe impl<T> Sync for AtomicCell<T> {}

impl<T> Default for AtomicCell<T> {
    fn default() -> Self {
        Self::null()
    }
}

impl<T> fmt::Debug for AtomicCell<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("AtomicCell").field(&self.load()).finish()
    }
}

impl<T> AtomicCell<T> {
    /// A cell holding null.
    pub const fn null() -> Self {
        AtomicCell { raw: AtomicUsize::new(0), _marker: PhantomData }
    }

    /// A cell holding `value`.
    pub fn new(value: TaggedRef<T>) -> Self {
        AtomicCell { raw: AtomicUsize::new(value.into_raw()), _marker: PhantomData }
    }

    /// Atomic load.
    #[inline]
    pub fn load(&self) -> TaggedRef<T> {
        #[cfg(test)]
        crate::interleave::step();
        TaggedRef::from_raw(self.raw.load(Ordering::SeqCst))
    }

    /// Atomic store.
    #[inline]
    pub fn store(&self, value: TaggedRef<T>) {
        #[cfg(test)]
        crate::interleave::step();
        self.raw.store(value.into_raw(), Ordering::SeqCst);
    }

    /// Full-word compare-and-swap; returns the witnessed value on failure.
    #[inline]
    pub fn compare_exchange(
        &self,
        expected: TaggedRef<T>,
        new: TaggedRef<T>,
    ) -> Result<TaggedRef<T>, TaggedRef<T>> {
        #[cfg(test)]
        crate::interleave::step();
        self.raw
            .compare_exchange(expected.into_raw(), new.into_raw(), Ordering::SeqCst, Ordering::SeqCst)
            .map(TaggedRef::from_raw)
            .map_err(TaggedRef::from_raw)
    }
}
