//! Lock-free sets with safe optimistic traversals over interchangeable
//! memory reclamation schemes.
//!
//! The crate provides three reclamation backends behind one interface —
//! hazard pointers, epoch-based reclamation and interval-based reclamation
//! (plus a leaking baseline) — and three data structures built on them:
//!
//! * [`HarrisList`] — a sorted lock-free linked-list set, in both the
//!   original chain-unlinking form and the Harris-Michael
//!   unlink-on-encounter form,
//! * [`NmTree`] — a lock-free external binary search tree with flag/tag
//!   edge marking and one-CAS chain removal,
//! * [`HashMapSet`] — a fixed array of list buckets.
//!
//! Traversals that skip over logically deleted nodes are normally unsound
//! under hazard-pointer-style schemes: the first deleted node is protected,
//! but nodes behind it can be reclaimed mid-traversal. The list and tree
//! here make such traversals safe by holding the last safe node and the
//! first unsafe node in dedicated hazard slots and re-validating, at every
//! step through a deleted region, that the last safe node still points at
//! the first unsafe one; any failure restarts the traversal from the root.
//!
//! # Example
//!
//! ```
//! use scot::{Domain, HarrisList, Scheme};
//!
//! let domain = Domain::new(Scheme::Hp, 4, 5).unwrap();
//! let list = HarrisList::new(&domain);
//! let mut handle = domain.register().unwrap();
//! assert!(list.insert(&mut handle, 10));
//! assert!(list.contains(&mut handle, 10));
//! assert!(list.remove(&mut handle, 10));
//! assert!(!list.contains(&mut handle, 10));
//! ```

mod hashmap;
#[cfg(test)]
pub(crate) mod interleave;
mod list;
#[cfg(test)]
mod small_model;
mod smr;
mod tagged;
#[cfg(test)]
pub(crate) mod test_util;
mod tree;

pub use hashmap::{HashMapSet, HashMapOptions};
pub use list::{HarrisList, ListOptions, ListVariant};
pub use smr::{
    Domain, DomainConfig, NodeHeader, OpCounters, Scheme, SmrError, SmrNode, SmrStats,
    ThreadHandle, CANARY, MAX_KEY,
};
pub use tagged::{AtomicCell, Bit, TaggedRef};
pub use tree::{NmTree, TreeOptions};
