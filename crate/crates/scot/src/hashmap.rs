//! Fixed-bucket lock-free hash set: an array of list buckets sharing one
//! reclamation domain.

use crate::list::{HarrisList, ListOptions};
use crate::smr::{Domain, SmrError, ThreadHandle};

/// 64-bit avalanche mixer (splitmix64 finalizer).
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Construction options.
#[derive(Debug, Clone)]
pub struct HashMapOptions {
    /// Number of buckets; must be a power of two.
    pub buckets: usize,
    /// Options applied to every bucket list.
    pub list: ListOptions,
    /// Bucket-selection hash, fixed at construction. `None` uses a 64-bit
    /// avalanche mixer; tests may substitute the identity to pin keys to
    /// buckets.
    pub hash: Option<fn(u64) -> u64>,
}

impl Default for HashMapOptions {
    fn default() -> Self {
        HashMapOptions { buckets: 64, list: ListOptions::default(), hash: None }
    }
}

/// Hash set over 64-bit keys with set semantics per bucket.
pub struct HashMapSet {
    buckets: Box<[HarrisList]>,
    mask: u64,
    hash: fn(u64) -> u64,
}

impl HashMapSet {
    /// `bucket_count` empty bucket lists sharing `domain`.
    pub fn new(domain: &Domain, bucket_count: usize) -> Result<Self, SmrError> {
        Self::with_options(domain, HashMapOptions { buckets: bucket_count, ..Default::default() })
    }

    pub fn with_options(domain: &Domain, opts: HashMapOptions) -> Result<Self, SmrError> {
        if opts.buckets == 0 || !opts.buckets.is_power_of_two() {
            return Err(SmrError::InvalidConfig("bucket count must be a power of two"));
        }
        let buckets = (0..opts.buckets)
            .map(|_| HarrisList::with_options(domain, opts.list.clone()))
            .collect();
        Ok(HashMapSet {
            buckets,
            mask: opts.buckets as u64 - 1,
            hash: opts.hash.unwrap_or(mix64),
        })
    }

    pub fn bucket_count(&self) -> usize {
        self.buckets.len()
    }

    #[inline]
    fn bucket(&self, key: u64) -> &HarrisList {
        &self.buckets[((self.hash)(key) & self.mask) as usize]
    }

    pub fn insert(&self, handle: &mut ThreadHandle, key: u64) -> bool {
        self.bucket(key).insert(handle, key)
    }

    pub fn remove(&self, handle: &mut ThreadHandle, key: u64) -> bool {
        self.bucket(key).remove(handle, key)
    }

    pub fn contains(&self, handle: &mut ThreadHandle, key: u64) -> bool {
        self.bucket(key).contains(handle, key)
    }

    /// Opens an operation with reservations parked on one bucket; see
    /// [`HarrisList::begin_stalled_read`].
    pub fn begin_stalled_read(&self, handle: &mut ThreadHandle) {
        self.buckets[0].begin_stalled_read(handle);
    }

    pub fn end_stalled_read(&self, handle: &mut ThreadHandle) {
        self.buckets[0].end_stalled_read(handle);
    }

    /// All members in unspecified order; requires quiescence.
    pub fn collect(&mut self) -> Vec<u64> {
        let mut out = Vec::new();
        for b in self.buckets.iter_mut() {
            out.extend(b.collect());
        }
        out
    }

    /// Per-bucket shape invariants plus bucket-residency: every key must
    /// hash to the bucket holding it.
    pub fn check_shape(&mut self) -> Result<(), String> {
        let mask = self.mask;
        let hash = self.hash;
        for (i, b) in self.buckets.iter_mut().enumerate() {
            b.check_shape().map_err(|e| format!("bucket {i}: {e}"))?;
            for key in b.collect() {
                let want = (hash(key) & mask) as usize;
                if want != i {
                    return Err(format!("key {key} in bucket {i}, belongs in {want}"));
                }
            }
        }
        Ok(())
    }
}
