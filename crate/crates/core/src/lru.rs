//! Byte-weighted LRU index with watermark hysteresis.
//!
//! Recency is a monotonic sequence number bumped on every access. Eviction
//! only starts once usage exceeds the high watermark and then removes the
//! least recently used entries until usage is at or below the low watermark.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Watermarks {
    pub high: f64,
    pub low: f64,
}

impl Default for Watermarks {
    fn default() -> Self {
        Watermarks { high: 0.90, low: 0.80 }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("watermarks must satisfy 0 < low < high <= 1 (got low {low}, high {high})")]
pub struct BadWatermarks {
    pub low: f64,
    pub high: f64,
}

impl Watermarks {
    pub fn new(high: f64, low: f64) -> Result<Self, BadWatermarks> {
        if 0.0 < low && low < high && high <= 1.0 {
            Ok(Watermarks { high, low })
        } else {
            Err(BadWatermarks { low, high })
        }
    }
}

// fraction * capacity as a byte count; used > mark <=> used > floor(mark)
fn mark(fraction: f64, capacity: u64) -> u64 {
    (fraction * capacity as f64 + 1e-9).floor() as u64
}

#[derive(Debug, Clone, Copy)]
struct Slot {
    size: u64,
    seq: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Admission {
    Stored,
    /// Larger than the low watermark; not retained.
    TooLarge,
}

#[derive(Debug, Clone)]
pub struct LruIndex<K> {
    slots: HashMap<K, Slot>,
    order: BTreeMap<u64, K>,
    next_seq: u64,
    used: u64,
    capacity: u64,
    high_bytes: u64,
    low_bytes: u64,
}

impl<K: Clone + Eq + Hash> LruIndex<K> {
    pub fn new(capacity: u64, marks: Watermarks) -> Self {
        LruIndex {
            slots: HashMap::new(),
            order: BTreeMap::new(),
            next_seq: 0,
            used: 0,
            capacity,
            high_bytes: mark(marks.high, capacity),
            low_bytes: mark(marks.low, capacity),
        }
    }

    pub fn used(&self) -> u64 {
        self.used
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn contains(&self, key: &K) -> bool {
        self.slots.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &K> {
        self.slots.keys()
    }

    /// Largest object the index will retain.
    pub fn max_object(&self) -> u64 {
        self.low_bytes
    }

    pub fn over_high_watermark(&self) -> bool {
        self.used > self.high_bytes
    }

    fn bump(&mut self) -> u64 {
        self.next_seq += 1;
        self.next_seq
    }

    /// Marks `key` as most recently used. Returns false if absent.
    pub fn touch(&mut self, key: &K) -> bool {
        let seq = self.bump();
        match self.slots.get_mut(key) {
            Some(slot) => {
                self.order.remove(&slot.seq);
                slot.seq = seq;
                self.order.insert(seq, key.clone());
                true
            }
            None => false,
        }
    }

    /// Adds (or replaces) `key` as most recently used. Does not evict.
    pub fn insert(&mut self, key: K, size: u64) -> Admission {
        if size > self.low_bytes {
            return Admission::TooLarge;
        }
        self.remove(&key);
        let seq = self.bump();
        self.order.insert(seq, key.clone());
        self.slots.insert(key, Slot { size, seq });
        self.used += size;
        Admission::Stored
    }

    pub fn remove(&mut self, key: &K) -> Option<u64> {
        let slot = self.slots.remove(key)?;
        self.order.remove(&slot.seq);
        self.used -= slot.size;
        Some(slot.size)
    }

    /// Evicts least recently used entries not `pinned` once usage exceeds the
    /// high watermark, stopping at the low watermark.
    pub fn evict_to_watermark(&mut self, pinned: impl Fn(&K) -> bool) -> Vec<K> {
        let mut evicted = Vec::new();
        if !self.over_high_watermark() {
            return evicted;
        }
        let candidates: Vec<K> = self.order.values().cloned().collect();
        for key in candidates {
            if self.used <= self.low_bytes {
                break;
            }
            if pinned(&key) {
                continue;
            }
            self.remove(&key);
            evicted.push(key);
        }
        evicted
    }

    /// Insert followed by the automatic eviction pass.
    pub fn insert_and_evict(&mut self, key: K, size: u64, pinned: impl Fn(&K) -> bool) -> (Admission, Vec<K>) {
        let admission = self.insert(key, size);
        let evicted = if admission == Admission::Stored {
            self.evict_to_watermark(pinned)
        } else {
            Vec::new()
        };
        (admission, evicted)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn never(_: &&str) -> bool {
        false
    }

    #[test]
    fn watermark_example() {
        let mut lru = LruIndex::new(100, Watermarks::default());
        assert!(lru.insert_and_evict("A", 40, never).1.is_empty());
        assert!(lru.insert_and_evict("B", 40, never).1.is_empty());
        let (_, evicted) = lru.insert_and_evict("C", 15, never);
        assert_eq!(evicted, ["A"]);
        assert_eq!(lru.used(), 55);
    }

    #[test]
    fn reaccess_protects_entry() {
        let mut lru = LruIndex::new(100, Watermarks::default());
        lru.insert("A", 40);
        lru.insert("B", 40);
        lru.touch(&"A");
        let (_, evicted) = lru.insert_and_evict("C", 15, never);
        assert_eq!(evicted, ["B"]);
    }

    #[test]
    fn below_high_watermark_no_eviction() {
        let mut lru = LruIndex::new(100, Watermarks::default());
        for (k, s) in [("A", 30), ("B", 30), ("C", 30)] {
            assert!(lru.insert_and_evict(k, s, never).1.is_empty());
        }
        assert_eq!(lru.used(), 90);
    }

    #[test]
    fn pinned_entries_survive() {
        let mut lru = LruIndex::new(100, Watermarks::default());
        lru.insert("A", 40);
        lru.insert("B", 40);
        let (_, evicted) = lru.insert_and_evict("C", 15, |k| *k == "A");
        assert_eq!(evicted, ["B"]);
        assert!(lru.contains(&"A"));
    }

    #[test]
    fn oversized_objects_are_refused() {
        let mut lru = LruIndex::new(100, Watermarks::default());
        assert_eq!(lru.insert("big", 81), Admission::TooLarge);
        assert_eq!(lru.insert("ok", 80), Admission::Stored);
        assert_eq!(lru.used(), 80);
    }

    #[test]
    fn replace_updates_size() {
        let mut lru = LruIndex::new(100, Watermarks::default());
        lru.insert("A", 10);
        lru.insert("A", 20);
        assert_eq!((lru.used(), lru.len()), (20, 1));
        assert_eq!(lru.remove(&"A"), Some(20));
        assert_eq!(lru.remove(&"A"), None);
        assert!(lru.is_empty());
    }

    #[test]
    fn watermark_validation() {
        assert!(Watermarks::new(0.9, 0.8).is_ok());
        assert!(Watermarks::new(1.0, 0.5).is_ok());
        assert!(Watermarks::new(0.8, 0.8).is_err());
        assert!(Watermarks::new(1.1, 0.5).is_err());
        assert!(Watermarks::new(0.9, 0.0).is_err());
    }
}
