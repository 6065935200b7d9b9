//! Watermark eviction on a 100-byte index: nothing happens until usage
//! passes 90 bytes, then the oldest entries go until usage is at most 80.
//! Touching B before D arrives leaves C as the oldest.

use osdf_fed::lru::{LruIndex, Watermarks};

pub fn run_example() -> Vec<&'static str> {
    let mut lru = LruIndex::new(100, Watermarks::default());
    let mut evicted = Vec::new();
    for (key, size) in [("A", 40), ("B", 40), ("C", 15), ("D", 40)] {
        if key == "D" {
            lru.touch(&"B");
        }
        let (_, gone) = lru.insert_and_evict(key, size, |_| false);
        println!("insert {key} ({size} B) -> used {:>3} B, evicted {gone:?}", lru.used());
        evicted.extend(gone);
    }
    evicted
}

fn main() {
    run_example();
}
