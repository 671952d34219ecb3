//! Store geometry and protocol knobs.

use crate::error::{Error, Result};

/// Static configuration shared by every actor of one simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub num_mns: usize,
    /// Replication factor for regions, objects and index slots.
    pub r: usize,
    pub region_size: u64,
    pub block_size: u64,
    /// Data regions placed on the ring (the metadata region is extra).
    pub num_regions: u32,
    /// Object sizes in bytes, strictly increasing.
    pub size_classes: Vec<u32>,
    pub index_capacity: u32,
    pub slots_per_key: u32,
    pub cache_capacity: usize,
    pub cache_threshold: f64,
    pub reclaim_interval_ticks: u64,
    pub lease_ticks: u64,
    pub max_spin: u64,
    pub hash_seed: u64,
    pub vnodes: u32,
    pub max_clients: u32,
    /// Embed log entries in objects. Disabled only for RTT control runs.
    pub logging: bool,
    /// Keep at least this many free objects per class before each allocation.
    pub refill_watermark: usize,
}

impl Default for Config {
    fn default() -> Self {
        let block_size = 4096;
        Config {
            num_mns: 3,
            r: 3,
            region_size: 256 * 1024,
            block_size,
            num_regions: 16,
            size_classes: default_size_classes(block_size),
            index_capacity: 256,
            slots_per_key: 8,
            cache_capacity: 1024,
            cache_threshold: 0.5,
            reclaim_interval_ticks: 2000,
            lease_ticks: 10,
            max_spin: 10_000,
            hash_seed: 0x5eed,
            vnodes: 16,
            max_clients: 64,
            logging: true,
            refill_watermark: 4,
        }
    }
}

/// Powers of two from 64 B up to the largest object that fits in a block
/// after its free bitmap.
pub fn default_size_classes(block_size: u64) -> Vec<u32> {
    let usable = block_size - bitmap_bytes(block_size, 64);
    let mut out = Vec::new();
    let mut c = 64u64;
    while c <= usable {
        out.push(c as u32);
        c *= 2;
    }
    out
}

/// Bytes reserved ahead of each block for its free bitmap, rounded to 64.
pub fn bitmap_bytes(block_size: u64, min_class: u64) -> u64 {
    let objects = block_size / min_class.max(1);
    let words = objects.div_ceil(64).max(1);
    (words * 8).div_ceil(64) * 64
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.r == 0 {
            return bad("r must be >= 1");
        }
        if self.num_mns < self.r {
            return bad("num_mns must be >= r");
        }
        if self.num_mns > 255 {
            return bad("at most 255 memory nodes");
        }
        if self.block_size == 0 || !self.region_size.is_multiple_of(self.block_size) {
            return bad("region_size must be a multiple of block_size");
        }
        if self.size_classes.is_empty() {
            return bad("size_classes must not be empty");
        }
        if self.size_classes.windows(2).any(|w| w[0] >= w[1]) {
            return bad("size_classes must be strictly increasing");
        }
        if u64::from(self.size_classes[0]) < crate::oplog::MIN_OBJECT {
            return bad("smallest size class cannot hold header and log entry");
        }
        let usable = self.block_size - self.bitmap_bytes();
        if u64::from(*self.size_classes.last().unwrap()) > usable {
            return bad("largest size class does not fit in a block");
        }
        if self.size_classes.len() > 127 {
            return bad("at most 127 size classes");
        }
        if self.index_capacity == 0 || self.slots_per_key == 0 {
            return bad("index geometry must be non-empty");
        }
        if !(0.0..=1.0).contains(&self.cache_threshold) {
            return bad("cache_threshold must lie in [0, 1]");
        }
        if self.num_regions == 0 {
            return bad("num_regions must be >= 1");
        }
        Ok(())
    }

    pub fn bitmap_bytes(&self) -> u64 {
        bitmap_bytes(self.block_size, u64::from(self.size_classes[0]))
    }

    /// Smallest class index that fits `size` bytes.
    pub fn class_for(&self, size: usize) -> Result<u8> {
        self.size_classes
            .iter()
            .position(|&c| c as usize >= size)
            .map(|i| i as u8)
            .ok_or(Error::TooLarge { size, max: *self.size_classes.last().unwrap() as usize })
    }

    pub fn class_size(&self, class: u8) -> u64 {
        u64::from(self.size_classes[class as usize])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_classes_fit_block() {
        let c = Config::default();
        c.validate().unwrap();
        assert_eq!(c.size_classes, vec![64, 128, 256, 512, 1024, 2048]);
        assert_eq!(c.bitmap_bytes(), 64);
    }

    #[test]
    fn class_selection() {
        let c = Config::default();
        assert_eq!(c.class_for(100).unwrap(), 1);
        assert_eq!(c.class_for(64).unwrap(), 0);
        assert!(matches!(c.class_for(5000), Err(Error::TooLarge { .. })));
    }

    #[test]
    fn rejects_bad_geometry() {
        let c = Config { num_mns: 2, r: 3, ..Config::default() };
        assert!(c.validate().is_err());
        let c = Config { size_classes: vec![128, 64], ..Config::default() };
        assert!(c.validate().is_err());
    }
}
