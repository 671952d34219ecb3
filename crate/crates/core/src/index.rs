//! Replicated slot table and the client-side adaptive index cache.

use std::collections::{BTreeMap, HashMap};

use crate::config::Config;
use crate::fabric::{read_u64, Geometry, RemoteAddr, Word};
use crate::hash::hash_bytes;
use crate::oplog::{decode_object, KvObject};

/// Marks a word that points at a DELETE temp object.
pub const TOMBSTONE_CLASS_BIT: u8 = 0x80;

/// A 64-bit index slot: `fp(8) | len_class(8) | ptr(48)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SlotWord {
    pub fp: u8,
    pub len_class: u8,
    pub ptr: RemoteAddr,
}

impl SlotWord {
    pub fn new(fp: u8, class: u8, ptr: RemoteAddr, tombstone: bool) -> Self {
        let len_class = class | if tombstone { TOMBSTONE_CLASS_BIT } else { 0 };
        SlotWord { fp, len_class, ptr }
    }

    pub fn encode(&self) -> Word {
        (u64::from(self.fp) << 56) | (u64::from(self.len_class) << 48) | self.ptr.raw()
    }

    /// `None` for the empty word.
    pub fn decode(w: Word) -> Option<Self> {
        if w == 0 {
            return None;
        }
        Some(SlotWord { fp: (w >> 56) as u8, len_class: (w >> 48) as u8, ptr: RemoteAddr::from_raw(w) })
    }

    pub fn class(&self) -> u8 {
        self.len_class & !TOMBSTONE_CLASS_BIT
    }

    pub fn is_tombstone(&self) -> bool {
        self.len_class & TOMBSTONE_CLASS_BIT != 0
    }
}

pub fn is_tombstone_word(w: Word) -> bool {
    SlotWord::decode(w).is_some_and(|s| s.is_tombstone())
}

/// Where a key lives in the table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeyLocation {
    pub hash: u64,
    pub group: u32,
    pub fp: u8,
}

pub fn locate(cfg: &Config, key: &[u8]) -> KeyLocation {
    let hash = hash_bytes(cfg.hash_seed, key);
    KeyLocation { hash, group: (hash % u64::from(cfg.index_capacity)) as u32, fp: hash as u8 }
}

/// Offset of slot `pos` of `group` inside every index replica.
pub fn slot_offset(geo: &Geometry, cfg: &Config, group: u32, pos: u32) -> u64 {
    geo.index_base + (u64::from(group) * u64::from(cfg.slots_per_key) + u64::from(pos)) * 8
}

pub fn group_len(cfg: &Config) -> usize {
    cfg.slots_per_key as usize * 8
}

pub fn parse_group(bytes: &[u8]) -> Vec<Word> {
    (0..bytes.len() / 8).map(|i| read_u64(bytes, i * 8)).collect()
}

/// Positions whose fingerprint matches, skipping empty and tombstone words.
pub fn fp_candidates(words: &[Word], fp: u8) -> Vec<(u32, SlotWord)> {
    words
        .iter()
        .enumerate()
        .filter_map(|(i, w)| SlotWord::decode(*w).map(|s| (i as u32, s)))
        .filter(|(_, s)| s.fp == fp && !s.is_tombstone())
        .collect()
}

pub fn first_empty(words: &[Word]) -> Option<u32> {
    words.iter().position(|w| *w == 0).map(|p| p as u32)
}

/// Outcome of comparing a fetched object with the wanted key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ObjectMatch {
    Match(KvObject),
    /// Tombstone temp object for this key.
    Deleted,
    Mismatch,
    Corrupt,
}

pub fn match_object(image: &[u8], key: &[u8]) -> ObjectMatch {
    match decode_object(image) {
        Some(o) if !o.crc_ok => ObjectMatch::Corrupt,
        Some(o) if o.is_void() => ObjectMatch::Mismatch,
        Some(o) if o.key == key && o.is_tombstone() => ObjectMatch::Deleted,
        Some(o) if o.key == key => ObjectMatch::Match(o),
        Some(_) => ObjectMatch::Mismatch,
        None => ObjectMatch::Corrupt,
    }
}

/// Cached location of a key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheEntry {
    pub slot_offset: u64,
    pub word: Word,
    pub access: u64,
    pub invalid: u64,
    stamp: u64,
}

impl CacheEntry {
    pub fn invalid_ratio(&self) -> f64 {
        if self.access == 0 {
            0.0
        } else {
            self.invalid as f64 / self.access as f64
        }
    }

    pub fn kv_addr(&self) -> RemoteAddr {
        RemoteAddr::from_raw(self.word)
    }

    pub fn class(&self) -> u8 {
        SlotWord::decode(self.word).map_or(0, |s| s.class())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Route {
    Hit(CacheEntry),
    Bypass,
    Miss,
}

impl Route {
    pub fn tag(&self) -> &'static str {
        match self {
            Route::Hit(_) => "HIT",
            Route::Bypass => "BYPASS",
            Route::Miss => "MISS",
        }
    }
}

/// LRU index cache with per-key invalid ratios.
#[derive(Debug, Clone)]
pub struct IndexCache {
    capacity: usize,
    threshold: f64,
    entries: HashMap<Vec<u8>, CacheEntry>,
    lru: BTreeMap<u64, Vec<u8>>,
    clock: u64,
}

impl IndexCache {
    pub fn new(capacity: usize, threshold: f64) -> Self {
        IndexCache { capacity, threshold, entries: HashMap::new(), lru: BTreeMap::new(), clock: 0 }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: &[u8]) -> Option<&CacheEntry> {
        self.entries.get(key)
    }

    fn touch(&mut self, key: &[u8]) {
        self.clock += 1;
        if let Some(e) = self.entries.get_mut(key) {
            self.lru.remove(&e.stamp);
            e.stamp = self.clock;
            self.lru.insert(self.clock, key.to_vec());
        }
    }

    /// Route an access and count it. The ratio is checked before counting.
    pub fn route(&mut self, key: &[u8]) -> Route {
        let threshold = self.threshold;
        let Some(e) = self.entries.get_mut(key) else { return Route::Miss };
        let bypass = e.invalid_ratio() > threshold;
        e.access += 1;
        let r = if bypass { Route::Bypass } else { Route::Hit(e.clone()) };
        self.touch(key);
        r
    }

    /// Record a fresh location learnt by a full lookup or a write.
    pub fn learn(&mut self, key: &[u8], slot_offset: u64, word: Word) {
        if self.capacity == 0 {
            return;
        }
        if let Some(e) = self.entries.get_mut(key) {
            e.slot_offset = slot_offset;
            e.word = word;
            self.touch(key);
            return;
        }
        if self.entries.len() >= self.capacity {
            if let Some((_, victim)) = self.lru.pop_first() {
                self.entries.remove(&victim);
            }
        }
        self.clock += 1;
        let e = CacheEntry { slot_offset, word, access: 1, invalid: 0, stamp: self.clock };
        self.entries.insert(key.to_vec(), e);
        self.lru.insert(self.clock, key.to_vec());
    }

    /// The cached location turned out stale.
    pub fn invalidate(&mut self, key: &[u8], fresh: Option<(u64, Word)>) {
        if let Some(e) = self.entries.get_mut(key) {
            e.invalid = (e.invalid + 1).min(e.access);
        }
        match fresh {
            Some((off, w)) => self.learn(key, off, w),
            None => self.forget(key),
        }
    }

    pub fn forget(&mut self, key: &[u8]) {
        if let Some(e) = self.entries.remove(key) {
            self.lru.remove(&e.stamp);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fabric::NodeId;
    use crate::oplog::{encode_object, LogEntry, Opcode, FLAG_TOMBSTONE};
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn slot_word_roundtrip(fp: u8, class in 0u8..0x80, node: u8, off in 0u64..(1 << 40), tomb: bool) {
            let ptr = RemoteAddr::new(NodeId(node), off);
            let s = SlotWord::new(fp, class, ptr, tomb);
            let w = s.encode();
            if w != 0 {
                let d = SlotWord::decode(w).unwrap();
                prop_assert_eq!(d, s);
                prop_assert_eq!(d.class(), class);
                prop_assert_eq!(d.is_tombstone(), tomb);
            }
        }
    }

    #[test]
    fn locate_is_deterministic() {
        let cfg = Config::default();
        assert_eq!(locate(&cfg, b"k"), locate(&cfg, b"k"));
        let one = Config { index_capacity: 1, ..Config::default() };
        for k in [b"a", b"b", b"c"] {
            assert_eq!(locate(&one, k).group, 0);
        }
        let l = locate(&cfg, b"k");
        assert_eq!(l.fp, l.hash as u8);
    }

    #[test]
    fn candidates_skip_empty_tombstone_and_other_fps() {
        let p = RemoteAddr::new(NodeId(1), 0x1000);
        let words = vec![
            0,
            SlotWord::new(7, 1, p, false).encode(),
            SlotWord::new(8, 1, p, false).encode(),
            SlotWord::new(7, 1, p, true).encode(),
            SlotWord::new(7, 2, p.offset_by(64), false).encode(),
        ];
        let c: Vec<u32> = fp_candidates(&words, 7).iter().map(|(i, _)| *i).collect();
        assert_eq!(c, vec![1, 4]);
        assert_eq!(first_empty(&words), Some(0));
        assert_eq!(first_empty(&words[1..]), None);
    }

    #[test]
    fn object_matching() {
        let e = LogEntry::new(Opcode::Insert, RemoteAddr::NULL, RemoteAddr::NULL);
        let img = encode_object(64, b"key", b"v", 0, 1, &e);
        assert!(matches!(match_object(&img, b"key"), ObjectMatch::Match(_)));
        assert_eq!(match_object(&img, b"kez"), ObjectMatch::Mismatch);
        let t = encode_object(64, b"key", b"", FLAG_TOMBSTONE, 2, &e);
        assert_eq!(match_object(&t, b"key"), ObjectMatch::Deleted);
        assert_eq!(match_object(&[0; 64], b"key"), ObjectMatch::Corrupt);
    }

    #[test]
    fn cache_routes() {
        let mut c = IndexCache::new(4, 0.5);
        assert_eq!(c.route(b"a"), Route::Miss);
        c.learn(b"a", 8, 0x55);
        assert!(matches!(c.route(b"a"), Route::Hit(_)));
        let e = c.get(b"a").unwrap();
        assert_eq!((e.access, e.invalid), (2, 0));
    }

    #[test]
    fn write_intensive_key_bypasses_then_recovers() {
        let mut c = IndexCache::new(4, 0.5);
        c.learn(b"k", 8, 1);
        c.entries.get_mut(&b"k"[..]).unwrap().access = 10;
        c.entries.get_mut(&b"k"[..]).unwrap().invalid = 9;
        assert_eq!(c.route(b"k"), Route::Bypass);
        let access = c.get(b"k").unwrap().access;
        let mut last = c.get(b"k").unwrap().invalid_ratio();
        let mut hit_at = None;
        for i in 0..2 * access {
            let r = c.route(b"k");
            let now = c.get(b"k").unwrap().invalid_ratio();
            assert!(now < last);
            last = now;
            if matches!(r, Route::Hit(_)) && hit_at.is_none() {
                hit_at = Some(i);
            }
        }
        assert!(hit_at.is_some());
        assert!(matches!(c.route(b"k"), Route::Hit(_)));
    }

    #[test]
    fn lru_eviction() {
        let mut c = IndexCache::new(2, 0.5);
        c.learn(b"a", 0, 1);
        c.learn(b"b", 8, 2);
        c.route(b"a");
        c.learn(b"c", 16, 3);
        assert!(c.get(b"a").is_some());
        assert!(c.get(b"b").is_none());
        assert_eq!(c.len(), 2);
    }
}
