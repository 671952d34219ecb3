//! Object layout and the embedded operation log.
//!
//! Every KV object carries a 22-byte log entry in its last bytes:
//!
//! ```text
//! next (6) | prev (6) | old_value (8) | crc (1) | opcode << 1 | used (1)
//! ```
//!
//! The `used` bit is the very last byte of the object, so a single ordered
//! WRITE of the object makes the bit visible only after everything else.

use crate::fabric::{read_u64, RemoteAddr};

pub const HEADER_LEN: usize = 16;
pub const ENTRY_LEN: usize = 22;
/// Smallest object that holds a header, a one-byte key and a log entry.
pub const MIN_OBJECT: u64 = (HEADER_LEN + ENTRY_LEN) as u64;

/// `old_value` written by the master when it commits on a client's behalf.
pub const MASTER_SENTINEL: u64 = 1;

pub const FLAG_INVALID: u8 = 0x01;
/// Set by an insert that withdrew after winning its slot; readers skip it.
pub const FLAG_VOID: u8 = 0x02;
pub const FLAG_TOMBSTONE: u8 = 0x04;

const FLAGS_AT: u64 = 4;
const DONE_AT: u64 = 5;
const COMMIT_MASK: u8 = 0xA5;

/// CRC-8, polynomial 0x07, initial value 0.
pub fn crc8(data: &[u8]) -> u8 {
    let mut crc = 0u8;
    for &b in data {
        crc ^= b;
        for _ in 0..8 {
            crc = if crc & 0x80 != 0 { (crc << 1) ^ 0x07 } else { crc << 1 };
        }
    }
    crc
}

/// Checksum stored next to a committed `old_value`. Masked so that an
/// all-zero (never committed) field does not validate.
pub fn commit_crc(old_value: u64) -> u8 {
    crc8(&old_value.to_le_bytes()) ^ COMMIT_MASK
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Opcode {
    Insert = 1,
    Update = 2,
    Delete = 3,
}

impl Opcode {
    pub fn from_bits(bits: u8) -> Option<Self> {
        match bits {
            1 => Some(Opcode::Insert),
            2 => Some(Opcode::Update),
            3 => Some(Opcode::Delete),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LogEntry {
    pub next: RemoteAddr,
    pub prev: RemoteAddr,
    pub old_value: u64,
    pub crc: u8,
    pub opcode: u8,
    pub used: bool,
}

fn put48(out: &mut [u8], v: u64) {
    out.copy_from_slice(&v.to_le_bytes()[..6]);
}

fn get48(b: &[u8]) -> u64 {
    let mut w = [0u8; 8];
    w[..6].copy_from_slice(b);
    u64::from_le_bytes(w)
}

impl LogEntry {
    /// A fresh, uncommitted entry.
    pub fn new(opcode: Opcode, next: RemoteAddr, prev: RemoteAddr) -> Self {
        LogEntry { next, prev, old_value: 0, crc: 0, opcode: opcode as u8, used: true }
    }

    pub fn encode(&self) -> [u8; ENTRY_LEN] {
        let mut out = [0u8; ENTRY_LEN];
        put48(&mut out[0..6], self.next.raw());
        put48(&mut out[6..12], self.prev.raw());
        out[12..20].copy_from_slice(&self.old_value.to_le_bytes());
        out[20] = self.crc;
        out[21] = (self.opcode << 1) | u8::from(self.used);
        out
    }

    pub fn decode(b: &[u8]) -> Self {
        assert_eq!(b.len(), ENTRY_LEN);
        LogEntry {
            next: RemoteAddr::from_raw(get48(&b[0..6])),
            prev: RemoteAddr::from_raw(get48(&b[6..12])),
            old_value: read_u64(b, 12),
            crc: b[20],
            opcode: b[21] >> 1,
            used: b[21] & 1 == 1,
        }
    }

    pub fn op(&self) -> Option<Opcode> {
        Opcode::from_bits(self.opcode)
    }

    pub fn is_committed(&self) -> bool {
        self.crc == commit_crc(self.old_value)
    }
}

/// Recovery classification of a traversed entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EntryState {
    Unused,
    IncompleteEntry,
    Uncommitted,
    Committed,
}

pub fn classify(entry: &LogEntry, is_tail: bool) -> EntryState {
    if !entry.used {
        if is_tail {
            EntryState::IncompleteEntry
        } else {
            EntryState::Unused
        }
    } else if entry.is_committed() {
        EntryState::Committed
    } else {
        EntryState::Uncommitted
    }
}

/// A decoded KV object.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KvObject {
    pub key: Vec<u8>,
    pub value: Vec<u8>,
    pub flags: u8,
    /// Set by the writer's background phase once nothing is left to do.
    pub done: bool,
    pub seq: u64,
    pub crc_ok: bool,
    pub entry: LogEntry,
}

impl KvObject {
    pub fn is_tombstone(&self) -> bool {
        self.flags & FLAG_TOMBSTONE != 0
    }

    pub fn is_invalid(&self) -> bool {
        self.flags & FLAG_INVALID != 0
    }

    pub fn is_void(&self) -> bool {
        self.flags & FLAG_VOID != 0
    }
}

/// Bytes an object of this key and value needs.
pub fn object_len(key_len: usize, val_len: usize) -> usize {
    HEADER_LEN + key_len + val_len + ENTRY_LEN
}

fn kv_crc(buf: &[u8], payload_end: usize) -> u8 {
    let mut bytes = Vec::with_capacity(payload_end);
    bytes.extend_from_slice(&buf[0..4]);
    bytes.extend_from_slice(&buf[7..payload_end]);
    crc8(&bytes)
}

/// Serialise a whole object of `class_size` bytes.
pub fn encode_object(class_size: usize, key: &[u8], value: &[u8], flags: u8, seq: u64, entry: &LogEntry) -> Vec<u8> {
    let end = HEADER_LEN + key.len() + value.len();
    assert!(end + ENTRY_LEN <= class_size, "object does not fit its class");
    let mut buf = vec![0u8; class_size];
    buf[0..2].copy_from_slice(&(key.len() as u16).to_le_bytes());
    buf[2..4].copy_from_slice(&(value.len() as u16).to_le_bytes());
    buf[4] = flags;
    buf[8..16].copy_from_slice(&seq.to_le_bytes());
    buf[HEADER_LEN..HEADER_LEN + key.len()].copy_from_slice(key);
    buf[HEADER_LEN + key.len()..end].copy_from_slice(value);
    buf[6] = kv_crc(&buf, end);
    buf[class_size - ENTRY_LEN..].copy_from_slice(&entry.encode());
    buf
}

/// Parse an object image. `None` if the lengths cannot belong to this class.
pub fn decode_object(buf: &[u8]) -> Option<KvObject> {
    if buf.len() < MIN_OBJECT as usize {
        return None;
    }
    let key_len = u16::from_le_bytes([buf[0], buf[1]]) as usize;
    let val_len = u16::from_le_bytes([buf[2], buf[3]]) as usize;
    let end = HEADER_LEN + key_len + val_len;
    let entry = LogEntry::decode(&buf[buf.len() - ENTRY_LEN..]);
    if end + ENTRY_LEN > buf.len() {
        return None;
    }
    Some(KvObject {
        key: buf[HEADER_LEN..HEADER_LEN + key_len].to_vec(),
        value: buf[HEADER_LEN + key_len..end].to_vec(),
        flags: buf[4],
        done: buf[5] != 0,
        seq: read_u64(buf, 8),
        crc_ok: key_len > 0 && buf[6] == kv_crc(buf, end),
        entry,
    })
}

/// Allocation sequence number of an object image (0 = never written).
pub fn object_seq(buf: &[u8]) -> u64 {
    read_u64(buf, 8)
}

pub fn entry_from_image(buf: &[u8]) -> LogEntry {
    LogEntry::decode(&buf[buf.len() - ENTRY_LEN..])
}

/// The WRITE that commits `old_value`: target address and 9 payload bytes.
pub fn commit_write(obj: RemoteAddr, class_size: u64, old_value: u64) -> (RemoteAddr, Vec<u8>) {
    let mut data = old_value.to_le_bytes().to_vec();
    data.push(commit_crc(old_value));
    (obj.offset_by(class_size - ENTRY_LEN as u64 + 12), data)
}

/// The WRITE that resets the `used` bit (cancel or reclaim).
pub fn clear_used_write(obj: RemoteAddr, class_size: u64, opcode: u8) -> (RemoteAddr, Vec<u8>) {
    (obj.offset_by(class_size - 1), vec![opcode << 1])
}

pub fn flags_addr(obj: RemoteAddr) -> RemoteAddr {
    obj.offset_by(FLAGS_AT)
}

pub fn done_addr(obj: RemoteAddr) -> RemoteAddr {
    obj.offset_by(DONE_AT)
}

/// An entry found by [`traverse`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TracedEntry {
    pub addr: RemoteAddr,
    pub seq: u64,
    pub state: EntryState,
    pub object: Option<KvObject>,
    pub entry: LogEntry,
}

/// Order one class's written objects by allocation sequence and classify
/// them; the highest sequence number is the tail. Never-written objects
/// (sequence 0) are skipped.
pub fn traverse(objects: &[(RemoteAddr, Vec<u8>)]) -> Vec<TracedEntry> {
    let mut written: Vec<_> =
        objects.iter().filter(|(_, img)| object_seq(img) != 0).map(|(a, img)| (object_seq(img), *a, img)).collect();
    written.sort_by_key(|(s, a, _)| (*s, *a));
    let last = written.len().saturating_sub(1);
    written
        .into_iter()
        .enumerate()
        .map(|(i, (seq, addr, img))| {
            let entry = entry_from_image(img);
            TracedEntry { addr, seq, state: classify(&entry, i == last), object: decode_object(img), entry }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fabric::NodeId;

    fn addr(off: u64) -> RemoteAddr {
        RemoteAddr::new(NodeId(1), off)
    }

    #[test]
    fn entry_is_22_bytes_with_used_last() {
        let e = LogEntry::new(Opcode::Update, addr(0x1000), addr(0x2000));
        let b = e.encode();
        assert_eq!(b.len(), 22);
        assert_eq!(b[21] & 1, 1);
        assert_eq!(b[21] >> 1, 2);
        assert_eq!(LogEntry::decode(&b), e);
    }

    #[test]
    fn crc8_known_values() {
        // CRC-8/SMBUS check value for "123456789".
        assert_eq!(crc8(b"123456789"), 0xF4);
        assert_eq!(crc8(&[]), 0);
    }

    #[test]
    fn zero_fill_is_not_committed() {
        let e = LogEntry::decode(&[0u8; 22]);
        assert!(!e.used);
        assert!(!e.is_committed());
        let mut e = LogEntry::new(Opcode::Insert, RemoteAddr::NULL, RemoteAddr::NULL);
        assert!(!e.is_committed());
        e.old_value = 0;
        e.crc = commit_crc(0);
        assert!(e.is_committed());
    }

    #[test]
    fn object_roundtrip_and_commit() {
        let e = LogEntry::new(Opcode::Insert, addr(0x40), addr(0));
        let mut img = encode_object(128, b"key", b"value", 0, 7, &e);
        let o = decode_object(&img).unwrap();
        assert_eq!(o.key, b"key");
        assert_eq!(o.value, b"value");
        assert_eq!(o.seq, 7);
        assert!(o.crc_ok);
        assert_eq!(classify(&o.entry, true), EntryState::Uncommitted);

        let obj = addr(0x800);
        let (a, data) = commit_write(obj, 128, 0xdead);
        let at = (a.offset() - obj.offset()) as usize;
        img[at..at + data.len()].copy_from_slice(&data);
        let o = decode_object(&img).unwrap();
        assert_eq!(o.entry.old_value, 0xdead);
        assert_eq!(classify(&o.entry, true), EntryState::Committed);
        assert!(o.entry.used);
    }

    #[test]
    fn torn_object_is_incomplete() {
        let e = LogEntry::new(Opcode::Update, addr(0x40), addr(0));
        let full = encode_object(64, b"k", b"v", 0, 3, &e);
        let mut torn = vec![0u8; 64];
        torn[..63].copy_from_slice(&full[..63]);
        let t = traverse(&[(addr(0), torn)]);
        assert_eq!(t[0].state, EntryState::IncompleteEntry);
    }

    #[test]
    fn corrupted_payload_fails_crc() {
        let e = LogEntry::new(Opcode::Insert, addr(0), addr(0));
        let mut img = encode_object(64, b"k", b"v", 0, 1, &e);
        img[17] ^= 1;
        assert!(!decode_object(&img).unwrap().crc_ok);
    }

    #[test]
    fn traverse_orders_by_sequence() {
        let mk = |seq, used: bool| {
            let mut e = LogEntry::new(Opcode::Update, addr(0), addr(0));
            e.used = used;
            if seq < 3 {
                e.crc = commit_crc(0);
            }
            encode_object(64, b"k", b"v", 0, seq, &e)
        };
        let objs = vec![
            (addr(0x100), mk(3, true)),
            (addr(0x140), vec![0; 64]),
            (addr(0x180), mk(1, true)),
            (addr(0x1c0), mk(2, false)),
        ];
        let t = traverse(&objs);
        let seqs: Vec<_> = t.iter().map(|e| e.seq).collect();
        assert_eq!(seqs, vec![1, 2, 3]);
        assert_eq!(t[0].state, EntryState::Committed);
        assert_eq!(t[1].state, EntryState::Unused);
        assert_eq!(t[2].state, EntryState::Uncommitted);
    }
}
