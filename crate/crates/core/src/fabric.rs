//! Simulated memory-node pool.
//!
//! Memory nodes expose one-sided READ / WRITE / CAS / FAA plus two coarse
//! RPCs (block ALLOC and the block-table scan used by recovery). Every
//! operation is applied atomically at its node; ordering and interleaving are
//! decided by the scheduler in [`crate::sim`].

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use crate::config::Config;

pub type Word = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub u8);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

/// A client, or the master.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct ActorId(pub u32);

impl ActorId {
    pub const MASTER: ActorId = ActorId(u32::MAX);
}

impl fmt::Display for ActorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if *self == ActorId::MASTER {
            f.write_str("master")
        } else {
            write!(f, "c{}", self.0)
        }
    }
}

const OFFSET_BITS: u32 = 40;
const OFFSET_MASK: u64 = (1 << OFFSET_BITS) - 1;
const ADDR_MASK: u64 = (1 << 48) - 1;

/// 48-bit remote address: node id in the top 8 bits, byte offset below.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct RemoteAddr(u64);

impl RemoteAddr {
    pub const NULL: RemoteAddr = RemoteAddr(0);

    pub fn new(node: NodeId, offset: u64) -> Self {
        assert!(offset <= OFFSET_MASK, "offset {offset:#x} exceeds 40 bits");
        RemoteAddr((u64::from(node.0) << OFFSET_BITS) | offset)
    }

    pub fn from_raw(raw: u64) -> Self {
        RemoteAddr(raw & ADDR_MASK)
    }

    pub fn raw(self) -> u64 {
        self.0
    }

    pub fn node(self) -> NodeId {
        NodeId((self.0 >> OFFSET_BITS) as u8)
    }

    pub fn offset(self) -> u64 {
        self.0 & OFFSET_MASK
    }

    pub fn is_null(self) -> bool {
        self.0 == 0
    }

    pub fn offset_by(self, delta: u64) -> Self {
        RemoteAddr::new(self.node(), self.offset() + delta)
    }

    /// The same offset on another replica node.
    pub fn on_node(self, node: NodeId) -> Self {
        RemoteAddr::new(node, self.offset())
    }
}

impl fmt::Display for RemoteAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{:#x}", self.node(), self.offset())
    }
}

impl std::str::FromStr for RemoteAddr {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (n, off) = s.split_once(':').ok_or_else(|| format!("bad address {s}"))?;
        let node: u8 = n.strip_prefix('n').and_then(|v| v.parse().ok()).ok_or_else(|| format!("bad node in {s}"))?;
        let off =
            u64::from_str_radix(off.trim_start_matches("0x"), 16).map_err(|e| format!("bad offset in {s}: {e}"))?;
        Ok(RemoteAddr::new(NodeId(node), off))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum FabricOp {
    Read {
        addr: RemoteAddr,
        len: usize,
    },
    Write {
        addr: RemoteAddr,
        data: Vec<u8>,
    },
    Cas {
        addr: RemoteAddr,
        expected: Word,
        swap: Word,
    },
    Faa {
        addr: RemoteAddr,
        add: Word,
    },
    /// Coarse block allocation RPC served by the node; the size class is
    /// recorded next to the owner in the allocation table.
    AllocBlock {
        node: NodeId,
        class: u8,
    },
    /// Scan the node's block allocation tables for blocks owned by `owner`.
    FindBlocks {
        node: NodeId,
        owner: ActorId,
    },
}

impl FabricOp {
    pub fn node(&self) -> NodeId {
        match self {
            FabricOp::Read { addr, .. }
            | FabricOp::Write { addr, .. }
            | FabricOp::Cas { addr, .. }
            | FabricOp::Faa { addr, .. } => addr.node(),
            FabricOp::AllocBlock { node, .. } | FabricOp::FindBlocks { node, .. } => *node,
        }
    }

    pub fn addr(&self) -> Option<RemoteAddr> {
        match self {
            FabricOp::Read { addr, .. }
            | FabricOp::Write { addr, .. }
            | FabricOp::Cas { addr, .. }
            | FabricOp::Faa { addr, .. } => Some(*addr),
            _ => None,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            FabricOp::Read { .. } => "READ",
            FabricOp::Write { .. } => "WRITE",
            FabricOp::Cas { .. } => "CAS",
            FabricOp::Faa { .. } => "FAA",
            FabricOp::AllocBlock { .. } => "ALLOC",
            FabricOp::FindBlocks { .. } => "FIND_BLOCKS",
        }
    }

    pub fn read_word(addr: RemoteAddr) -> Self {
        FabricOp::Read { addr, len: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum OpResult {
    Data(Vec<u8>),
    /// Prior value returned by CAS / FAA.
    Word(Word),
    Done,
    Block(RemoteAddr),
    /// Block base (at its primary replica) and size class.
    Blocks(Vec<(RemoteAddr, u8)>),
    Fail,
    OutOfMemory,
}

impl OpResult {
    pub fn is_fail(&self) -> bool {
        matches!(self, OpResult::Fail)
    }

    /// The 64-bit value carried by a CAS/FAA result or an 8-byte READ.
    pub fn word(&self) -> Option<Word> {
        match self {
            OpResult::Word(w) => Some(*w),
            OpResult::Data(d) if d.len() == 8 => Some(read_u64(d, 0)),
            _ => None,
        }
    }

    pub fn data(&self) -> Option<&[u8]> {
        match self {
            OpResult::Data(d) => Some(d),
            _ => None,
        }
    }
}

impl fmt::Display for OpResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OpResult::Data(d) if d.len() == 8 => write!(f, "word={:#x}", read_u64(d, 0)),
            OpResult::Data(d) => write!(f, "bytes={}", d.len()),
            OpResult::Word(w) => write!(f, "old={w:#x}"),
            OpResult::Done => f.write_str("ok"),
            OpResult::Block(a) => write!(f, "block={a}"),
            OpResult::Blocks(v) => write!(f, "blocks={}", v.len()),
            OpResult::Fail => f.write_str("FAIL"),
            OpResult::OutOfMemory => f.write_str("OOM"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhaseResult {
    pub results: Vec<OpResult>,
    pub rtt_cost: u32,
}

pub fn read_u64(buf: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(buf[at..at + 8].try_into().unwrap())
}

/// Address-space layout shared by all nodes.
///
/// Region 0 is the metadata region (index replicas and list-head registry);
/// data regions `1..=num_regions` follow it and are split into blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Geometry {
    pub meta_size: u64,
    pub region_size: u64,
    pub block_size: u64,
    pub num_regions: u32,
    pub index_base: u64,
    pub index_len: u64,
    pub registry_base: u64,
    pub registry_len: u64,
}

impl Geometry {
    pub fn from_config(cfg: &Config) -> Self {
        let index_base = 64;
        let index_len = u64::from(cfg.index_capacity) * u64::from(cfg.slots_per_key) * 8;
        let registry_base = (index_base + index_len).div_ceil(64) * 64;
        let registry_len = u64::from(cfg.max_clients) * cfg.size_classes.len() as u64 * 8;
        let meta_size = (registry_base + registry_len).div_ceil(cfg.block_size) * cfg.block_size;
        Geometry {
            meta_size,
            region_size: cfg.region_size,
            block_size: cfg.block_size,
            num_regions: cfg.num_regions,
            index_base,
            index_len,
            registry_base,
            registry_len,
        }
    }

    pub fn region_base(&self, region: u32) -> u64 {
        if region == 0 {
            0
        } else {
            self.meta_size + u64::from(region - 1) * self.region_size
        }
    }

    pub fn region_len(&self, region: u32) -> u64 {
        if region == 0 {
            self.meta_size
        } else {
            self.region_size
        }
    }

    pub fn region_of(&self, offset: u64) -> u32 {
        if offset < self.meta_size {
            0
        } else {
            1 + ((offset - self.meta_size) / self.region_size) as u32
        }
    }

    pub fn blocks_per_region(&self) -> u64 {
        self.region_size / self.block_size
    }

    pub fn block_base(&self, region: u32, block: u64) -> u64 {
        self.region_base(region) + block * self.block_size
    }

    /// Offset of the block containing `offset` (data regions only).
    pub fn block_start(&self, offset: u64) -> u64 {
        let region = self.region_of(offset);
        let base = self.region_base(region);
        base + (offset - base) / self.block_size * self.block_size
    }

    pub fn is_index(&self, offset: u64) -> bool {
        offset >= self.index_base && offset < self.index_base + self.index_len
    }
}

struct RegionStore {
    data: Vec<u8>,
    owners: Vec<Option<(ActorId, u8)>>,
}

struct MemoryNode {
    alive: bool,
    regions: HashMap<u32, RegionStore>,
    primary_regions: Vec<u32>,
}

/// Rejects mutating index operations from actors holding a superseded epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fence {
    pub start: u64,
    pub end: u64,
    pub epoch: u64,
}

/// The whole memory pool.
pub struct Fabric {
    geo: Geometry,
    placement: Vec<Vec<NodeId>>,
    nodes: Vec<MemoryNode>,
    crashed_actors: BTreeSet<ActorId>,
    rtts: BTreeMap<ActorId, u64>,
    fence: Option<Fence>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AllocError {
    #[error("node failed")]
    Fail,
    #[error("out of memory")]
    OutOfMemory,
}

impl Fabric {
    /// `placement[k]` lists the replica nodes of region `k`, primary first.
    pub fn new(geo: Geometry, num_nodes: usize, placement: Vec<Vec<NodeId>>) -> Self {
        assert_eq!(placement.len(), geo.num_regions as usize + 1);
        let mut nodes: Vec<MemoryNode> = (0..num_nodes)
            .map(|_| MemoryNode { alive: true, regions: HashMap::new(), primary_regions: Vec::new() })
            .collect();
        let blocks = geo.blocks_per_region() as usize;
        for (region, replicas) in placement.iter().enumerate() {
            let region = region as u32;
            for (i, n) in replicas.iter().enumerate() {
                let node = &mut nodes[n.0 as usize];
                let owners = if region == 0 { Vec::new() } else { vec![None; blocks] };
                node.regions.insert(region, RegionStore { data: vec![0; geo.region_len(region) as usize], owners });
                if i == 0 && region != 0 {
                    node.primary_regions.push(region);
                }
            }
        }
        Fabric { geo, placement, nodes, crashed_actors: BTreeSet::new(), rtts: BTreeMap::new(), fence: None }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geo
    }

    pub fn placement(&self, region: u32) -> &[NodeId] {
        &self.placement[region as usize]
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_alive(&self, node: NodeId) -> bool {
        self.nodes.get(node.0 as usize).is_some_and(|n| n.alive)
    }

    pub fn alive_nodes(&self) -> Vec<NodeId> {
        (0..self.nodes.len() as u8).map(NodeId).filter(|n| self.is_alive(*n)).collect()
    }

    /// Crash-stop: the node never serves again.
    pub fn crash_node(&mut self, node: NodeId) {
        self.nodes[node.0 as usize].alive = false;
    }

    pub fn crash_actor(&mut self, actor: ActorId) {
        self.crashed_actors.insert(actor);
    }

    pub fn restart_actor(&mut self, actor: ActorId) {
        self.crashed_actors.remove(&actor);
    }

    pub fn set_fence(&mut self, fence: Option<Fence>) {
        self.fence = fence;
    }

    pub fn rtts(&self, actor: ActorId) -> u64 {
        self.rtts.get(&actor).copied().unwrap_or(0)
    }

    pub fn charge_rtt(&mut self, actor: ActorId) {
        *self.rtts.entry(actor).or_default() += 1;
    }

    fn region_mut(&mut self, addr: RemoteAddr, len: u64) -> (&mut RegionStore, usize) {
        let region = self.geo.region_of(addr.offset());
        let base = self.geo.region_base(region);
        let rel = addr.offset() - base;
        assert!(rel + len <= self.geo.region_len(region), "access {addr}+{len} crosses region {region}");
        let store = self.nodes[addr.node().0 as usize]
            .regions
            .get_mut(&region)
            .unwrap_or_else(|| panic!("{} does not host region {region} ({addr})", addr.node()));
        (store, rel as usize)
    }

    fn fenced(&self, addr: RemoteAddr, epoch: u64) -> bool {
        self.fence.is_some_and(|f| epoch < f.epoch && addr.offset() >= f.start && addr.offset() < f.end)
    }

    /// Apply one operation atomically. `epoch` is the issuer's membership epoch.
    pub fn apply(&mut self, actor: ActorId, op: &FabricOp, epoch: u64) -> OpResult {
        if self.crashed_actors.contains(&actor) || !self.is_alive(op.node()) {
            return OpResult::Fail;
        }
        match op {
            FabricOp::Read { addr, len } => {
                let (store, at) = self.region_mut(*addr, *len as u64);
                OpResult::Data(store.data[at..at + len].to_vec())
            }
            FabricOp::Write { addr, data } => {
                if self.fenced(*addr, epoch) {
                    return OpResult::Fail;
                }
                let (store, at) = self.region_mut(*addr, data.len() as u64);
                store.data[at..at + data.len()].copy_from_slice(data);
                OpResult::Done
            }
            FabricOp::Cas { addr, expected, swap } => {
                assert_eq!(addr.offset() % 8, 0, "unaligned CAS at {addr}");
                if self.fenced(*addr, epoch) {
                    return OpResult::Fail;
                }
                let (store, at) = self.region_mut(*addr, 8);
                let old = read_u64(&store.data, at);
                if old == *expected {
                    store.data[at..at + 8].copy_from_slice(&swap.to_le_bytes());
                }
                OpResult::Word(old)
            }
            FabricOp::Faa { addr, add } => {
                assert_eq!(addr.offset() % 8, 0, "unaligned FAA at {addr}");
                if self.fenced(*addr, epoch) {
                    return OpResult::Fail;
                }
                let (store, at) = self.region_mut(*addr, 8);
                let old = read_u64(&store.data, at);
                store.data[at..at + 8].copy_from_slice(&old.wrapping_add(*add).to_le_bytes());
                OpResult::Word(old)
            }
            FabricOp::AllocBlock { node, class } => match self.alloc_block(*node, actor, *class) {
                Ok(a) => OpResult::Block(a),
                Err(AllocError::Fail) => OpResult::Fail,
                Err(AllocError::OutOfMemory) => OpResult::OutOfMemory,
            },
            FabricOp::FindBlocks { node, owner } => OpResult::Blocks(self.blocks_on(*node, *owner)),
        }
    }

    /// Apply `ops` in list order as one doorbell-batched phase (1 RTT).
    pub fn issue_phase(&mut self, actor: ActorId, ops: &[FabricOp]) -> PhaseResult {
        let results = ops.iter().map(|op| self.apply(actor, op, u64::MAX)).collect();
        self.charge_rtt(actor);
        PhaseResult { results, rtt_cost: 1 }
    }

    /// Set bit `bit` of the word at `addr` with one FAA; returns the prior word.
    pub fn faa_set_bit(&mut self, actor: ActorId, addr: RemoteAddr, bit: u32) -> OpResult {
        self.apply(actor, &FabricOp::Faa { addr, add: 1 << bit }, u64::MAX)
    }

    /// Grant a block from one of `node`'s primary regions to `cid`, recording
    /// the owner in the allocation table of every alive region replica.
    pub fn alloc_block(&mut self, node: NodeId, cid: ActorId, class: u8) -> Result<RemoteAddr, AllocError> {
        if !self.is_alive(node) {
            return Err(AllocError::Fail);
        }
        let regions = self.nodes[node.0 as usize].primary_regions.clone();
        for region in regions {
            let free = self.nodes[node.0 as usize].regions[&region].owners.iter().position(Option::is_none);
            if let Some(block) = free {
                for replica in self.placement[region as usize].clone() {
                    let n = &mut self.nodes[replica.0 as usize];
                    if n.alive {
                        n.regions.get_mut(&region).unwrap().owners[block] = Some((cid, class));
                    }
                }
                return Ok(RemoteAddr::new(node, self.geo.block_base(region, block as u64)));
            }
        }
        Err(AllocError::OutOfMemory)
    }

    /// Blocks whose owner (as recorded on `node`) is `owner`, addressed at
    /// their primary replica.
    pub fn blocks_on(&self, node: NodeId, owner: ActorId) -> Vec<(RemoteAddr, u8)> {
        let n = &self.nodes[node.0 as usize];
        let mut out = Vec::new();
        let mut regions: Vec<_> = n.regions.keys().copied().filter(|r| *r != 0).collect();
        regions.sort_unstable();
        for region in regions {
            let primary = self.placement[region as usize][0];
            for (b, o) in n.regions[&region].owners.iter().enumerate() {
                if let Some((cid, class)) = o {
                    if *cid == owner {
                        out.push((RemoteAddr::new(primary, self.geo.block_base(region, b as u64)), *class));
                    }
                }
            }
        }
        out
    }

    /// Owner recorded for the block at `block_addr` on `node`'s replica.
    pub fn block_owner(&self, node: NodeId, block_addr: RemoteAddr) -> Option<(ActorId, u8)> {
        let region = self.geo.region_of(block_addr.offset());
        let base = self.geo.region_base(region);
        let b = ((block_addr.offset() - base) / self.geo.block_size) as usize;
        self.nodes[node.0 as usize].regions.get(&region)?.owners.get(b).copied().flatten()
    }

    /// All granted blocks with owner and class, from the first alive replica.
    pub fn all_blocks(&self) -> Vec<(RemoteAddr, ActorId, u8)> {
        let mut out = Vec::new();
        for region in 1..=self.geo.num_regions {
            let replicas = &self.placement[region as usize];
            let Some(src) = replicas.iter().find(|n| self.is_alive(**n)) else { continue };
            let store = &self.nodes[src.0 as usize].regions[&region];
            for (b, o) in store.owners.iter().enumerate() {
                if let Some((o, class)) = o {
                    out.push((RemoteAddr::new(replicas[0], self.geo.block_base(region, b as u64)), *o, *class));
                }
            }
        }
        out
    }

    /// Uncharged read for audits and tests. `None` if the node is down.
    pub fn peek(&self, addr: RemoteAddr, len: usize) -> Option<Vec<u8>> {
        if !self.is_alive(addr.node()) {
            return None;
        }
        let region = self.geo.region_of(addr.offset());
        let rel = (addr.offset() - self.geo.region_base(region)) as usize;
        let store = self.nodes[addr.node().0 as usize].regions.get(&region)?;
        store.data.get(rel..rel + len).map(<[u8]>::to_vec)
    }

    pub fn peek_word(&self, addr: RemoteAddr) -> Option<Word> {
        self.peek(addr, 8).map(|d| read_u64(&d, 0))
    }

    /// Uncharged write used only to build test fixtures.
    pub fn poke(&mut self, addr: RemoteAddr, data: &[u8]) {
        let (store, at) = self.region_mut(addr, data.len() as u64);
        store.data[at..at + data.len()].copy_from_slice(data);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Fabric {
        let cfg = Config { num_mns: 3, r: 3, num_regions: 2, ..Config::default() };
        let geo = Geometry::from_config(&cfg);
        let n = |i| NodeId(i);
        let placement = vec![vec![n(0), n(1), n(2)], vec![n(0), n(1), n(2)], vec![n(1), n(2), n(0)]];
        Fabric::new(geo, 3, placement)
    }

    fn word_addr(f: &Fabric) -> RemoteAddr {
        RemoteAddr::new(NodeId(0), f.geometry().index_base)
    }

    #[test]
    fn addr_packing() {
        let a = RemoteAddr::new(NodeId(7), 0x1234);
        assert_eq!(a.node(), NodeId(7));
        assert_eq!(a.offset(), 0x1234);
        assert_eq!(RemoteAddr::from_raw(a.raw()), a);
        assert_eq!("n7:0x1234".parse::<RemoteAddr>().unwrap(), a);
        assert!(a.raw() < 1 << 48);
    }

    #[test]
    fn read_initial_zero() {
        let mut f = small();
        let a = word_addr(&f);
        let r = f.issue_phase(ActorId(0), &[FabricOp::read_word(a)]);
        assert_eq!(r.results[0].word(), Some(0));
        assert_eq!(r.rtt_cost, 1);
        assert_eq!(f.rtts(ActorId(0)), 1);
    }

    #[test]
    fn cas_semantics() {
        let mut f = small();
        let a = word_addr(&f);
        let r = f.issue_phase(ActorId(0), &[FabricOp::Cas { addr: a, expected: 0, swap: 9 }]);
        assert_eq!(r.results[0], OpResult::Word(0));
        assert_eq!(f.peek_word(a), Some(9));
        let r = f.issue_phase(ActorId(1), &[FabricOp::Cas { addr: a, expected: 0, swap: 5 }]);
        assert_eq!(r.results[0], OpResult::Word(9));
        assert_eq!(f.peek_word(a), Some(9));
    }

    #[test]
    fn phase_of_many_ops_costs_one_rtt() {
        let mut f = small();
        let a = word_addr(&f);
        let ops: Vec<_> = (0..3u8).map(|n| FabricOp::read_word(a.on_node(NodeId(n)))).collect();
        let r = f.issue_phase(ActorId(3), &ops);
        assert_eq!(r.results.len(), 3);
        assert_eq!(f.rtts(ActorId(3)), 1);
    }

    #[test]
    fn faa_set_bits() {
        let mut f = small();
        let a = word_addr(&f);
        assert_eq!(f.faa_set_bit(ActorId(0), a, 2), OpResult::Word(0));
        assert_eq!(f.peek_word(a), Some(0b100));
        assert_eq!(f.faa_set_bit(ActorId(0), a, 0), OpResult::Word(0b100));
        assert_eq!(f.peek_word(a), Some(0b101));
        f.crash_node(NodeId(0));
        assert_eq!(f.faa_set_bit(ActorId(0), a, 1), OpResult::Fail);
    }

    #[test]
    fn crashed_node_fails_only_its_ops() {
        let mut f = small();
        let a = word_addr(&f);
        f.crash_node(NodeId(1));
        let r = f.issue_phase(ActorId(0), &[FabricOp::read_word(a.on_node(NodeId(1))), FabricOp::read_word(a)]);
        assert_eq!(r.results[0], OpResult::Fail);
        assert_eq!(r.results[1].word(), Some(0));
        let w = FabricOp::Write { addr: a.on_node(NodeId(1)), data: vec![1; 8] };
        assert_eq!(f.issue_phase(ActorId(0), &[w]).results[0], OpResult::Fail);
        assert_eq!(f.peek_word(a.on_node(NodeId(2))), Some(0));
    }

    #[test]
    fn alloc_records_owner_on_all_replicas() {
        let mut f = small();
        let b = f.alloc_block(NodeId(0), ActorId(7), 2).unwrap();
        let geo = f.geometry().clone();
        assert_eq!(b.offset(), geo.block_base(1, 0));
        for n in 0..3 {
            assert_eq!(f.block_owner(NodeId(n), b), Some((ActorId(7), 2)));
        }
        let b2 = f.alloc_block(NodeId(0), ActorId(8), 0).unwrap();
        assert_eq!(b2.offset(), b.offset() + geo.block_size);
        assert_eq!(f.blocks_on(NodeId(2), ActorId(7)), vec![(b, 2)]);
    }

    #[test]
    fn alloc_exhaustion_and_failure() {
        let mut f = small();
        let per = f.geometry().blocks_per_region();
        for _ in 0..per {
            f.alloc_block(NodeId(1), ActorId(0), 0).unwrap();
        }
        assert_eq!(f.alloc_block(NodeId(1), ActorId(0), 0), Err(AllocError::OutOfMemory));
        f.crash_node(NodeId(0));
        assert_eq!(f.alloc_block(NodeId(0), ActorId(0), 0), Err(AllocError::Fail));
    }

    #[test]
    fn fence_rejects_stale_epoch() {
        let mut f = small();
        let a = word_addr(&f);
        let geo = f.geometry().clone();
        f.set_fence(Some(Fence { start: geo.index_base, end: geo.index_base + geo.index_len, epoch: 2 }));
        let cas = FabricOp::Cas { addr: a, expected: 0, swap: 1 };
        assert_eq!(f.apply(ActorId(0), &cas, 1), OpResult::Fail);
        assert_eq!(f.apply(ActorId(0), &FabricOp::read_word(a), 1).word(), Some(0));
        assert_eq!(f.apply(ActorId(0), &cas, 2), OpResult::Word(0));
    }
}
