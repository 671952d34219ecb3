//! Two-level memory management.
//!
//! Regions are placed on memory nodes with a consistent-hash ring. Memory
//! nodes hand out whole blocks (ALLOC_BLOCK); clients carve each block into
//! objects of one size class and keep them on a local free list. Any client
//! frees an object by setting its bit in the block's free bitmap; the owner
//! periodically scans its bitmaps and takes freed objects back.

use std::collections::{BTreeMap, VecDeque};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::fabric::{read_u64, ActorId, Fabric, FabricOp, Geometry, NodeId, OpResult, RemoteAddr};
use crate::hash::hash_u64;
use crate::sim::{Ctx, World};

const RING_SALT: u64 = 0x7269_6e67;

/// Consistent-hash ring with virtual nodes.
#[derive(Debug, Clone)]
pub struct RegionMap {
    ring: BTreeMap<u64, NodeId>,
    r: usize,
    seed: u64,
}

impl RegionMap {
    pub fn new(num_nodes: usize, r: usize, vnodes: u32, seed: u64) -> Result<Self> {
        if r == 0 || num_nodes < r {
            return Err(Error::Config(format!("replication factor {r} needs at least {r} nodes, have {num_nodes}")));
        }
        let mut ring = BTreeMap::new();
        for n in 0..num_nodes {
            for v in 0..vnodes.max(1) {
                let point = hash_u64(seed ^ RING_SALT, ((n as u64) << 32) | u64::from(v));
                ring.insert(point, NodeId(n as u8));
            }
        }
        Ok(RegionMap { ring, r, seed })
    }

    /// The `r` distinct nodes following the region's ring position; the
    /// first is the primary.
    pub fn place_region(&self, region: u32) -> Vec<NodeId> {
        let point = hash_u64(self.seed, u64::from(region));
        let mut out = Vec::with_capacity(self.r);
        for (_, n) in self.ring.range(point..).chain(self.ring.range(..point)) {
            if !out.contains(n) {
                out.push(*n);
                if out.len() == self.r {
                    break;
                }
            }
        }
        out
    }

    /// Placement of the metadata region and every data region.
    pub fn placements(&self, num_regions: u32) -> Vec<Vec<NodeId>> {
        (0..=num_regions).map(|k| self.place_region(k)).collect()
    }
}

/// Build the memory pool for `cfg`. Returns it with the index replica nodes.
pub fn build_fabric(cfg: &Config) -> Result<(Fabric, Vec<NodeId>)> {
    cfg.validate()?;
    let map = RegionMap::new(cfg.num_mns, cfg.r, cfg.vnodes, cfg.hash_seed)?;
    let placement = map.placements(cfg.num_regions);
    let index_nodes = placement[0].clone();
    Ok((Fabric::new(Geometry::from_config(cfg), cfg.num_mns, placement), index_nodes))
}

/// Every replica of the object or word at `addr`, primary first.
pub fn replicas(fabric: &Fabric, addr: RemoteAddr) -> Vec<RemoteAddr> {
    let region = fabric.geometry().region_of(addr.offset());
    fabric.placement(region).iter().map(|n| addr.on_node(*n)).collect()
}

pub fn alive_replicas(fabric: &Fabric, addr: RemoteAddr) -> Vec<RemoteAddr> {
    replicas(fabric, addr).into_iter().filter(|a| fabric.is_alive(a.node())).collect()
}

/// Geometry of a block carved for one size class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockLayout {
    pub bitmap_bytes: u64,
    pub class_size: u64,
    pub objects: u64,
}

impl BlockLayout {
    pub fn new(cfg: &Config, class: u8) -> Self {
        let bitmap_bytes = cfg.bitmap_bytes();
        let class_size = cfg.class_size(class);
        BlockLayout { bitmap_bytes, class_size, objects: (cfg.block_size - bitmap_bytes) / class_size }
    }

    pub fn bitmap_words(&self) -> u64 {
        self.objects.div_ceil(64)
    }

    pub fn object(&self, block: RemoteAddr, i: u64) -> RemoteAddr {
        block.offset_by(self.bitmap_bytes + i * self.class_size)
    }

    pub fn index_of(&self, block: RemoteAddr, obj: RemoteAddr) -> u64 {
        (obj.offset() - block.offset() - self.bitmap_bytes) / self.class_size
    }

    /// Bitmap word address and bit for object `i`.
    pub fn bit(&self, block: RemoteAddr, i: u64) -> (RemoteAddr, u32) {
        (block.offset_by(i / 64 * 8), (i % 64) as u32)
    }
}

/// Block base of an object address (same node as `obj`).
pub fn block_of(geo: &Geometry, obj: RemoteAddr) -> RemoteAddr {
    RemoteAddr::new(obj.node(), geo.block_start(obj.offset()))
}

/// Offset of the list-head registry entry for `(cid, class)`.
pub fn registry_offset(geo: &Geometry, num_classes: usize, cid: ActorId, class: u8) -> u64 {
    geo.registry_base + (u64::from(cid.0) * num_classes as u64 + u64::from(class)) * 8
}

/// A freshly allocated object and its log-list neighbours.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Allocation {
    pub addr: RemoteAddr,
    pub class: u8,
    pub seq: u64,
    /// Next object this class will hand out.
    pub next: RemoteAddr,
    /// Previous object allocated in this class.
    pub prev: RemoteAddr,
}

/// Client-private allocator state.
#[derive(Debug, Clone, Default)]
pub struct Allocator {
    pub cid: ActorId,
    pub free: Vec<VecDeque<RemoteAddr>>,
    pub blocks: Vec<(RemoteAddr, u8)>,
    pub next_seq: Vec<u64>,
    pub last: Vec<RemoteAddr>,
    pub objects_granted: u64,
    pub last_reclaim: u64,
    rr: usize,
}

impl Allocator {
    pub fn new(cid: ActorId, num_classes: usize) -> Self {
        Allocator {
            cid,
            free: vec![VecDeque::new(); num_classes],
            blocks: Vec::new(),
            next_seq: vec![1; num_classes],
            last: vec![RemoteAddr::NULL; num_classes],
            objects_granted: 0,
            last_reclaim: 0,
            rr: cid.0 as usize,
        }
    }

    /// Append every object of a granted block to its class's free list.
    pub fn carve(&mut self, cfg: &Config, block: RemoteAddr, class: u8) {
        let layout = BlockLayout::new(cfg, class);
        self.blocks.push((block, class));
        for i in 0..layout.objects {
            self.free[class as usize].push_back(layout.object(block, i));
        }
        self.objects_granted += layout.objects;
    }

    /// Pop the head of the class list. Needs at least two entries so the
    /// successor (the log entry's `next`) is known.
    pub fn take(&mut self, class: u8) -> Option<Allocation> {
        let list = &mut self.free[class as usize];
        if list.len() < 2 {
            return None;
        }
        let addr = list.pop_front().unwrap();
        let next = *list.front().unwrap();
        let c = class as usize;
        let a = Allocation { addr, class, seq: self.next_seq[c], next, prev: self.last[c] };
        self.next_seq[c] += 1;
        self.last[c] = addr;
        Some(a)
    }

    pub fn free_listed(&self) -> usize {
        self.free.iter().map(VecDeque::len).sum()
    }
}

fn with_alloc<R>(ctx: &Ctx, f: impl FnOnce(&mut Allocator, &Config) -> R) -> R {
    let cid = ctx.actor;
    ctx.with(|w| {
        let cfg = w.cfg.clone();
        f(w.allocs.get_mut(&cid).expect("allocator not initialised"), &cfg)
    })
}

/// Nodes that can serve ALLOC_BLOCK: alive and primary for some data region.
fn grant_nodes(w: &World) -> Vec<NodeId> {
    let f = &w.fabric;
    let mut nodes: Vec<NodeId> =
        (1..=f.geometry().num_regions).map(|r| f.placement(r)[0]).filter(|n| f.is_alive(*n)).collect();
    nodes.sort_unstable();
    nodes.dedup();
    nodes
}

/// Grant one block per entry of `classes`, round-robin over nodes.
pub async fn refill(ctx: &Ctx, classes: &[u8]) -> Result<()> {
    let mut pending: Vec<u8> = classes.to_vec();
    let mut attempts = 0;
    while !pending.is_empty() {
        let nodes = ctx.with(|w| grant_nodes(w));
        if nodes.is_empty() || attempts > nodes.len() {
            return Err(Error::OutOfMemory);
        }
        attempts += 1;
        let ops: Vec<FabricOp> = with_alloc(ctx, |a, _| {
            pending
                .iter()
                .map(|c| {
                    a.rr += 1;
                    FabricOp::AllocBlock { node: nodes[a.rr % nodes.len()], class: *c }
                })
                .collect()
        });
        let results = ctx.phase(ops).await;
        let mut retry = Vec::new();
        for (c, r) in pending.iter().zip(results) {
            match r {
                OpResult::Block(b) => with_alloc(ctx, |a, cfg| a.carve(cfg, b, *c)),
                _ => retry.push(*c),
            }
        }
        pending = retry;
    }
    Ok(())
}

/// Set up a client: one block per class and the list-head registry.
pub async fn init_client(ctx: &Ctx) -> Result<()> {
    let cid = ctx.actor;
    let n = ctx.with(|w| {
        let n = w.cfg.size_classes.len();
        w.allocs.insert(cid, Allocator::new(cid, n));
        n
    });
    let classes: Vec<u8> = (0..n as u8).collect();
    refill(ctx, &classes).await?;
    let ops = ctx.with(|w| {
        let geo = w.fabric.geometry().clone();
        let a = &w.allocs[&cid];
        let mut ops = Vec::new();
        for c in 0..n as u8 {
            let head = a.free[c as usize].front().copied().unwrap_or_default();
            let off = registry_offset(&geo, n, cid, c);
            for node in &w.membership.index_nodes {
                ops.push(FabricOp::Write {
                    addr: RemoteAddr::new(*node, off),
                    data: head.raw().to_le_bytes().to_vec(),
                });
            }
        }
        ops
    });
    ctx.phase(ops).await;
    Ok(())
}

/// Allocate an object of `class`, refilling synchronously if needed.
pub async fn alloc(ctx: &Ctx, class: u8) -> Result<Allocation> {
    loop {
        if let Some(a) = with_alloc(ctx, |a, _| a.take(class)) {
            return Ok(a);
        }
        refill(ctx, &[class]).await?;
    }
}

/// The FAA ops that free `obj` (one per alive bitmap replica).
pub fn free_ops(w: &World, obj: RemoteAddr, class: u8) -> Vec<FabricOp> {
    let geo = w.fabric.geometry();
    let layout = BlockLayout::new(&w.cfg, class);
    let block = block_of(geo, obj);
    let (word, bit) = layout.bit(block, layout.index_of(block, obj));
    alive_replicas(&w.fabric, word).into_iter().map(|addr| FabricOp::Faa { addr, add: 1 << bit }).collect()
}

/// Repeat a free that may have been cut short by a crash. Replicas whose
/// bit is missing get it when another replica already has it. When no
/// replica has it, the free is issued only if the object cannot have been
/// freed and reclaimed in the meantime; otherwise it is left alone.
pub async fn redo_free(ctx: &Ctx, obj: RemoteAddr, class: u8, may_be_reclaimed: bool) {
    let (word, bit) = ctx.with(|w| {
        let layout = BlockLayout::new(&w.cfg, class);
        let block = block_of(w.fabric.geometry(), obj);
        layout.bit(block, layout.index_of(block, obj))
    });
    let reps = ctx.with(|w| alive_replicas(&w.fabric, word));
    let reads = reps.iter().map(|addr| FabricOp::Read { addr: *addr, len: 8 }).collect();
    let res = ctx.phase(reads).await;
    let has: Vec<Option<bool>> = res.iter().map(|r| r.data().map(|d| read_u64(d, 0) >> bit & 1 == 1)).collect();
    let any = has.contains(&Some(true));
    if !any && may_be_reclaimed {
        return;
    }
    let ops: Vec<FabricOp> = reps
        .iter()
        .zip(&has)
        .filter(|(_, h)| **h == Some(false))
        .map(|(addr, _)| FabricOp::Faa { addr: *addr, add: 1 << bit })
        .collect();
    if !ops.is_empty() {
        ctx.phase(ops).await;
    }
}

/// Free an object in its own phase.
pub async fn remote_free(ctx: &Ctx, obj: RemoteAddr, class: u8) {
    let ops = ctx.with(|w| free_ops(w, obj, class));
    ctx.phase(ops).await;
}

/// Background work between requests: top up low free lists and run the
/// periodic reclaim scan.
pub async fn maintain(ctx: &Ctx) -> Result<()> {
    let (low, scan) = ctx.with(|w| {
        let a = &w.allocs[&ctx.actor];
        let low: Vec<u8> =
            a.free.iter().enumerate().filter(|(_, l)| l.len() < w.cfg.refill_watermark).map(|(c, _)| c as u8).collect();
        (low, w.tick >= a.last_reclaim + w.cfg.reclaim_interval_ticks)
    });
    if scan {
        reclaim_scan(ctx).await;
    }
    if !low.is_empty() {
        refill(ctx, &low).await?;
    }
    Ok(())
}

/// Class, bits set on every replica, and each replica's observed word.
type AgreedBits = (u8, u64, Vec<(RemoteAddr, u64)>);

/// Take back every object whose free bit is set in `cid`'s blocks.
pub async fn reclaim_scan(ctx: &Ctx) -> usize {
    let tick = ctx.tick();
    with_alloc(ctx, |a, _| a.last_reclaim = tick);
    let (reads, plan) = ctx.with(|w| {
        let a = &w.allocs[&ctx.actor];
        let mut reads = Vec::new();
        let mut plan = Vec::new();
        for (block, class) in &a.blocks {
            let layout = BlockLayout::new(&w.cfg, *class);
            let len = (layout.bitmap_words() * 8) as usize;
            for replica in alive_replicas(&w.fabric, *block) {
                reads.push(FabricOp::Read { addr: replica, len });
                plan.push((*block, *class, replica));
            }
        }
        (reads, plan)
    });
    if reads.is_empty() {
        return 0;
    }
    let results = ctx.phase(reads).await;

    // Per (block, word index): bits set on every replica, and each replica's
    // observed word. A bit set on only some replicas belongs to a free still
    // in flight and is left for a later scan.
    let mut words: BTreeMap<(RemoteAddr, u64), AgreedBits> = BTreeMap::new();
    for ((block, class, replica), r) in plan.iter().zip(&results) {
        let Some(d) = r.data() else { continue };
        for wi in 0..(d.len() / 8) as u64 {
            let observed = read_u64(d, wi as usize * 8);
            let e = words.entry((*block, wi)).or_insert((*class, u64::MAX, Vec::new()));
            e.1 &= observed;
            e.2.push((replica.offset_by(wi * 8), observed));
        }
    }
    words.retain(|_, (_, bits, _)| *bits != 0);
    if words.is_empty() {
        return 0;
    }
    // Clear the agreed bits on every replica. Concurrent frees only add
    // other bits, so a failed CAS is retried against the value it saw.
    let mut pending: Vec<(RemoteAddr, u64, u64)> =
        words.values().flat_map(|(_, bits, obs)| obs.iter().map(move |(a, seen)| (*a, *seen, *bits))).collect();
    let mut invalidate = ctx.with(|w| {
        let mut ops = Vec::new();
        for ((block, wi), (class, bits, _)) in &words {
            let layout = BlockLayout::new(&w.cfg, *class);
            for b in 0..64 {
                if bits & (1 << b) != 0 {
                    let obj = layout.object(*block, wi * 64 + b);
                    for replica in alive_replicas(&w.fabric, obj) {
                        ops.push(FabricOp::Write { addr: replica.offset_by(layout.class_size - 1), data: vec![0] });
                    }
                }
            }
        }
        ops
    });
    while !pending.is_empty() {
        let mut ops: Vec<FabricOp> = pending
            .iter()
            .map(|(addr, seen, bits)| FabricOp::Cas { addr: *addr, expected: *seen, swap: seen & !bits })
            .collect();
        let cas_count = ops.len();
        ops.append(&mut invalidate);
        let results = ctx.phase(ops).await;
        let mut retry = Vec::new();
        for ((addr, seen, bits), r) in pending.iter().zip(&results[..cas_count]) {
            match r.word() {
                Some(cur) if cur != *seen => retry.push((*addr, cur, *bits)),
                _ => {}
            }
        }
        pending = retry;
    }
    let mut reclaimed = 0;
    with_alloc(ctx, |a, cfg| {
        for ((block, wi), (class, bits, _)) in &words {
            let layout = BlockLayout::new(cfg, *class);
            for b in 0..64 {
                if bits & (1 << b) != 0 {
                    a.free[*class as usize].push_back(layout.object(*block, wi * 64 + b));
                    reclaimed += 1;
                }
            }
        }
    });
    if reclaimed > 0 {
        let e = ctx.event("RECLAIM").with("count", reclaimed);
        ctx.emit(e);
    }
    reclaimed
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{RandomChooser, Sim, Stop};

    fn cfg() -> Config {
        Config { num_regions: 4, ..Config::default() }
    }

    fn sim(cfg: Config) -> Sim {
        let (fabric, index_nodes) = build_fabric(&cfg).unwrap();
        Sim::new(World::new(cfg, fabric, index_nodes), Box::new(RandomChooser::new(5)))
    }

    #[test]
    fn placement_is_deterministic_and_distinct() {
        let m = RegionMap::new(5, 3, 16, 1).unwrap();
        for region in 0..32 {
            let p = m.place_region(region);
            assert_eq!(p.len(), 3);
            let mut d = p.clone();
            d.sort();
            d.dedup();
            assert_eq!(d.len(), 3);
            assert_eq!(p, m.place_region(region));
        }
        let one = RegionMap::new(1, 1, 4, 1).unwrap();
        assert_eq!(one.place_region(9), vec![NodeId(0)]);
        assert!(RegionMap::new(2, 3, 4, 1).is_err());
    }

    #[test]
    fn placement_follows_ring_successors() {
        let m = RegionMap::new(5, 3, 16, 1).unwrap();
        for region in 0..16 {
            let point = hash_u64(1, u64::from(region));
            let mut expect = Vec::new();
            for (_, n) in m.ring.range(point..).chain(m.ring.range(..point)) {
                if !expect.contains(n) {
                    expect.push(*n);
                }
            }
            expect.truncate(3);
            assert_eq!(m.place_region(region), expect);
        }
    }

    #[test]
    fn allocation_order_and_growth() {
        let cfg = cfg();
        let mut s = sim(cfg.clone());
        s.spawn(ActorId(1), |ctx| async move {
            init_client(&ctx).await.unwrap();
            let class = ctx.cfg().class_for(100).unwrap();
            assert_eq!(ctx.cfg().class_size(class), 128);
            let layout = BlockLayout::new(&ctx.cfg(), class);
            let a = alloc(&ctx, class).await.unwrap();
            let b = alloc(&ctx, class).await.unwrap();
            assert_eq!(a.next, b.addr);
            assert_eq!(b.prev, a.addr);
            assert_eq!(a.prev, RemoteAddr::NULL);
            assert_eq!((a.seq, b.seq), (1, 2));
            for _ in 2..layout.objects + 3 {
                alloc(&ctx, class).await.unwrap();
            }
            let blocks = ctx.with(|w| w.allocs[&ctx.actor].blocks.iter().filter(|(_, c)| *c == class).count());
            assert_eq!(blocks, 2);
        });
        assert_eq!(s.run(), Stop::Quiescent);
        let w = s.into_world();
        for (block, _) in &w.allocs[&ActorId(1)].blocks {
            for replica in replicas(&w.fabric, *block) {
                assert_eq!(w.fabric.block_owner(replica.node(), *block).map(|o| o.0), Some(ActorId(1)));
            }
        }
    }

    #[test]
    fn free_and_reclaim() {
        let mut s = sim(cfg());
        s.spawn(ActorId(2), |ctx| async move {
            init_client(&ctx).await.unwrap();
            assert_eq!(reclaim_scan(&ctx).await, 0);
            let before = ctx.with(|w| w.fabric.rtts(ctx.actor));
            let mut objs = Vec::new();
            for c in [0u8, 0, 3] {
                objs.push(alloc(&ctx, c).await.unwrap());
            }
            // Freed by another client: same effect.
            let other = ctx.clone();
            for o in &objs {
                remote_free(&other, o.addr, o.class).await;
            }
            let listed = ctx.with(|w| w.allocs[&ctx.actor].free_listed());
            assert_eq!(reclaim_scan(&ctx).await, 3);
            assert_eq!(ctx.with(|w| w.allocs[&ctx.actor].free_listed()), listed + 3);
            assert_eq!(reclaim_scan(&ctx).await, 0);
            let after = ctx.with(|w| w.fabric.rtts(ctx.actor));
            assert_eq!(after - before, 3 + 2 + 1);
        });
        assert_eq!(s.run(), Stop::Quiescent);
    }

    #[test]
    fn empty_scan_issues_only_reads() {
        let mut s = sim(cfg());
        s.world_mut().trace_fabric = true;
        s.spawn(ActorId(0), |ctx| async move {
            init_client(&ctx).await.unwrap();
            let n = ctx.with(|w| w.trace.len());
            reclaim_scan(&ctx).await;
            let kinds: Vec<String> = ctx.with(|w| w.trace[n..].iter().map(|e| e.kind.clone()).collect());
            assert!(kinds.iter().all(|k| k == "READ"), "{kinds:?}");
        });
        assert_eq!(s.run(), Stop::Quiescent);
    }

    #[test]
    fn bitmap_bits_follow_object_index() {
        let cfg = cfg();
        let layout = BlockLayout::new(&cfg, 0);
        let block = RemoteAddr::new(NodeId(1), 0x10000);
        let obj = layout.object(block, 5);
        assert_eq!(layout.index_of(block, obj), 5);
        assert_eq!(layout.bit(block, 5), (block, 5));
        assert_eq!(layout.bit(block, 70), (block.offset_by(8), 6));
    }
}
