//! Master process: lease-based membership, MN-crash resolution and client
//! recovery.

use std::collections::BTreeMap;

use crate::client::{clear_backups, staged_from, Client, Staged};
use crate::event::Event;
use crate::fabric::{read_u64, ActorId, FabricOp, Fence, NodeId, OpResult, RemoteAddr, Word};
use crate::index::{group_len, locate, parse_group, slot_offset, SlotWord};
use crate::memalloc::{self, alive_replicas, redo_free, replicas, Allocator, BlockLayout};
use crate::oplog::{
    self, entry_from_image, traverse, EntryState, LogEntry, Opcode, ENTRY_LEN, FLAG_INVALID, MASTER_SENTINEL,
};
use crate::sim::{Ctx, World};
use crate::slotproto::{current_slots, emit_install, emit_void, refresh_view};

/// Client side of the fail-query RPC: block until the master has resolved a
/// reconfiguration newer than the caller's epoch, then return the word it
/// decided for the slot at `offset`.
pub async fn fail_query(ctx: &Ctx, offset: u64) -> Word {
    let epoch = ctx.epoch();
    ctx.wait_until(move |w| w.decisions.range(epoch + 1..).next().is_some()).await;
    let actor = ctx.actor;
    let (reply, decided_in) = ctx.with(|w| {
        let (e, d) = w.decisions.range(epoch + 1..).next().unwrap();
        let reply = d.get(&offset).copied().unwrap_or(0);
        let e = *e;
        w.stats.fail_queries += 1;
        w.fabric.charge_rtt(actor);
        (reply, e)
    });
    let e: Event = ctx
        .event("FAIL_QUERY")
        .with("slot", format!("{offset:#x}"))
        .with("epoch", decided_in)
        .with_word("reply", reply);
    ctx.emit(e);
    reply
}

/// A crashed memory node whose lease has lapsed and that is not handled yet.
fn due_node(w: &World) -> Option<NodeId> {
    w.crashed_mns.iter().find(|(n, t)| !w.handled_mns.contains(n) && w.tick >= t + w.cfg.lease_ticks).map(|(n, _)| *n)
}

/// A crashed client incarnation whose lease has lapsed and that has not
/// been recovered. Waits until every crashed node is handled.
fn due_client(w: &World) -> Option<ActorId> {
    if w.crashed_mns.iter().any(|(n, _)| !w.handled_mns.contains(n)) {
        return None;
    }
    w.actors
        .iter()
        .filter(|(a, _)| **a != ActorId::MASTER)
        .find(|(a, s)| {
            !s.alive
                && s.crashed_at.is_some_and(|t| w.tick >= t + w.cfg.lease_ticks)
                && !w.recovered.contains(&(**a, s.incarnation))
        })
        .map(|(a, _)| *a)
}

fn nothing_left(w: &World) -> bool {
    let unhandled_node = w.crashed_mns.iter().any(|(n, _)| !w.handled_mns.contains(n));
    let unrecovered = w.actors.iter().any(|(a, s)| {
        *a != ActorId::MASTER && !s.alive && s.crashed_at.is_some() && !w.recovered.contains(&(*a, s.incarnation))
    });
    !w.clients_running() && !unhandled_node && !unrecovered
}

/// The master's task: handle node crashes, then recover crashed clients,
/// until the clients are finished and nothing is pending.
pub async fn run_master(ctx: Ctx) {
    loop {
        ctx.wait_until(|w| due_node(w).is_some() || due_client(w).is_some() || nothing_left(w)).await;
        if let Some(node) = ctx.with(|w| due_node(w)) {
            handle_node_crash(&ctx, node).await;
            continue;
        }
        if let Some(cid) = ctx.with(|w| due_client(w)) {
            let inc = ctx.with(|w| w.actor(cid).incarnation);
            ctx.with(|w| {
                w.recovered.insert((cid, inc));
            });
            ctx.spawn(cid, recover_client);
            continue;
        }
        return;
    }
}

/// Fence the index, agree on one value per slot from the survivors, commit
/// the chosen writes, and install a view without the crashed node.
pub async fn handle_node_crash(ctx: &Ctx, node: NodeId) {
    let (view, epoch, geo) =
        ctx.with(|w| (w.membership.index_nodes.clone(), w.membership.epoch, w.fabric.geometry().clone()));
    if !view.contains(&node) {
        ctx.with(|w| {
            w.handled_mns.insert(node);
        });
        return;
    }
    let new_epoch = epoch + 1;
    ctx.with(|w| {
        w.membership.preparing = true;
        w.fabric.set_fence(Some(Fence {
            start: geo.index_base,
            end: geo.index_base + geo.index_len,
            epoch: new_epoch,
        }));
        w.actor_mut(ActorId::MASTER).epoch = new_epoch;
    });
    let e = ctx.event("PREPARE").with("node", node).with("epoch", new_epoch);
    ctx.emit(e);
    // Outstanding leases of the old view run out.
    let until = ctx.tick() + ctx.cfg().lease_ticks;
    ctx.wait_until(move |w| w.tick >= until).await;

    let alive: Vec<NodeId> = ctx.with(|w| view.iter().copied().filter(|n| w.fabric.is_alive(*n)).collect());
    if alive.is_empty() {
        ctx.report_liveness(format!("every index replica is gone after {node} crashed"));
        crate::sim::Halt.await;
    }
    let reads = view
        .iter()
        .map(|n| FabricOp::Read { addr: RemoteAddr::new(*n, geo.index_base), len: geo.index_len as usize })
        .collect();
    let images: Vec<Option<Vec<Word>>> = ctx.phase(reads).await.iter().map(|r| r.data().map(parse_group)).collect();

    // Slot value: the first alive backup's, or the primary's if none is left.
    let slots = (geo.index_len / 8) as usize;
    let order: Vec<usize> = (1..view.len()).chain(std::iter::once(0)).collect();
    let mut decided: BTreeMap<u64, Word> = BTreeMap::new();
    // Words a surviving primary held before a decision replaced them.
    let mut replaced: BTreeMap<u64, Word> = BTreeMap::new();
    let mut repairs = Vec::new();
    let mut differing = 0;
    for i in 0..slots {
        let offset = geo.index_base + i as u64 * 8;
        let Some(chosen) = order.iter().find_map(|r| images[*r].as_ref().map(|img| img[i])) else { continue };
        let mut differs = false;
        for (r, img) in images.iter().enumerate() {
            if let Some(img) = img {
                if img[i] != chosen {
                    differs = true;
                    repairs.push(FabricOp::Cas {
                        addr: RemoteAddr::new(view[r], offset),
                        expected: img[i],
                        swap: chosen,
                    });
                }
            }
        }
        differing += usize::from(differs);
        // Every settled value is reported: agreeing survivors may still carry
        // a write whose primary CAS never landed.
        if differs || chosen != 0 {
            let e = ctx.event("DECIDE").at(RemoteAddr::new(view[0], offset)).with_word("word", chosen);
            ctx.emit(e);
        }
        if chosen != 0 {
            decided.insert(offset, chosen);
            if let Some(img) = &images[0] {
                if img[i] != chosen {
                    replaced.insert(offset, img[i]);
                }
            }
        }
    }
    if !repairs.is_empty() {
        ctx.phase(repairs).await;
    }
    commit_chosen(ctx, &decided, &replaced).await;

    let new_view: Vec<NodeId> = view.iter().copied().filter(|n| *n != node).collect();
    ctx.with(|w| {
        w.decisions.insert(new_epoch, decided);
        w.membership.index_nodes = new_view.clone();
        w.membership.epoch = new_epoch;
        w.membership.preparing = false;
        w.handled_mns.insert(node);
    });
    let nodes: Vec<String> = new_view.iter().map(ToString::to_string).collect();
    let e =
        ctx.event("INSTALL_VIEW").with("epoch", new_epoch).with("nodes", nodes.join("+")).with("decided", differing);
    ctx.emit(e);
}

/// Commit every uncommitted log entry whose object was chosen for a slot,
/// naming the word it replaced, or the master sentinel when the primary
/// that held it is gone.
async fn commit_chosen(ctx: &Ctx, decided: &BTreeMap<u64, Word>, replaced: &BTreeMap<u64, Word>) {
    let cfg = ctx.cfg();
    let mut targets = Vec::new();
    let mut reads = Vec::new();
    ctx.with(|w| {
        for (offset, word) in decided {
            let Some(s) = SlotWord::decode(*word) else { continue };
            let size = cfg.class_size(s.class());
            let Some(at) = alive_replicas(&w.fabric, s.ptr).first().copied() else { continue };
            reads.push(FabricOp::Read { addr: at.offset_by(size - ENTRY_LEN as u64), len: ENTRY_LEN });
            targets.push((s.ptr, size, replaced.get(offset).copied().unwrap_or(MASTER_SENTINEL)));
        }
    });
    if reads.is_empty() {
        return;
    }
    let res = ctx.phase(reads).await;
    let mut commits = Vec::new();
    ctx.with(|w| {
        for ((ptr, size, old), r) in targets.iter().zip(&res) {
            let Some(d) = r.data() else { continue };
            let entry = LogEntry::decode(d);
            if entry.used && !entry.is_committed() {
                for rep in replicas(&w.fabric, *ptr) {
                    let (addr, data) = oplog::commit_write(rep, *size, *old);
                    commits.push(FabricOp::Write { addr, data });
                }
            }
        }
    });
    if !commits.is_empty() {
        ctx.phase(commits).await;
    }
}

/// Recovery of a crashed client, run as a fresh incarnation of it: rebuild
/// its allocator from the blocks it owns, repair its newest log entries,
/// and reclaim everything it had freed.
pub async fn recover_client(ctx: Ctx) {
    let cid = ctx.actor;
    refresh_view(&ctx).await;
    let cfg = ctx.cfg();
    let nodes = ctx.with(|w| w.fabric.alive_nodes());
    let finds = nodes.iter().map(|n| FabricOp::FindBlocks { node: *n, owner: cid }).collect();
    let mut blocks: BTreeMap<RemoteAddr, u8> = BTreeMap::new();
    for r in ctx.phase(finds).await {
        if let OpResult::Blocks(found) = r {
            blocks.extend(found);
        }
    }

    // One read per block, plus every alive bitmap replica.
    let mut reads = Vec::new();
    let mut plan: Vec<(RemoteAddr, u8, usize, Vec<usize>)> = Vec::new();
    ctx.with(|w| {
        for (block, class) in &blocks {
            let layout = BlockLayout::new(&cfg, *class);
            let alive = alive_replicas(&w.fabric, *block);
            reads.push(FabricOp::Read { addr: alive.first().copied().unwrap_or(*block), len: cfg.block_size as usize });
            let image_at = reads.len() - 1;
            let mut bitmaps = Vec::new();
            for rep in alive {
                reads.push(FabricOp::Read { addr: rep, len: (layout.bitmap_words() * 8) as usize });
                bitmaps.push(reads.len() - 1);
            }
            plan.push((*block, *class, image_at, bitmaps));
        }
    });
    let mut res = ctx.phase(reads).await;
    // A replica can die while its image is read; retry on the survivors.
    loop {
        let retry: Vec<(usize, RemoteAddr)> = plan
            .iter()
            .filter(|(_, _, at, _)| res[*at].data().is_none())
            .filter_map(|(block, _, at, _)| {
                ctx.with(|w| alive_replicas(&w.fabric, *block).first().copied()).map(|a| (*at, a))
            })
            .collect();
        if retry.is_empty() {
            break;
        }
        let ops = retry.iter().map(|(_, addr)| FabricOp::Read { addr: *addr, len: cfg.block_size as usize }).collect();
        for ((at, _), r) in retry.iter().zip(ctx.phase(ops).await) {
            res[*at] = r;
        }
    }
    let mut per_class: BTreeMap<u8, Vec<(RemoteAddr, Vec<u8>)>> = BTreeMap::new();
    let mut pending: BTreeMap<RemoteAddr, bool> = BTreeMap::new();
    let mut alloc = Allocator::new(cid, cfg.size_classes.len());
    for (block, class, image_at, bitmaps) in &plan {
        let layout = BlockLayout::new(&cfg, *class);
        let image = res[*image_at].data().map(<[u8]>::to_vec).unwrap_or_default();
        let mut bits = vec![0u64; layout.bitmap_words() as usize];
        for d in bitmaps.iter().filter_map(|i| res[*i].data()) {
            for (wi, word) in bits.iter_mut().enumerate() {
                *word |= read_u64(d, wi * 8);
            }
        }
        alloc.blocks.push((*block, *class));
        alloc.objects_granted += layout.objects;
        for i in 0..layout.objects {
            let obj = layout.object(*block, i);
            let start = (obj.offset() - block.offset()) as usize;
            let img = image.get(start..start + layout.class_size as usize).map(<[u8]>::to_vec).unwrap_or_default();
            pending.insert(obj, bits[(i / 64) as usize] >> (i % 64) & 1 == 1);
            if img.len() == layout.class_size as usize {
                per_class.entry(*class).or_default().push((obj, img));
            }
        }
    }

    // Free lists: objects that are neither pending nor holding a live entry.
    let mut unsettled = Vec::new();
    for (class, objects) in &per_class {
        let c = *class as usize;
        let traced = traverse(objects);
        let tail = traced.last();
        let mut free: Vec<RemoteAddr> = objects
            .iter()
            .filter(|(a, img)| !pending[a] && (oplog::object_seq(img) == 0 || !entry_from_image(img).used))
            .map(|(a, _)| *a)
            .collect();
        if let Some(t) = tail {
            if let Some(p) = free.iter().position(|a| *a == t.entry.next) {
                let next = free.remove(p);
                free.insert(0, next);
            }
            alloc.last[c] = t.addr;
            alloc.next_seq[c] = t.seq + 1;
            let needs_work = match t.state {
                EntryState::Uncommitted => !pending[&t.addr],
                EntryState::Committed => t.object.as_ref().is_some_and(|o| !o.done),
                EntryState::Unused | EntryState::IncompleteEntry => false,
            };
            if needs_work {
                unsettled.push((*class, t.clone()));
            }
        }
        alloc.free[c] = free.into();
    }
    ctx.with(|w| {
        w.allocs.insert(cid, alloc);
    });

    let mut client = Client::new(ctx.clone()).without_crashes();
    for (class, t) in unsettled {
        let Some(obj) = t.object.clone() else { continue };
        let Some(staged) = staged_from(&cfg, t.addr, class, &obj) else { continue };
        let id = ctx.with(|w| w.fresh_op_id());
        let mut state = t.state;
        let mut old_value = t.entry.old_value;
        if state == EntryState::Uncommitted {
            // A view change may have installed and committed the write
            // since the log was read.
            refresh_view(&ctx).await;
            if let Some(entry) = read_entry(&ctx, t.addr, staged.class_size).await.filter(LogEntry::is_committed) {
                state = EntryState::Committed;
                old_value = entry.old_value;
            }
        }
        match state {
            EntryState::Uncommitted => {
                let status = match staged.opcode {
                    Opcode::Insert => client.insert_staged(id, &obj.key, &obj.value, staged).await,
                    Opcode::Update => client.update_staged(id, &obj.key, staged).await,
                    Opcode::Delete => client.delete_staged(id, &obj.key, staged).await,
                };
                let e =
                    ctx.event("REDO").at(t.addr).with("id", id).with("op", staged.opcode as u8).with("status", status);
                ctx.emit(e);
            }
            EntryState::Committed => {
                finish_committed(&ctx, &obj.key, staged, old_value, obj.is_void()).await;
                let e = ctx.event("FINISH").at(t.addr).with_word("old", old_value);
                ctx.emit(e);
            }
            _ => {}
        }
    }
    let reclaimed = memalloc::reclaim_scan(&ctx).await;
    ctx.with(|w| {
        let tick = w.tick;
        w.stats.recoveries.push((cid, tick));
    });
    let e = ctx.event("RECOVERY").with("client", cid).with("reclaimed", reclaimed);
    ctx.emit(e);
}

/// The log entry of the object at `obj`, from its first alive replica.
async fn read_entry(ctx: &Ctx, obj: RemoteAddr, class_size: u64) -> Option<LogEntry> {
    let at = ctx.with(|w| alive_replicas(&w.fabric, obj).first().copied())?;
    let r = ctx.phase(vec![FabricOp::Read { addr: at.offset_by(class_size - ENTRY_LEN as u64), len: ENTRY_LEN }]).await;
    r[0].data().map(LogEntry::decode)
}

/// Complete a committed write whose background phase never ran: install it
/// on the primary if it stopped before that CAS, then do the winner's
/// clean-up. A withdrawn insert is cleared from its slot like a tombstone.
async fn finish_committed(ctx: &Ctx, key: &[u8], s: Staged, old_value: Word, void: bool) {
    let (cfg, geo) = ctx.with(|w| (w.cfg.clone(), w.fabric.geometry().clone()));
    let mut ops = Vec::new();
    if old_value != MASTER_SENTINEL {
        let loc = locate(&cfg, key);
        let base = slot_offset(&geo, &cfg, loc.group, 0);
        let slots = current_slots(ctx, base);
        let len = group_len(&cfg);
        let reads = slots.all().map(|addr| FabricOp::Read { addr, len }).collect();
        let views: Vec<Option<Vec<Word>>> = ctx.phase(reads).await.iter().map(|r| r.data().map(parse_group)).collect();
        let at = (0..cfg.slots_per_key as usize).find(|p| views.iter().flatten().any(|v| v[*p] == s.word));
        if let Some(p) = at {
            let offset = base + p as u64 * 8;
            let primary = views[0].as_ref().map(|v| v[p]);
            if primary == Some(old_value) {
                let addr = current_slots(ctx, offset).primary;
                let r = ctx.phase(vec![FabricOp::Cas { addr, expected: old_value, swap: s.word }]).await;
                if r[0].word() == Some(old_value) {
                    if void {
                        emit_void(ctx, addr, 0, old_value, s.word);
                    } else {
                        emit_install(ctx, addr, 0, old_value, s.word, Some(&s.commit()));
                    }
                }
            }
            if s.opcode == Opcode::Delete || void {
                clear_backups(ctx, offset, s.word).await;
                let addr = current_slots(ctx, offset).primary;
                ops.push(FabricOp::Cas { addr, expected: s.word, swap: 0 });
            }
        }
        if let Some(old) = SlotWord::decode(old_value) {
            // The invalid flag lands before the free, so a clear flag means
            // the free never started and the owner cannot have reclaimed it.
            let flags = oplog::flags_addr(old.ptr);
            let at = ctx.with(|w| alive_replicas(&w.fabric, flags).first().copied().unwrap_or(flags));
            let r = ctx.phase(vec![FabricOp::Read { addr: at, len: 1 }]).await;
            let invalid = r[0].data().is_some_and(|d| d[0] & FLAG_INVALID != 0);
            if !invalid {
                ctx.phase(writes(ctx, flags, &[FLAG_INVALID])).await;
            }
            redo_free(ctx, old.ptr, old.class(), invalid).await;
        }
    }
    if s.opcode == Opcode::Delete || void {
        redo_free(ctx, s.addr, s.class, false).await;
    }
    ops.extend(writes(ctx, oplog::done_addr(s.addr), &[1]));
    ctx.phase(ops).await;
}

fn writes(ctx: &Ctx, obj: RemoteAddr, data: &[u8]) -> Vec<FabricOp> {
    ctx.with(|w| {
        replicas(&w.fabric, obj).into_iter().map(|addr| FabricOp::Write { addr, data: data.to_vec() }).collect()
    })
}
