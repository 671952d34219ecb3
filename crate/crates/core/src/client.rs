//! Client request paths over the replicated index.
//!
//! Every write stages a fresh object carrying its log entry, installs a new
//! slot word through [`slot_write`], and commits the entry in the phase
//! before the primary CAS.

use crate::config::Config;
use crate::event::{CrashPoint, OpKind, Status};
use crate::fabric::{FabricOp, Geometry, OpResult, RemoteAddr, Word};
use crate::index::{
    first_empty, fp_candidates, group_len, locate, match_object, parse_group, slot_offset, IndexCache, KeyLocation,
    ObjectMatch, Route, SlotWord,
};
use crate::memalloc::{self, alive_replicas, free_ops, replicas};
use crate::oplog::{self, encode_object, KvObject, LogEntry, Opcode, FLAG_INVALID, FLAG_TOMBSTONE, FLAG_VOID};
use crate::sim::Ctx;
use crate::slotproto::{
    current_slots, read_without_primary, refresh_view, resume_write, slot_write, slot_write_watched, CommitTarget,
    Held, Progress, RuleOutcome, WriteParams,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub op: OpKind,
    pub key: Vec<u8>,
    pub value: Vec<u8>,
}

impl Request {
    pub fn search(key: &[u8]) -> Self {
        Request { op: OpKind::Search, key: key.to_vec(), value: Vec::new() }
    }

    pub fn insert(key: &[u8], value: &[u8]) -> Self {
        Request { op: OpKind::Insert, key: key.to_vec(), value: value.to_vec() }
    }

    pub fn update(key: &[u8], value: &[u8]) -> Self {
        Request { op: OpKind::Update, key: key.to_vec(), value: value.to_vec() }
    }

    pub fn delete(key: &[u8]) -> Self {
        Request { op: OpKind::Delete, key: key.to_vec(), value: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Response {
    pub status: Status,
    pub value: Option<Vec<u8>>,
    /// Round trips between INVOKE and RESPOND.
    pub rtts: u32,
    /// How the request was served (see [`Outcome::path`]).
    pub path: &'static str,
    pub rule: Option<RuleOutcome>,
}

/// An object written for the current request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Staged {
    pub addr: RemoteAddr,
    pub class: u8,
    pub class_size: u64,
    pub opcode: Opcode,
    pub word: Word,
    pub seq: u64,
}

impl Staged {
    pub fn commit(&self) -> CommitTarget {
        CommitTarget { obj: self.addr, class_size: self.class_size, seq: self.seq }
    }
}

enum Lookup {
    Found { offset: u64, word: Word, object: KvObject },
    Absent,
}

/// Another insert of the same key seen by a round winner.
enum Rival {
    None,
    /// Already installed: the key exists.
    Present,
    /// In progress at an earlier slot: withdraw and retry.
    Ahead,
}

struct Outcome {
    status: Status,
    value: Option<Vec<u8>>,
    /// `hit`, `stale`, `miss`, `empty` for located keys, `fast`/`probe` for
    /// inserts, `slow` when a retry or the failure path was involved.
    path: &'static str,
    rule: Option<RuleOutcome>,
    /// Phases run after the response, in order.
    background: Vec<Vec<FabricOp>>,
}

impl Outcome {
    fn new(status: Status, path: &'static str) -> Self {
        Outcome { status, value: None, path, rule: None, background: Vec::new() }
    }
}

pub struct Client {
    ctx: Ctx,
    cfg: Config,
    geo: Geometry,
    pub cache: IndexCache,
    /// Fire planned crashes. Off for recovery work.
    inject: bool,
    /// The current request hit a FAIL and took a fallback path.
    degraded: std::cell::Cell<bool>,
}

impl Client {
    /// Wrap an actor whose allocator is already set up.
    pub fn new(ctx: Ctx) -> Self {
        let (cfg, geo) = ctx.with(|w| (w.cfg.clone(), w.fabric.geometry().clone()));
        let cache = IndexCache::new(cfg.cache_capacity, cfg.cache_threshold);
        Client { ctx, cfg, geo, cache, inject: true, degraded: Default::default() }
    }

    /// Set up the allocator, then wrap the actor.
    pub async fn start(ctx: Ctx) -> crate::Result<Self> {
        memalloc::init_client(&ctx).await?;
        Ok(Client::new(ctx))
    }

    /// A client that never fires planned crashes.
    pub fn without_crashes(mut self) -> Self {
        self.inject = false;
        self
    }

    pub fn ctx(&self) -> &Ctx {
        &self.ctx
    }

    /// Run one request end to end: INVOKE, the request phases, RESPOND,
    /// then the background phase.
    pub async fn execute(&mut self, req: &Request) -> Response {
        let ctx = self.ctx.clone();
        let me = ctx.actor;
        if memalloc::maintain(&ctx).await.is_err() {
            ctx.report_liveness(format!("{me} could not refill its free lists"));
        }
        let id = ctx.with(|w| w.fresh_op_id());
        let mut inv = ctx.event("INVOKE").with("id", id).with("op", req.op).with_bytes("key", &req.key);
        if matches!(req.op, OpKind::Insert | OpKind::Update) {
            inv = inv.with_bytes("value", &req.value);
        }
        ctx.emit(inv);
        let start = ctx.with(|w| w.fabric.rtts(me));
        if req.op.is_write() {
            refresh_view(&ctx).await;
            ctx.with(|w| w.note_write_start(me));
        } else {
            ctx.with(|w| {
                if !w.membership.preparing {
                    let e = w.membership.epoch;
                    w.actor_mut(me).epoch = e;
                }
            });
        }
        self.degraded.set(false);
        let mut out = match req.op {
            OpKind::Search => self.search(&req.key).await,
            OpKind::Insert => self.insert(id, &req.key, &req.value, None).await,
            OpKind::Update => self.update(id, &req.key, &req.value, None).await,
            OpKind::Delete => self.delete(id, &req.key, None).await,
        };
        if self.degraded.get() {
            out.path = "slow";
        }
        let rtts = (ctx.with(|w| w.fabric.rtts(me)) - start) as u32;
        let mut e = ctx
            .event("RESPOND")
            .with("id", id)
            .with("op", req.op)
            .with("status", out.status)
            .with("rtts", rtts)
            .with("path", out.path);
        if let Some(v) = &out.value {
            e = e.with_bytes("value", v);
        }
        if let Some(r) = out.rule {
            e = e.with("rule", r);
        }
        ctx.emit(e);
        ctx.with(|w| {
            *w.stats.rtt_hist.entry((req.op, rtts)).or_default() += 1;
            w.stats.completed += 1;
        });
        for ops in out.background {
            ctx.phase(ops).await;
        }
        if req.op.is_write() {
            ctx.with(|w| w.note_write_done(me, req.op));
        }
        Response { status: out.status, value: out.value, rtts, path: out.path, rule: out.rule }
    }

    // ---- staging and object helpers ----

    /// Allocate and encode an object. Returns the staged object and its image.
    async fn stage(&mut self, opcode: Opcode, key: &[u8], value: &[u8]) -> Option<(Staged, Vec<u8>)> {
        let len = oplog::object_len(key.len(), value.len());
        let class = self.cfg.class_for(len).ok()?;
        let a = memalloc::alloc(&self.ctx, class).await.ok()?;
        let class_size = self.cfg.class_size(class);
        let entry = if self.cfg.logging { LogEntry::new(opcode, a.next, a.prev) } else { LogEntry::default() };
        let tomb = opcode == Opcode::Delete;
        let flags = if tomb { FLAG_TOMBSTONE } else { 0 };
        let image = encode_object(class_size as usize, key, value, flags, a.seq, &entry);
        let fp = locate(&self.cfg, key).fp;
        let word = SlotWord::new(fp, class, a.addr, tomb).encode();
        Some((Staged { addr: a.addr, class, class_size, opcode, word, seq: a.seq }, image))
    }

    fn replica_writes(&self, obj: RemoteAddr, data: &[u8]) -> Vec<FabricOp> {
        self.ctx.with(|w| {
            replicas(&w.fabric, obj).into_iter().map(|addr| FabricOp::Write { addr, data: data.to_vec() }).collect()
        })
    }

    /// Object writes for phase one. A planned c0 crash persists every byte
    /// but the one holding `used`, then stops the client.
    async fn object_writes(&self, op: OpKind, s: &Staged, image: &[u8]) -> Vec<FabricOp> {
        if self.inject && self.ctx.crash_due(CrashPoint::C0, op) {
            let torn = self.replica_writes(s.addr, &image[..image.len() - 1]);
            self.ctx.phase(torn).await;
            self.ctx.crash_self().await;
        }
        self.replica_writes(s.addr, image)
    }

    /// Crash after the primary CAS if a c3 crash is planned.
    async fn after_install(&self, op: OpKind) {
        if self.inject && self.ctx.crash_due(CrashPoint::C3, op) {
            self.ctx.crash_self().await;
        }
    }

    /// Reset `used` and free the object (a loser or a refused request).
    fn cancel_ops(&self, s: &Staged) -> Vec<FabricOp> {
        let mut ops: Vec<FabricOp> = self.ctx.with(|w| {
            replicas(&w.fabric, s.addr)
                .into_iter()
                .map(|addr| {
                    let (a, data) = oplog::clear_used_write(addr, s.class_size, s.opcode as u8);
                    FabricOp::Write { addr: a, data }
                })
                .collect()
        });
        ops.extend(self.ctx.with(|w| free_ops(w, s.addr, s.class)));
        ops
    }

    async fn cancel(&self, s: &Staged) {
        self.ctx.phase(self.cancel_ops(s)).await;
    }

    /// Winner's background work: invalidate the replaced object, then free
    /// it and mark the new one as settled. Recovery relies on the invalid
    /// flag landing before the free.
    fn settle_ops(&self, s: &Staged, replaced: Word) -> Vec<Vec<FabricOp>> {
        let mut phases = Vec::new();
        let mut last = Vec::new();
        if let Some(old) = SlotWord::decode(replaced) {
            phases.push(self.replica_writes(oplog::flags_addr(old.ptr), &[FLAG_INVALID]));
            last.extend(self.ctx.with(|w| free_ops(w, old.ptr, old.class())));
        }
        last.extend(self.replica_writes(oplog::done_addr(s.addr), &[1]));
        phases.push(last);
        phases
    }

    fn read_object_op(&self, ptr: RemoteAddr, class: u8) -> FabricOp {
        let len = self.cfg.class_size(class) as usize;
        let addr = self.ctx.with(|w| alive_replicas(&w.fabric, ptr).first().copied().unwrap_or(ptr));
        FabricOp::Read { addr, len }
    }

    /// Read objects from their first alive replica, retrying failures once.
    async fn read_objects(&self, ptrs: &[(RemoteAddr, u8)]) -> Vec<Option<Vec<u8>>> {
        if ptrs.is_empty() {
            return Vec::new();
        }
        let ops = ptrs.iter().map(|(p, c)| self.read_object_op(*p, *c)).collect();
        let res = self.ctx.phase(ops).await;
        let mut out: Vec<Option<Vec<u8>>> = res.iter().map(|r| r.data().map(<[u8]>::to_vec)).collect();
        let missing: Vec<usize> = (0..out.len()).filter(|i| out[*i].is_none()).collect();
        if !missing.is_empty() {
            self.degraded.set(true);
            let ops = missing.iter().map(|i| self.read_object_op(ptrs[*i].0, ptrs[*i].1)).collect();
            let res = self.ctx.phase(ops).await;
            for (i, r) in missing.into_iter().zip(res) {
                out[i] = r.data().map(<[u8]>::to_vec);
            }
        }
        out
    }

    // ---- index lookups ----

    fn group_offset(&self, loc: &KeyLocation) -> u64 {
        slot_offset(&self.geo, &self.cfg, loc.group, 0)
    }

    fn group_read_op(&self, loc: &KeyLocation) -> FabricOp {
        let slots = current_slots(&self.ctx, self.group_offset(loc));
        FabricOp::Read { addr: slots.primary, len: group_len(&self.cfg) }
    }

    /// Group contents from a phase result, falling back to the replicas.
    async fn group_words(&self, loc: &KeyLocation, r: &OpResult) -> Vec<Word> {
        match r.data() {
            Some(d) => parse_group(d),
            None => {
                self.degraded.set(true);
                self.group_without_primary(loc).await
            }
        }
    }

    /// Read the group from every replica; positions the alive replicas
    /// disagree on are resolved by the master.
    async fn group_without_primary(&self, loc: &KeyLocation) -> Vec<Word> {
        let base = self.group_offset(loc);
        let slots = current_slots(&self.ctx, base);
        let len = group_len(&self.cfg);
        let ops = slots.all().map(|addr| FabricOp::Read { addr, len }).collect();
        let res = self.ctx.phase(ops).await;
        if let Some(d) = res[0].data() {
            return parse_group(d);
        }
        let views: Vec<Vec<Word>> = res.iter().filter_map(|r| r.data().map(parse_group)).collect();
        let mut words = Vec::with_capacity(self.cfg.slots_per_key as usize);
        for pos in 0..self.cfg.slots_per_key as usize {
            let seen: Vec<Word> = views.iter().map(|v| v[pos]).collect();
            if !seen.is_empty() && seen.iter().all(|w| *w == seen[0]) {
                words.push(seen[0]);
            } else {
                words.push(read_without_primary(&self.ctx, base + pos as u64 * 8).await);
            }
        }
        words
    }

    /// Fetch the fingerprint candidates of `words` and return the live
    /// object for `key`. The flag reports whether any object was read.
    async fn probe(&self, key: &[u8], loc: &KeyLocation, words: &[Word]) -> (Lookup, bool) {
        let cands = fp_candidates(words, loc.fp);
        if cands.is_empty() {
            return (Lookup::Absent, false);
        }
        let ptrs: Vec<(RemoteAddr, u8)> = cands.iter().map(|(_, s)| (s.ptr, s.class())).collect();
        let images = self.read_objects(&ptrs).await;
        for ((pos, s), img) in cands.iter().zip(images) {
            if let Some(ObjectMatch::Match(object)) = img.map(|i| match_object(&i, key)) {
                let offset = self.group_offset(loc) + u64::from(*pos) * 8;
                return (Lookup::Found { offset, word: s.encode(), object }, true);
            }
        }
        (Lookup::Absent, true)
    }

    /// Locate `key`, batching `extra` into the first phase. Returns the
    /// lookup, the results of `extra`, and the path tag.
    async fn find(
        &mut self,
        key: &[u8],
        loc: &KeyLocation,
        extra: Vec<FabricOp>,
    ) -> (Lookup, Vec<OpResult>, &'static str) {
        let n = extra.len();
        match self.cache.route(key) {
            Route::Hit(e) => {
                let slots = current_slots(&self.ctx, e.slot_offset);
                let mut ops = extra;
                ops.push(FabricOp::read_word(slots.primary));
                ops.push(self.read_object_op(e.kv_addr(), e.class()));
                let mut res = self.ctx.phase(ops).await;
                let rest = res.split_off(n);
                let word = match rest[0].word() {
                    Some(w) => w,
                    None => {
                        self.degraded.set(true);
                        read_without_primary(&self.ctx, e.slot_offset).await
                    }
                };
                if word == e.word {
                    if let Some(ObjectMatch::Match(object)) = rest[1].data().map(|d| match_object(d, key)) {
                        return (Lookup::Found { offset: e.slot_offset, word, object }, res, "hit");
                    }
                }
                if let Some(s) = SlotWord::decode(word).filter(|s| !s.is_tombstone() && s.fp == loc.fp) {
                    if let Some(img) = self.read_objects(&[(s.ptr, s.class())]).await.pop().flatten() {
                        if let ObjectMatch::Match(object) = match_object(&img, key) {
                            self.cache.invalidate(key, Some((e.slot_offset, word)));
                            return (Lookup::Found { offset: e.slot_offset, word, object }, res, "stale");
                        }
                    }
                }
                self.cache.invalidate(key, None);
                let words = self.read_group(loc).await;
                let (l, _) = self.probe(key, loc, &words).await;
                self.remember(key, &l);
                (l, res, "slow")
            }
            Route::Bypass | Route::Miss => {
                let mut ops = extra;
                ops.push(self.group_read_op(loc));
                let mut res = self.ctx.phase(ops).await;
                let rest = res.split_off(n);
                let words = self.group_words(loc, &rest[0]).await;
                let (l, probed) = self.probe(key, loc, &words).await;
                self.remember(key, &l);
                (l, res, if probed { "miss" } else { "empty" })
            }
        }
    }

    async fn read_group(&self, loc: &KeyLocation) -> Vec<Word> {
        let res = self.ctx.phase(vec![self.group_read_op(loc)]).await;
        self.group_words(loc, &res[0]).await
    }

    /// Refresh the cache after a full lookup.
    fn remember(&mut self, key: &[u8], l: &Lookup) {
        match l {
            Lookup::Found { offset, word, .. } => match self.cache.get(key) {
                Some(e) if e.word != *word || e.slot_offset != *offset => {
                    self.cache.invalidate(key, Some((*offset, *word)))
                }
                _ => self.cache.learn(key, *offset, *word),
            },
            Lookup::Absent => self.cache.forget(key),
        }
    }

    // ---- requests ----

    async fn search(&mut self, key: &[u8]) -> Outcome {
        let loc = locate(&self.cfg, key);
        let (l, _, path) = self.find(key, &loc, Vec::new()).await;
        match l {
            Lookup::Found { object, .. } => {
                let mut o = Outcome::new(Status::Ok, path);
                o.value = Some(object.value);
                o
            }
            Lookup::Absent => Outcome::new(Status::NotFound, path),
        }
    }

    /// Run an outcome's background phases and return its status.
    async fn settle(&self, out: Outcome) -> Status {
        for ops in out.background {
            self.ctx.phase(ops).await;
        }
        out.status
    }

    /// Redo a logged insert with its existing object.
    pub(crate) async fn insert_staged(&mut self, id: u64, key: &[u8], value: &[u8], s: Staged) -> Status {
        let out = self.insert(id, key, value, Some(s)).await;
        self.settle(out).await
    }

    /// INSERT. `reuse` redoes a logged insert with its existing object.
    async fn insert(&mut self, id: u64, key: &[u8], value: &[u8], reuse: Option<Staged>) -> Outcome {
        let loc = locate(&self.cfg, key);
        let (mut s, mut first) = match reuse {
            Some(s) => (s, Vec::new()),
            None => match self.stage(Opcode::Insert, key, value).await {
                Some((s, image)) => {
                    let w = self.object_writes(OpKind::Insert, &s, &image).await;
                    (s, w)
                }
                None => return Outcome::new(Status::Error, "slow"),
            },
        };
        // A redo whose earlier attempt reached some backups must finish the
        // round at that slot, or later writers there would wait forever.
        let mut orphan = match first.is_empty() {
            true => self.own_word_at(&loc, s.word).await,
            false => None,
        };
        let n = first.len();
        first.push(self.group_read_op(&loc));
        let res = self.ctx.phase(first).await;
        let mut words = self.group_words(&loc, &res[n]).await;
        let mut path = "fast";
        loop {
            if let Some(pos) = orphan.take() {
                path = "slow";
                let offset = self.group_offset(&loc) + u64::from(pos) * 8;
                let params = WriteParams { op_id: id, v_old: Some(0), commit: Some(s.commit()), crash_op: None };
                let base = self.group_offset(&loc);
                let rep = match slot_write_watched(&self.ctx, offset, s.word, params, base).await {
                    Progress::Done(rep) => rep,
                    Progress::Held(h) => match self.rival(key, &loc, pos, s.word, &[], &h.views).await.0 {
                        Rival::None => resume_write(&self.ctx, *h).await,
                        _ => {
                            self.withdraw(*h, &s).await;
                            return Outcome::new(Status::Exists, path);
                        }
                    },
                };
                if rep.won {
                    self.cache.learn(key, offset, s.word);
                    let mut o = Outcome::new(Status::Ok, path);
                    o.rule = Some(rep.outcome);
                    o.background = self.settle_ops(&s, 0);
                    return o;
                }
                words = self.read_group(&loc).await;
                continue;
            }
            let (l, probed) = self.probe(key, &loc, &words).await;
            if probed {
                path = if path == "fast" { "probe" } else { "slow" };
            }
            if let Lookup::Found { offset, word, .. } = l {
                self.cancel(&s).await;
                self.cache.learn(key, offset, word);
                return Outcome::new(Status::Exists, "slow");
            }
            let Some(pos) = first_empty(&words) else {
                self.cancel(&s).await;
                return Outcome::new(Status::TableFull, path);
            };
            let offset = self.group_offset(&loc) + u64::from(pos) * 8;
            let params = WriteParams {
                op_id: id,
                v_old: Some(0),
                commit: Some(s.commit()),
                crash_op: self.inject.then_some(OpKind::Insert),
            };
            let base = self.group_offset(&loc);
            let rep = match slot_write_watched(&self.ctx, offset, s.word, params, base).await {
                Progress::Done(rep) => rep,
                Progress::Held(h) => match self.rival(key, &loc, pos, s.word, &words, &h.views).await {
                    (Rival::None, clean) => {
                        if !clean {
                            path = "slow";
                        }
                        resume_write(&self.ctx, *h).await
                    }
                    (rival, _) => {
                        self.withdraw(*h, &s).await;
                        if matches!(rival, Rival::Present) {
                            return Outcome::new(Status::Exists, "slow");
                        }
                        path = "slow";
                        let Some((fresh, image)) = self.stage(Opcode::Insert, key, value).await else {
                            return Outcome::new(Status::Error, path);
                        };
                        let mut ops = self.object_writes(OpKind::Insert, &fresh, &image).await;
                        ops.push(self.group_read_op(&loc));
                        let res = self.ctx.phase(ops).await;
                        words = self.group_words(&loc, res.last().expect("group read")).await;
                        s = fresh;
                        continue;
                    }
                },
            };
            if !rep.clean {
                path = "slow";
            }
            if rep.won {
                self.after_install(OpKind::Insert).await;
                self.cache.learn(key, offset, s.word);
                let mut o = Outcome::new(Status::Ok, path);
                o.rule = Some(rep.outcome);
                o.background = self.settle_ops(&s, 0);
                return o;
            }
            // Lost the slot: the winner may have inserted the same key.
            path = "slow";
            if let Some(w) = SlotWord::decode(rep.primary_after).filter(|w| !w.is_tombstone()) {
                let img = self.read_objects(&[(w.ptr, w.class())]).await.pop().flatten();
                if let Some(ObjectMatch::Match(_)) = img.map(|i| match_object(&i, key)) {
                    self.cancel(&s).await;
                    self.cache.learn(key, offset, rep.primary_after);
                    return Outcome::new(Status::Exists, path);
                }
            }
            words = self.read_group(&loc).await;
        }
    }

    /// Look for another insert of `key` elsewhere in its group, in the views
    /// a round winner at `pos` read just before its primary CAS. Words
    /// already present in `seen` were checked before the round. Rivals at
    /// later slots are waited out. Also reports whether no extra phase was
    /// needed.
    async fn rival(
        &self,
        key: &[u8],
        loc: &KeyLocation,
        pos: u32,
        own: Word,
        seen: &[Word],
        views: &[Option<Vec<Word>>],
    ) -> (Rival, bool) {
        // (position, word, seen on the primary)
        let mut suspects: Vec<(u32, Word, bool)> = Vec::new();
        for (i, view) in views.iter().enumerate() {
            let Some(v) = view else { continue };
            for (q, w) in v.iter().enumerate() {
                if q as u32 == pos || *w == own || seen.get(q) == Some(w) {
                    continue;
                }
                if SlotWord::decode(*w).filter(|s| !s.is_tombstone() && s.fp == loc.fp).is_none() {
                    continue;
                }
                match suspects.iter_mut().find(|(_, x, _)| x == w) {
                    Some(e) => e.2 |= i == 0,
                    None => suspects.push((q as u32, *w, i == 0)),
                }
            }
        }
        if suspects.is_empty() {
            return (Rival::None, true);
        }
        let ptrs: Vec<(RemoteAddr, u8)> =
            suspects.iter().filter_map(|(_, w, _)| SlotWord::decode(*w)).map(|s| (s.ptr, s.class())).collect();
        let images = self.read_objects(&ptrs).await;
        let same: Vec<(u32, Word, bool)> = suspects
            .into_iter()
            .zip(images)
            .filter(|(_, img)| matches!(img.as_deref().map(|i| match_object(i, key)), Some(ObjectMatch::Match(_))))
            .map(|(s, _)| s)
            .collect();
        if same.iter().any(|(_, _, on_primary)| *on_primary) {
            return (Rival::Present, false);
        }
        let Some(primary_view) = &views[0] else {
            return (if same.is_empty() { Rival::None } else { Rival::Ahead }, false);
        };
        if same.iter().any(|(q, _, _)| *q < pos) {
            return (Rival::Ahead, false);
        }
        for (q, rival, _) in same {
            let at = self.group_offset(loc) + u64::from(q) * 8;
            let before = primary_view[q as usize];
            let slots = current_slots(&self.ctx, at);
            let addr = slots.primary;
            // A backup that held the rival's word: a withdrawn rival clears
            // it, possibly leaving the primary back at `before`.
            let held = if views.len() == slots.all().count() {
                views
                    .iter()
                    .zip(slots.all())
                    .skip(1)
                    .find(|(v, _)| v.as_ref().is_some_and(|v| v[q as usize] == rival))
                    .map(|(_, a)| a)
            } else {
                None
            };
            let mut watch = vec![(addr, before)];
            watch.extend(held.map(|a| (a, rival)));
            let mut spins = 0;
            let now = loop {
                let r = self.ctx.spin_reads(watch.clone()).await;
                match r[0].word() {
                    Some(w) if w != before => break w,
                    Some(_) if r.get(1).is_some_and(|b| b.word().is_some_and(|w| w != rival)) => break before,
                    Some(_) => {}
                    None => return (Rival::Ahead, false),
                }
                spins += 1;
                if spins > self.cfg.max_spin {
                    self.ctx.report_liveness(format!("{} waited {spins} times on slot {addr}", self.ctx.actor));
                    crate::sim::Halt.await;
                }
            };
            if let Some(w) = SlotWord::decode(now).filter(|s| !s.is_tombstone() && s.fp == loc.fp) {
                let img = self.read_objects(&[(w.ptr, w.class())]).await.pop().flatten();
                if let Some(ObjectMatch::Match(_)) = img.map(|i| match_object(&i, key)) {
                    return (Rival::Present, false);
                }
            }
        }
        (Rival::None, false)
    }

    /// Position in the key's group where any replica holds `word`.
    async fn own_word_at(&self, loc: &KeyLocation, word: Word) -> Option<u32> {
        let slots = current_slots(&self.ctx, self.group_offset(loc));
        let len = group_len(&self.cfg);
        let ops = slots.all().map(|addr| FabricOp::Read { addr, len }).collect();
        let res = self.ctx.phase(ops).await;
        res.iter()
            .filter_map(OpResult::data)
            .map(parse_group)
            .find_map(|v| v.iter().position(|w| *w == word))
            .map(|p| p as u32)
    }

    /// Give up a won insert round: mark the object void so readers skip
    /// it, complete the round so its losers move on, then clear the slot
    /// and free the object.
    async fn withdraw(&self, mut h: Held, s: &Staged) {
        self.ctx.phase(self.replica_writes(oplog::flags_addr(s.addr), &[FLAG_VOID])).await;
        h.void = true;
        let offset = h.offset();
        let rep = resume_write(&self.ctx, h).await;
        let mut ops = self.cancel_ops(s);
        if rep.won {
            clear_backups(&self.ctx, offset, s.word).await;
            let primary = current_slots(&self.ctx, offset).primary;
            ops.push(FabricOp::Cas { addr: primary, expected: s.word, swap: 0 });
        }
        self.ctx.phase(ops).await;
    }

    /// Redo a logged update with its existing object.
    pub(crate) async fn update_staged(&mut self, id: u64, key: &[u8], s: Staged) -> Status {
        let out = self.update(id, key, &[], Some(s)).await;
        self.settle(out).await
    }

    async fn update(&mut self, id: u64, key: &[u8], value: &[u8], reuse: Option<Staged>) -> Outcome {
        let loc = locate(&self.cfg, key);
        let (s, first) = match reuse {
            Some(s) => (s, Vec::new()),
            None => match self.stage(Opcode::Update, key, value).await {
                Some((s, image)) => {
                    let w = self.object_writes(OpKind::Update, &s, &image).await;
                    (s, w)
                }
                None => return Outcome::new(Status::Error, "slow"),
            },
        };
        let (l, _, found_path) = self.find(key, &loc, first).await;
        let (offset, v_old) = match l {
            Lookup::Found { offset, word, .. } => (offset, word),
            Lookup::Absent => {
                self.cancel(&s).await;
                return Outcome::new(Status::NotFound, found_path);
            }
        };
        let path = if matches!(found_path, "hit" | "stale" | "miss") { found_path } else { "slow" };
        let params = WriteParams {
            op_id: id,
            v_old: Some(v_old),
            commit: Some(s.commit()),
            crash_op: self.inject.then_some(OpKind::Update),
        };
        let rep = slot_write(&self.ctx, offset, s.word, params).await;
        let path = if rep.clean { path } else { "slow" };
        if rep.won {
            self.after_install(OpKind::Update).await;
            self.cache.learn(key, offset, s.word);
            let mut o = Outcome::new(Status::Ok, path);
            o.rule = Some(rep.outcome);
            o.background = self.settle_ops(&s, rep.v_old);
            return o;
        }
        // Ordered just before the winner's write: cancel and report success.
        self.cancel(&s).await;
        match SlotWord::decode(rep.primary_after) {
            Some(w) if !w.is_tombstone() => self.cache.learn(key, offset, rep.primary_after),
            _ => self.cache.forget(key),
        }
        let mut o = Outcome::new(Status::Ok, "slow");
        o.rule = Some(rep.outcome);
        o
    }

    /// Redo a logged delete with its existing tombstone object.
    pub(crate) async fn delete_staged(&mut self, id: u64, key: &[u8], s: Staged) -> Status {
        let out = self.delete(id, key, Some(s)).await;
        self.settle(out).await
    }

    async fn delete(&mut self, id: u64, key: &[u8], reuse: Option<Staged>) -> Outcome {
        let loc = locate(&self.cfg, key);
        let (s, first) = match reuse {
            Some(s) => (s, Vec::new()),
            None => match self.stage(Opcode::Delete, key, &[]).await {
                Some((s, image)) => {
                    let w = self.object_writes(OpKind::Delete, &s, &image).await;
                    (s, w)
                }
                None => return Outcome::new(Status::Error, "slow"),
            },
        };
        let (l, _, found_path) = self.find(key, &loc, first).await;
        let (offset, mut v_old) = match l {
            Lookup::Found { offset, word, .. } => (offset, word),
            Lookup::Absent => {
                self.cancel(&s).await;
                return Outcome::new(Status::NotFound, found_path);
            }
        };
        let mut path = if matches!(found_path, "hit" | "stale" | "miss") { found_path } else { "slow" };
        loop {
            let params = WriteParams {
                op_id: id,
                v_old: Some(v_old),
                commit: Some(s.commit()),
                crash_op: self.inject.then_some(OpKind::Delete),
            };
            let rep = slot_write(&self.ctx, offset, s.word, params).await;
            if !rep.clean {
                path = "slow";
            }
            if rep.won {
                self.after_install(OpKind::Delete).await;
                self.cache.forget(key);
                if !clear_backups(&self.ctx, offset, s.word).await {
                    path = "slow";
                }
                let mut o = Outcome::new(Status::Ok, path);
                o.rule = Some(rep.outcome);
                o.background = self.settle_ops(&s, rep.v_old);
                let primary = current_slots(&self.ctx, offset).primary;
                let last = o.background.last_mut().expect("settle has a final phase");
                last.extend(self.ctx.with(|w| free_ops(w, s.addr, s.class)));
                last.push(FabricOp::Cas { addr: primary, expected: s.word, swap: 0 });
                return o;
            }
            match SlotWord::decode(rep.primary_after) {
                // Lost to an update: delete the value it installed.
                Some(w) if !w.is_tombstone() => {
                    v_old = rep.primary_after;
                    path = "slow";
                }
                // Lost to another delete: the key is already gone.
                _ => {
                    self.cancel(&s).await;
                    self.cache.forget(key);
                    let mut o = Outcome::new(Status::NotFound, "slow");
                    o.rule = Some(rep.outcome);
                    return o;
                }
            }
        }
    }
}

/// Clear a withdrawn word (a delete's tombstone or a void insert) from
/// every backup. The primary is cleared afterwards, so a slot reads as
/// empty only once all backups are. Returns false if a failure forced a
/// retry.
pub async fn clear_backups(ctx: &Ctx, offset: u64, tomb: Word) -> bool {
    let mut clean = true;
    loop {
        let slots = current_slots(ctx, offset);
        if slots.backups.is_empty() {
            return clean;
        }
        let ops = slots.backups.iter().map(|a| FabricOp::Cas { addr: *a, expected: tomb, swap: 0 }).collect();
        let res = ctx.phase(ops).await;
        if !res.iter().any(OpResult::is_fail) {
            return clean;
        }
        clean = false;
        let epoch = ctx.epoch();
        ctx.wait_until(move |w| w.membership.epoch > epoch && !w.membership.preparing).await;
        refresh_view(ctx).await;
    }
}

/// Build a [`Staged`] view of an existing object (used by recovery).
pub fn staged_from(cfg: &Config, addr: RemoteAddr, class: u8, obj: &KvObject) -> Option<Staged> {
    let opcode = obj.entry.op()?;
    let tomb = opcode == Opcode::Delete;
    let fp = locate(cfg, &obj.key).fp;
    let word = SlotWord::new(fp, class, addr, tomb).encode();
    Some(Staged { addr, class, class_size: cfg.class_size(class), opcode, word, seq: obj.seq })
}
