//! Replication protocol for one replicated index slot.
//!
//! Writers CAS every backup from the primary's current value to their own
//! word, then elect a single last writer from the CAS results:
//!
//! * every backup holds the writer's word: it wins outright;
//! * a strict majority holds it: it wins;
//! * otherwise, if the primary is untouched, the writer holding the smallest
//!   word among the backups wins.
//!
//! The winner repairs the remaining backups and swings the primary last, so
//! readers that only look at the primary never see a half-written round.

use std::fmt;

use crate::event::{CrashPoint, OpKind};
use crate::fabric::{FabricOp, NodeId, OpResult, RemoteAddr, Word};
use crate::index::{group_len, parse_group};
use crate::sim::Ctx;

/// The replicas of one slot: one primary and `r - 1` backups.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SlotSet {
    pub primary: RemoteAddr,
    pub backups: Vec<RemoteAddr>,
}

impl SlotSet {
    /// Slot at index-region offset `offset` under the replica view `nodes`.
    pub fn from_view(offset: u64, nodes: &[NodeId]) -> Self {
        assert!(!nodes.is_empty(), "no alive index replica");
        SlotSet {
            primary: RemoteAddr::new(nodes[0], offset),
            backups: nodes[1..].iter().map(|n| RemoteAddr::new(*n, offset)).collect(),
        }
    }

    pub fn offset(&self) -> u64 {
        self.primary.offset()
    }

    pub fn all(&self) -> impl Iterator<Item = RemoteAddr> + '_ {
        std::iter::once(self.primary).chain(self.backups.iter().copied())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RuleOutcome {
    Rule1,
    Rule2,
    Rule3,
    Lose,
    Finish,
    Fail,
}

impl RuleOutcome {
    pub fn is_win(self) -> bool {
        matches!(self, RuleOutcome::Rule1 | RuleOutcome::Rule2 | RuleOutcome::Rule3)
    }

    pub fn name(self) -> &'static str {
        match self {
            RuleOutcome::Rule1 => "RULE1",
            RuleOutcome::Rule2 => "RULE2",
            RuleOutcome::Rule3 => "RULE3",
            RuleOutcome::Lose => "LOSE",
            RuleOutcome::Finish => "FINISH",
            RuleOutcome::Fail => "FAIL",
        }
    }
}

impl fmt::Display for RuleOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A backup CAS result: the prior word, or `None` for FAIL.
pub type ListValue = Option<Word>;

/// Replace every `v_old` entry with `v_new`; FAIL entries stay FAIL.
pub fn change_list_value(v_list: &[ListValue], v_old: Word, v_new: Word) -> Vec<ListValue> {
    v_list
        .iter()
        .map(|v| match v {
            Some(w) if *w == v_old => Some(v_new),
            other => *other,
        })
        .collect()
}

/// First stage of rule evaluation, before any primary read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Evaluation {
    Decided(RuleOutcome),
    /// The caller must read the primary and finish with [`evaluate_with_check`].
    NeedsCheck,
}

/// Rule evaluation over a normalised `v_list`. An empty list (no backups)
/// wins outright; the primary CAS then arbitrates.
pub fn evaluate_rules(v_list: &[ListValue], v_new: Word) -> Evaluation {
    if v_list.iter().any(Option::is_none) {
        return Evaluation::Decided(RuleOutcome::Fail);
    }
    if v_list.is_empty() {
        return Evaluation::Decided(RuleOutcome::Rule1);
    }
    let words: Vec<Word> = v_list.iter().map(|v| v.unwrap()).collect();
    let (maj, cnt) = majority(&words);
    if cnt == words.len() {
        return Evaluation::Decided(if maj == v_new { RuleOutcome::Rule1 } else { RuleOutcome::Lose });
    }
    if 2 * cnt > words.len() {
        return Evaluation::Decided(if maj == v_new { RuleOutcome::Rule2 } else { RuleOutcome::Lose });
    }
    if !words.contains(&v_new) {
        return Evaluation::Decided(RuleOutcome::Lose);
    }
    Evaluation::NeedsCheck
}

/// Final stage after the extra primary read (`None` = the read failed).
pub fn evaluate_with_check(v_list: &[ListValue], v_new: Word, v_old: Word, check: ListValue) -> RuleOutcome {
    let Some(check) = check else { return RuleOutcome::Fail };
    if check != v_old {
        return RuleOutcome::Finish;
    }
    let min = v_list.iter().flatten().min().copied();
    if min == Some(v_new) {
        RuleOutcome::Rule3
    } else {
        RuleOutcome::Lose
    }
}

/// Most frequent word and its count; ties go to the first seen.
fn majority(words: &[Word]) -> (Word, usize) {
    let mut best = (words[0], 0);
    for w in words {
        let c = words.iter().filter(|x| *x == w).count();
        if c > best.1 {
            best = (*w, c);
        }
    }
    best
}

/// Where a [`SlotWriter`] currently is.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Step {
    ReadPrimary,
    CasBackups,
    CheckPrimary,
    Repair,
    PrePrimary,
    CasPrimary,
    Spin,
    Done,
    /// A FAIL was observed while in the given step.
    Failed(Box<Step>),
}

/// One write attempt as an explicit state machine.
///
/// [`SlotWriter::next_ops`] yields the next phase; [`SlotWriter::feed`]
/// consumes its results. The async driver and the exhaustive checker both
/// run the protocol through this type.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SlotWriter {
    pub slots: SlotSet,
    pub v_old: Word,
    pub v_new: Word,
    pub step: Step,
    pub v_list: Vec<ListValue>,
    pub outcome: Option<RuleOutcome>,
    pub won: bool,
    pub primary_after: Option<Word>,
    pub rtts: u32,
    pub spins: u64,
    pre_primary: Option<Vec<FabricOp>>,
}

impl SlotWriter {
    /// Start by reading the primary to learn `v_old`.
    pub fn new(slots: SlotSet, v_new: Word) -> Self {
        SlotWriter {
            slots,
            v_old: 0,
            v_new,
            step: Step::ReadPrimary,
            v_list: Vec::new(),
            outcome: None,
            won: false,
            primary_after: None,
            rtts: 0,
            spins: 0,
            pre_primary: None,
        }
    }

    /// Start at the backup CASes with a `v_old` read by an earlier phase.
    pub fn resume(slots: SlotSet, v_old: Word, v_new: Word) -> Self {
        let mut w = SlotWriter::new(slots, v_new);
        w.v_old = v_old;
        w.step = Step::CasBackups;
        w
    }

    /// A phase the winner issues after deciding and before its primary CAS.
    pub fn with_pre_primary(mut self, ops: Option<Vec<FabricOp>>) -> Self {
        self.pre_primary = ops.filter(|o| !o.is_empty());
        self
    }

    pub fn is_finished(&self) -> bool {
        matches!(self.step, Step::Done | Step::Failed(_))
    }

    pub fn is_spinning(&self) -> bool {
        self.step == Step::Spin
    }

    /// The next phase to issue, or `None` once finished.
    pub fn next_ops(&self) -> Option<Vec<FabricOp>> {
        let read_primary = || vec![FabricOp::read_word(self.slots.primary)];
        match self.step {
            Step::ReadPrimary | Step::CheckPrimary | Step::Spin => Some(read_primary()),
            Step::CasBackups => Some(
                self.slots
                    .backups
                    .iter()
                    .map(|a| FabricOp::Cas { addr: *a, expected: self.v_old, swap: self.v_new })
                    .collect(),
            ),
            Step::Repair => Some(
                self.slots
                    .backups
                    .iter()
                    .zip(&self.v_list)
                    .filter(|(_, v)| **v != Some(self.v_new))
                    .map(|(a, v)| FabricOp::Cas { addr: *a, expected: v.unwrap(), swap: self.v_new })
                    .collect(),
            ),
            Step::PrePrimary => self.pre_primary.clone(),
            Step::CasPrimary => {
                Some(vec![FabricOp::Cas { addr: self.slots.primary, expected: self.v_old, swap: self.v_new }])
            }
            Step::Done | Step::Failed(_) => None,
        }
    }

    fn fail(&mut self) {
        let at = std::mem::replace(&mut self.step, Step::Done);
        self.step = Step::Failed(Box::new(at));
    }

    fn decide(&mut self, outcome: RuleOutcome) {
        self.outcome = Some(outcome);
        match outcome {
            RuleOutcome::Fail => self.fail(),
            RuleOutcome::Lose => self.step = Step::Spin,
            RuleOutcome::Finish => self.step = Step::Done,
            RuleOutcome::Rule1 => self.step = self.after_repair(),
            RuleOutcome::Rule2 | RuleOutcome::Rule3 => {
                self.step =
                    if self.v_list.iter().any(|v| *v != Some(self.v_new)) { Step::Repair } else { self.after_repair() };
            }
        }
    }

    fn after_repair(&self) -> Step {
        if self.pre_primary.is_some() {
            Step::PrePrimary
        } else {
            Step::CasPrimary
        }
    }

    /// Consume the results of the phase returned by [`Self::next_ops`].
    pub fn feed(&mut self, results: &[OpResult]) {
        self.rtts += 1;
        match self.step {
            Step::ReadPrimary => match results[0].word() {
                Some(w) => {
                    self.v_old = w;
                    self.step = Step::CasBackups;
                }
                None => self.fail(),
            },
            Step::CasBackups => {
                let raw: Vec<ListValue> = results.iter().map(OpResult::word).collect();
                self.v_list = change_list_value(&raw, self.v_old, self.v_new);
                match evaluate_rules(&self.v_list, self.v_new) {
                    Evaluation::Decided(o) => self.decide(o),
                    Evaluation::NeedsCheck => self.step = Step::CheckPrimary,
                }
            }
            Step::CheckPrimary => {
                let check = results[0].word();
                let o = evaluate_with_check(&self.v_list, self.v_new, self.v_old, check);
                if o == RuleOutcome::Fail {
                    self.outcome = Some(o);
                    self.fail();
                    return;
                }
                if o == RuleOutcome::Finish {
                    self.primary_after = check;
                }
                self.decide(o);
            }
            Step::Repair => {
                if results.iter().any(OpResult::is_fail) {
                    self.fail();
                } else {
                    self.step = self.after_repair();
                }
            }
            Step::PrePrimary => {
                if results.iter().all(OpResult::is_fail) {
                    self.fail();
                } else {
                    self.step = Step::CasPrimary;
                }
            }
            Step::CasPrimary => match results[0].word() {
                Some(old) if old == self.v_old => {
                    self.won = true;
                    self.primary_after = Some(self.v_new);
                    self.step = Step::Done;
                }
                Some(old) => {
                    // Only reachable without backups: another writer got the
                    // primary first, so this write is ordered before it.
                    self.outcome = Some(RuleOutcome::Lose);
                    self.primary_after = Some(old);
                    self.step = Step::Done;
                }
                None => self.fail(),
            },
            Step::Spin => match results[0].word() {
                Some(w) if w == self.v_old => self.spins += 1,
                Some(w) if w == self.v_new => {
                    // The master installed this write during a reconfiguration.
                    self.won = true;
                    self.primary_after = Some(w);
                    self.step = Step::Done;
                }
                Some(w) => {
                    self.primary_after = Some(w);
                    self.step = Step::Done;
                }
                None => self.fail(),
            },
            Step::Done | Step::Failed(_) => panic!("feed after finish"),
        }
    }
}

/// Result of a complete, failure-aware write.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WriteReport {
    /// Last rule outcome evaluated (FAIL if the master resolved the write).
    pub outcome: RuleOutcome,
    pub won: bool,
    /// The winner was decided by the master rather than by the rules.
    pub via_master: bool,
    pub v_old: Word,
    /// Primary value observed when the write finished.
    pub primary_after: Word,
    /// Phases issued by the protocol itself.
    pub rtts: u32,
    /// No FAIL was observed along the way.
    pub clean: bool,
}

/// An object whose log entry is committed by a winning write.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CommitTarget {
    pub obj: RemoteAddr,
    pub class_size: u64,
    /// Allocation sequence number, identifying this use of the object.
    pub seq: u64,
}

impl CommitTarget {
    /// One commit WRITE per replica of the object.
    pub fn ops(&self, fabric: &crate::fabric::Fabric, old_value: Word) -> Vec<FabricOp> {
        crate::memalloc::replicas(fabric, self.obj)
            .into_iter()
            .map(|addr| {
                let (a, data) = crate::oplog::commit_write(addr, self.class_size, old_value);
                FabricOp::Write { addr: a, data }
            })
            .collect()
    }
}

/// Options for [`slot_write`].
#[derive(Debug, Clone, Default)]
pub struct WriteParams {
    pub op_id: u64,
    /// `v_old` already read by the caller (skips the initial primary read).
    pub v_old: Option<Word>,
    /// Log entry the winner commits (with the round's `v_old`) before its
    /// primary CAS.
    pub commit: Option<CommitTarget>,
    /// Client request kind, used to fire planned crashes at c1 and c2.
    pub crash_op: Option<OpKind>,
}

/// Current replica view of the slot at `offset`.
pub fn current_slots(ctx: &Ctx, offset: u64) -> SlotSet {
    ctx.with(|w| SlotSet::from_view(offset, &w.membership.index_nodes))
}

/// Adopt the latest committed membership view.
pub async fn refresh_view(ctx: &Ctx) {
    ctx.wait_until(|w| !w.membership.preparing).await;
    let a = ctx.actor;
    ctx.with(|w| {
        let e = w.membership.epoch;
        w.actor_mut(a).epoch = e;
    });
}

/// A winning write paused after its pre-primary phase, before the primary
/// CAS. `views` holds the watched group as read from each replica (primary
/// first) in that phase.
#[derive(Debug, Clone)]
pub struct Held {
    pub views: Vec<Option<Vec<Word>>>,
    /// Install as a void entry (reported as VOID instead of INSTALL).
    pub void: bool,
    sw: SlotWriter,
    offset: u64,
    v_new: Word,
    params: WriteParams,
    total_rtts: u32,
    clean: bool,
}

impl Held {
    pub fn offset(&self) -> u64 {
        self.offset
    }
}

/// Either a finished write or one paused before its primary CAS.
#[derive(Debug, Clone)]
pub enum Progress {
    Done(WriteReport),
    Held(Box<Held>),
}

/// Write `v_new` into the slot at `offset`, resolving conflicts and
/// failures. Emits PROPOSAL / RULE / INSTALL events.
pub async fn slot_write(ctx: &Ctx, offset: u64, v_new: Word, params: WriteParams) -> WriteReport {
    match drive(ctx, offset, v_new, params, None, None).await {
        Progress::Done(r) => r,
        Progress::Held(_) => unreachable!("unwatched writes never pause"),
    }
}

/// Like [`slot_write`], but a winner also reads the group at `group_base`
/// on every replica in its pre-primary phase and pauses before the primary
/// CAS so the caller can inspect it. Continue with [`resume_write`].
pub async fn slot_write_watched(ctx: &Ctx, offset: u64, v_new: Word, params: WriteParams, group_base: u64) -> Progress {
    drive(ctx, offset, v_new, params, Some(group_base), None).await
}

/// Finish a paused write.
pub async fn resume_write(ctx: &Ctx, held: Held) -> WriteReport {
    let (offset, v_new, params) = (held.offset, held.v_new, held.params.clone());
    match drive(ctx, offset, v_new, params, None, Some(held)).await {
        Progress::Done(r) => r,
        Progress::Held(_) => unreachable!("a resumed write is not watched"),
    }
}

async fn drive(
    ctx: &Ctx,
    offset: u64,
    v_new: Word,
    params: WriteParams,
    watch: Option<u64>,
    resumed: Option<Held>,
) -> Progress {
    let mut known_old = params.v_old;
    let mut total_rtts = 0;
    let mut clean = true;
    let mut void = false;
    let mut carried = None;
    if let Some(h) = resumed {
        total_rtts = h.total_rtts;
        clean = h.clean;
        void = h.void;
        carried = Some(h.sw);
    }
    let max_spin = ctx.cfg().max_spin;
    let group_len = ctx.with(|w| group_len(&w.cfg));
    loop {
        let slots = current_slots(ctx, offset);
        let mut watched = 0;
        let mut sw = match (carried.take(), known_old.take()) {
            (Some(sw), _) => sw,
            (None, Some(v)) => SlotWriter::resume(slots.clone(), v, v_new),
            (None, None) => SlotWriter::new(slots.clone(), v_new),
        };
        let mut proposed = sw.step != Step::ReadPrimary && sw.step != Step::CasBackups;
        loop {
            if sw.step == Step::CasBackups && !proposed {
                proposed = true;
                let mut ops = match params.commit {
                    Some(c) => ctx.with(|w| c.ops(&w.fabric, sw.v_old)),
                    None => Vec::new(),
                };
                if let Some(base) = watch {
                    let group = current_slots(ctx, base);
                    watched = group.all().count();
                    ops.extend(group.all().map(|addr| FabricOp::Read { addr, len: group_len }));
                }
                sw = sw.with_pre_primary(Some(ops));
                let e = ctx
                    .event("PROPOSAL")
                    .at(slots.primary)
                    .with("id", params.op_id)
                    .with_word("old", sw.v_old)
                    .with_word("new", v_new);
                ctx.emit(e);
            }
            let Some(ops) = sw.next_ops() else { break };
            if sw.step == Step::CasPrimary && params.crash_op.is_some_and(|op| ctx.crash_due(CrashPoint::C2, op)) {
                ctx.crash_self().await;
            }
            let before = sw.step.clone();
            let results =
                if sw.is_spinning() { ctx.spin_read(slots.primary, sw.v_old).await } else { ctx.phase(ops).await };
            sw.feed(&results);
            if before == Step::CasBackups && params.crash_op.is_some_and(|op| ctx.crash_due(CrashPoint::C1, op)) {
                ctx.crash_self().await;
            }
            if before == Step::PrePrimary && sw.step == Step::CasPrimary && watched > 0 {
                let views = results[results.len() - watched..].iter().map(|r| r.data().map(parse_group)).collect();
                return Progress::Held(Box::new(Held {
                    views,
                    void: false,
                    sw,
                    offset,
                    v_new,
                    params: WriteParams { v_old: None, ..params },
                    total_rtts,
                    clean,
                }));
            }
            if sw.spins > max_spin {
                ctx.report_liveness(format!("{} spun {} times on slot {}", ctx.actor, sw.spins, slots.primary));
                crate::sim::Halt.await;
            }
        }
        total_rtts += sw.rtts;
        if let Some(o) = sw.outcome {
            let e =
                ctx.event("RULE").at(slots.primary).with("id", params.op_id).with("rule", o).with_word("old", sw.v_old);
            ctx.emit(e);
            ctx.with(|w| *w.stats.rules.entry(o.name().to_string()).or_default() += 1);
        }
        match sw.step.clone() {
            Step::Done => {
                // A spinning loser can find its own word installed by the
                // master, which already recorded the install.
                let by_master = sw.won && sw.outcome == Some(RuleOutcome::Lose);
                if by_master {
                    clean = false;
                } else if sw.won {
                    if void {
                        emit_void(ctx, slots.primary, params.op_id, sw.v_old, v_new);
                    } else {
                        emit_install(ctx, slots.primary, params.op_id, sw.v_old, v_new, params.commit.as_ref());
                    }
                }
                return Progress::Done(WriteReport {
                    outcome: sw.outcome.unwrap_or(RuleOutcome::Rule1),
                    won: sw.won,
                    via_master: by_master,
                    v_old: sw.v_old,
                    primary_after: sw.primary_after.unwrap_or(v_new),
                    rtts: total_rtts,
                    clean,
                });
            }
            Step::Failed(at) if *at == Step::ReadPrimary => {
                clean = false;
                let epoch = ctx.epoch();
                ctx.wait_until(move |w| w.membership.epoch > epoch && !w.membership.preparing).await;
                refresh_view(ctx).await;
            }
            Step::Failed(_) => {
                clean = false;
                let reply = crate::master::fail_query(ctx, offset).await;
                total_rtts += 1;
                refresh_view(ctx).await;
                if reply == sw.v_old {
                    continue;
                }
                let won = reply == v_new;
                return Progress::Done(WriteReport {
                    outcome: RuleOutcome::Fail,
                    won,
                    via_master: true,
                    v_old: sw.v_old,
                    primary_after: reply,
                    rtts: total_rtts,
                    clean,
                });
            }
            _ => unreachable!(),
        }
    }
}

/// Record a primary CAS that installed a void entry, one whose writer
/// withdrew after winning its round.
pub fn emit_void(ctx: &Ctx, primary: RemoteAddr, op_id: u64, old: Word, word: Word) {
    let e = ctx.event("VOID").at(primary).with("id", op_id).with_word("old", old).with_word("word", word);
    ctx.emit(e);
}

/// Record a primary CAS that installed `word` over `old`.
pub fn emit_install(ctx: &Ctx, primary: RemoteAddr, op_id: u64, old: Word, word: Word, obj: Option<&CommitTarget>) {
    let mut e = ctx
        .event("INSTALL")
        .at(primary)
        .with("id", op_id)
        .with_word("old", old)
        .with_word("word", word)
        .with("epoch", ctx.epoch());
    if let Some(c) = obj {
        e = e.with("obj", c.obj).with("seq", c.seq);
    }
    ctx.emit(e);
}

/// Read the slot at `offset` (primary first, then the failure path).
pub async fn slot_read(ctx: &Ctx, offset: u64) -> Word {
    let slots = current_slots(ctx, offset);
    let r = ctx.phase(vec![FabricOp::read_word(slots.primary)]).await;
    match r[0].word() {
        Some(w) => w,
        None => read_without_primary(ctx, offset).await,
    }
}

/// Read path when the primary failed: a unanimous answer from the alive
/// backups is safe; anything else goes to the master.
pub async fn read_without_primary(ctx: &Ctx, offset: u64) -> Word {
    let slots = current_slots(ctx, offset);
    let ops: Vec<_> = slots.all().map(FabricOp::read_word).collect();
    let r = ctx.phase(ops).await;
    let words: Vec<Word> = r.iter().filter_map(OpResult::word).collect();
    if r[0].word().is_some() {
        // The view changed under us and the new primary answered.
        return words[0];
    }
    if !words.is_empty() && words.iter().all(|w| *w == words[0]) {
        return words[0];
    }
    let reply = crate::master::fail_query(ctx, offset).await;
    refresh_view(ctx).await;
    reply
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::fabric::{ActorId, Fabric, Geometry};
    use crate::sim::{RandomChooser, Sim, Stop, World};

    const OLD: Word = 0x10;

    fn eval(v_list: &[Word], v_new: Word) -> Evaluation {
        let l: Vec<_> = v_list.iter().map(|w| Some(*w)).collect();
        evaluate_rules(&l, v_new)
    }

    #[test]
    fn rule_examples() {
        assert_eq!(eval(&[7, 7], 7), Evaluation::Decided(RuleOutcome::Rule1));
        assert_eq!(eval(&[7, 7, 9], 7), Evaluation::Decided(RuleOutcome::Rule2));
        assert_eq!(eval(&[7, 7, 9], 9), Evaluation::Decided(RuleOutcome::Lose));
        assert_eq!(eval(&[9, 9], 7), Evaluation::Decided(RuleOutcome::Lose));
        assert_eq!(eval(&[8, 9], 7), Evaluation::Decided(RuleOutcome::Lose));
        assert_eq!(eval(&[7, 9], 7), Evaluation::NeedsCheck);
        assert_eq!(eval(&[], 7), Evaluation::Decided(RuleOutcome::Rule1));
        assert_eq!(evaluate_rules(&[Some(7), None], 7), Evaluation::Decided(RuleOutcome::Fail));

        let l = [Some(7), Some(9)];
        assert_eq!(evaluate_with_check(&l, 7, OLD, Some(OLD)), RuleOutcome::Rule3);
        assert_eq!(evaluate_with_check(&l, 9, OLD, Some(OLD)), RuleOutcome::Lose);
        assert_eq!(evaluate_with_check(&l, 7, OLD, Some(9)), RuleOutcome::Finish);
        assert_eq!(evaluate_with_check(&l, 7, OLD, None), RuleOutcome::Fail);
    }

    #[test]
    fn two_two_split_is_not_a_majority() {
        assert_eq!(eval(&[7, 7, 9, 9], 7), Evaluation::NeedsCheck);
        assert_eq!(eval(&[7, 9, 11], 7), Evaluation::NeedsCheck);
    }

    #[test]
    fn change_list_examples() {
        assert_eq!(change_list_value(&[Some(OLD), Some(3)], OLD, 5), vec![Some(5), Some(3)]);
        assert_eq!(change_list_value(&[Some(OLD), Some(OLD)], OLD, 5), vec![Some(5), Some(5)]);
        assert_eq!(change_list_value(&[None, Some(OLD)], OLD, 5), vec![None, Some(5)]);
    }

    fn fabric(r: usize) -> Fabric {
        let cfg = Config { num_mns: r, r, num_regions: 1, ..Config::default() };
        let geo = Geometry::from_config(&cfg);
        let nodes: Vec<_> = (0..r as u8).map(NodeId).collect();
        Fabric::new(geo, r, vec![nodes.clone(); 2])
    }

    fn slots(f: &Fabric, r: usize) -> SlotSet {
        let nodes: Vec<_> = (0..r as u8).map(NodeId).collect();
        SlotSet::from_view(f.geometry().index_base, &nodes)
    }

    fn apply(f: &mut Fabric, op: &FabricOp) -> OpResult {
        f.apply(ActorId(0), op, u64::MAX)
    }

    /// Run a writer's phases to completion without interference.
    fn finish(f: &mut Fabric, w: &mut SlotWriter) {
        while let Some(ops) = w.next_ops() {
            let r: Vec<_> = ops.iter().map(|o| apply(f, o)).collect();
            w.feed(&r);
        }
    }

    #[test]
    fn lone_writer_rule1_three_rtts() {
        let mut f = fabric(3);
        let s = slots(&f, 3);
        let mut w = SlotWriter::new(s.clone(), 0x77);
        finish(&mut f, &mut w);
        assert!(w.won);
        assert_eq!(w.outcome, Some(RuleOutcome::Rule1));
        assert_eq!(w.rtts, 3);
        for a in s.all() {
            assert_eq!(f.peek_word(a), Some(0x77));
        }
    }

    #[test]
    fn split_backups_rule3_for_smaller_word() {
        let mut f = fabric(3);
        let s = slots(&f, 3);
        let (mut a, mut b) = (SlotWriter::new(s.clone(), 0x20), SlotWriter::new(s.clone(), 0x30));
        for w in [&mut a, &mut b] {
            let r = apply(&mut f, &w.next_ops().unwrap()[0]);
            w.feed(&[r]);
        }
        let (oa, ob) = (a.next_ops().unwrap(), b.next_ops().unwrap());
        let a0 = apply(&mut f, &oa[0]);
        let b1 = apply(&mut f, &ob[1]);
        let b0 = apply(&mut f, &ob[0]);
        let a1 = apply(&mut f, &oa[1]);
        a.feed(&[a0, a1]);
        b.feed(&[b0, b1]);
        assert_eq!(a.step, Step::CheckPrimary);
        assert_eq!(b.step, Step::CheckPrimary);
        for w in [&mut a, &mut b] {
            let r = apply(&mut f, &w.next_ops().unwrap()[0]);
            w.feed(&[r]);
        }
        assert_eq!(a.outcome, Some(RuleOutcome::Rule3));
        assert_eq!(b.outcome, Some(RuleOutcome::Lose));
        finish(&mut f, &mut a);
        assert_eq!(a.rtts, 5);
        finish(&mut f, &mut b);
        assert_eq!(b.primary_after, Some(0x20));
        for x in s.all() {
            assert_eq!(f.peek_word(x), Some(0x20));
        }
    }

    #[test]
    fn majority_winner_rule2_four_rtts() {
        let mut f = fabric(4);
        let s = slots(&f, 4);
        let (mut a, mut b) = (SlotWriter::new(s.clone(), 0x30), SlotWriter::new(s.clone(), 0x20));
        for w in [&mut a, &mut b] {
            let r = apply(&mut f, &w.next_ops().unwrap()[0]);
            w.feed(&[r]);
        }
        let (oa, ob) = (a.next_ops().unwrap(), b.next_ops().unwrap());
        let ra: Vec<_> = vec![apply(&mut f, &oa[0]), apply(&mut f, &oa[1])];
        let rb: Vec<_> = vec![apply(&mut f, &ob[2]), apply(&mut f, &ob[0]), apply(&mut f, &ob[1])];
        let ra2 = apply(&mut f, &oa[2]);
        a.feed(&[ra[0].clone(), ra[1].clone(), ra2]);
        b.feed(&[rb[1].clone(), rb[2].clone(), rb[0].clone()]);
        assert_eq!(a.outcome, Some(RuleOutcome::Rule2));
        assert_eq!(b.outcome, Some(RuleOutcome::Lose));
        finish(&mut f, &mut a);
        assert_eq!(a.rtts, 4);
        finish(&mut f, &mut b);
        for x in s.all() {
            assert_eq!(f.peek_word(x), Some(0x30));
        }
    }

    fn world(r: usize) -> World {
        let cfg = Config { num_mns: r, r, num_regions: 1, ..Config::default() };
        let f = fabric(r);
        World::new(cfg, f, (0..r as u8).map(NodeId).collect())
    }

    #[test]
    fn concurrent_writers_one_winner_with_contract_rtts() {
        for seed in 0..50 {
            for r in 2..=4 {
                let mut sim = Sim::new(world(r), Box::new(RandomChooser::new(seed)));
                let off = sim.world().fabric.geometry().index_base;
                let reports = std::rc::Rc::new(std::cell::RefCell::new(Vec::new()));
                for c in 0..3u32 {
                    let reports = reports.clone();
                    sim.spawn(ActorId(c), move |ctx| async move {
                        let rep = slot_write(&ctx, off, 0x100 + u64::from(c), WriteParams::default()).await;
                        reports.borrow_mut().push(rep);
                    });
                }
                assert_eq!(sim.run(), Stop::Quiescent);
                let reps = reports.borrow();
                let mut rounds: std::collections::BTreeMap<Word, Vec<&WriteReport>> = Default::default();
                for rep in reps.iter() {
                    rounds.entry(rep.v_old).or_default().push(rep);
                }
                for (v_old, members) in rounds {
                    let winners: Vec<_> = members.iter().filter(|r| r.won).collect();
                    assert_eq!(winners.len(), 1, "seed {seed} r {r} round {v_old:#x}: {reps:?}");
                    let w = winners[0];
                    let expect = match w.outcome {
                        RuleOutcome::Rule1 => 3,
                        RuleOutcome::Rule2 => 4,
                        RuleOutcome::Rule3 => 5,
                        o => panic!("winner outcome {o}"),
                    };
                    assert_eq!(w.rtts, expect);
                }
            }
        }
    }

    #[test]
    fn read_with_crashed_primary() {
        let mut w = world(3);
        let off = w.fabric.geometry().index_base;
        for n in 0..3 {
            w.fabric.poke(RemoteAddr::new(NodeId(n), off), &5u64.to_le_bytes());
        }
        w.fabric.crash_node(NodeId(0));
        let mut sim = Sim::new(w, Box::new(RandomChooser::new(3)));
        sim.spawn(ActorId(0), move |ctx| async move {
            assert_eq!(slot_read(&ctx, off).await, 5);
        });
        assert_eq!(sim.run(), Stop::Quiescent);
        assert_eq!(sim.world().stats.fail_queries, 0);
    }
}
