//! Deterministic single-threaded simulator.
//!
//! Actors (clients, the master) are async tasks. A task issues a phase of
//! fabric operations and awaits it; the scheduler then applies one pending
//! operation per tick, chosen by a [`Chooser`], honouring per-node FIFO order
//! inside each phase. Nothing else advances time, so a run is a pure
//! function of its scenario and chooser.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::future::Future;
use std::pin::Pin;
use std::rc::Rc;
use std::task::{Context, Poll, Waker};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::event::{CrashPoint, Event, OpKind};
use crate::fabric::{ActorId, Fabric, FabricOp, NodeId, OpResult, RemoteAddr, Word};
use crate::memalloc::Allocator;

/// Picks one of `n` enabled steps.
pub trait Chooser {
    fn choose(&mut self, n: usize) -> usize;
}

pub struct RandomChooser(ChaCha8Rng);

impl RandomChooser {
    pub fn new(seed: u64) -> Self {
        RandomChooser(ChaCha8Rng::seed_from_u64(seed))
    }
}

impl Chooser for RandomChooser {
    fn choose(&mut self, n: usize) -> usize {
        self.0.gen_range(0..n)
    }
}

/// Follows a fixed prefix of choices, then always picks 0, recording the
/// branching factor at every step. Drives replay-based exhaustive search.
#[derive(Debug, Default, Clone)]
pub struct ScriptChooser {
    pub prefix: Vec<usize>,
    pub taken: Vec<(usize, usize)>,
}

impl ScriptChooser {
    pub fn new(prefix: Vec<usize>) -> Self {
        ScriptChooser { prefix, taken: Vec::new() }
    }

    /// The prefix of the next unexplored schedule, or `None` when done.
    pub fn next_prefix(taken: &[(usize, usize)]) -> Option<Vec<usize>> {
        let mut path: Vec<_> = taken.to_vec();
        while let Some((c, n)) = path.pop() {
            if c + 1 < n {
                let mut p: Vec<usize> = path.iter().map(|(c, _)| *c).collect();
                p.push(c + 1);
                return Some(p);
            }
        }
        None
    }
}

impl<C: Chooser> Chooser for Rc<RefCell<C>> {
    fn choose(&mut self, n: usize) -> usize {
        self.borrow_mut().choose(n)
    }
}

impl Chooser for ScriptChooser {
    fn choose(&mut self, n: usize) -> usize {
        let i = self.taken.len();
        let c = self.prefix.get(i).copied().unwrap_or(0).min(n - 1);
        self.taken.push((c, n));
        c
    }
}

struct InFlight {
    ops: Vec<FabricOp>,
    results: Vec<Option<OpResult>>,
    epoch: u64,
    spin_on: Vec<(RemoteAddr, Word)>,
}

/// Scheduler-visible state of one actor.
#[derive(Default)]
pub struct ActorSlot {
    pub alive: bool,
    pub incarnation: u32,
    pub epoch: u64,
    pub crashed_at: Option<u64>,
    pub done: bool,
    pub writes_started: u32,
    crash_requested: bool,
    inflight: Option<InFlight>,
    ready: bool,
    waiting: bool,
}

/// A planned client crash at a workflow step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrashPlan {
    pub actor: ActorId,
    pub point: CrashPoint,
    pub op: Option<OpKind>,
    /// Number of matching writes to let through before crashing.
    pub skip: u32,
    pub fired: bool,
}

/// Membership view published by the master.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Membership {
    pub epoch: u64,
    /// Alive index replica nodes, primary first.
    pub index_nodes: Vec<NodeId>,
    /// Set between prepare-change and commit-change.
    pub preparing: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Stats {
    pub rules: BTreeMap<String, u64>,
    /// (op, rtts) → count, for completed requests.
    pub rtt_hist: BTreeMap<(OpKind, u32), u64>,
    pub fail_queries: u64,
    pub recoveries: Vec<(ActorId, u64)>,
    pub completed: u64,
}

type Task = Pin<Box<dyn Future<Output = ()>>>;

/// Sleep-set candidates, the step just taken and the trace length before it.
type PendingSleep = (Vec<(ActorId, Vec<FabricOp>)>, Vec<FabricOp>, usize);

/// All simulation state shared by tasks through [`Ctx`].
pub struct World {
    pub cfg: Config,
    pub fabric: Fabric,
    pub tick: u64,
    pub trace: Vec<Event>,
    pub trace_fabric: bool,
    pub actors: BTreeMap<ActorId, ActorSlot>,
    pub membership: Membership,
    /// Per completed reconfiguration: epoch → (slot offset → decided word).
    pub decisions: BTreeMap<u64, BTreeMap<u64, Word>>,
    pub mn_crashes: Vec<(u64, NodeId)>,
    pub crashed_mns: Vec<(NodeId, u64)>,
    pub handled_mns: BTreeSet<NodeId>,
    pub client_crashes: Vec<(u64, ActorId)>,
    pub crash_plans: Vec<CrashPlan>,
    pub recovered: BTreeSet<(ActorId, u32)>,
    pub allocs: BTreeMap<ActorId, Allocator>,
    pub stats: Stats,
    pub liveness: Option<String>,
    pub atomic_phases: bool,
    pub block_spins: bool,
    /// Skip schedules that only reorder independent steps.
    pub reduce: bool,
    next_op_id: u64,
    version: u64,
    spawn_queue: Vec<(ActorId, Task)>,
}

impl World {
    pub fn new(cfg: Config, fabric: Fabric, index_nodes: Vec<NodeId>) -> Self {
        World {
            cfg,
            fabric,
            tick: 0,
            trace: Vec::new(),
            trace_fabric: false,
            actors: BTreeMap::new(),
            membership: Membership { epoch: 1, index_nodes, preparing: false },
            decisions: BTreeMap::new(),
            mn_crashes: Vec::new(),
            crashed_mns: Vec::new(),
            handled_mns: BTreeSet::new(),
            client_crashes: Vec::new(),
            crash_plans: Vec::new(),
            recovered: BTreeSet::new(),
            allocs: BTreeMap::new(),
            stats: Stats::default(),
            liveness: None,
            atomic_phases: false,
            block_spins: false,
            reduce: false,
            next_op_id: 0,
            version: 0,
            spawn_queue: Vec::new(),
        }
    }

    pub fn emit(&mut self, e: Event) {
        self.version += 1;
        self.trace.push(e);
    }

    pub fn event(&self, actor: ActorId, kind: &str) -> Event {
        Event::new(self.tick, actor, kind)
    }

    pub fn fresh_op_id(&mut self) -> u64 {
        self.next_op_id += 1;
        self.next_op_id
    }

    pub fn actor(&self, a: ActorId) -> &ActorSlot {
        &self.actors[&a]
    }

    pub fn actor_mut(&mut self, a: ActorId) -> &mut ActorSlot {
        self.actors.get_mut(&a).expect("unknown actor")
    }

    pub fn crash_node_now(&mut self, node: NodeId) {
        if self.fabric.is_alive(node) {
            self.fabric.crash_node(node);
            self.crashed_mns.push((node, self.tick));
            let e = self.event(ActorId::MASTER, "CRASH").with("node", node);
            self.emit(e);
        }
    }

    /// Mark `actor` crashed. Its task never runs again.
    pub fn crash_actor_now(&mut self, actor: ActorId) {
        let tick = self.tick;
        let slot = self.actor_mut(actor);
        if !slot.alive {
            return;
        }
        slot.alive = false;
        slot.crashed_at = Some(tick);
        slot.inflight = None;
        slot.ready = false;
        slot.waiting = false;
        self.fabric.crash_actor(actor);
        let e = self.event(actor, "CRASH").with("client", actor);
        self.emit(e);
    }

    /// True (and consumes the plan) if `actor` must crash at `point` now.
    pub fn crash_due(&mut self, actor: ActorId, point: CrashPoint, op: OpKind) -> bool {
        for plan in &mut self.crash_plans {
            if plan.fired || plan.actor != actor || plan.point != point {
                continue;
            }
            if plan.op.is_some_and(|k| k != op) {
                continue;
            }
            if plan.skip > 0 {
                continue;
            }
            plan.fired = true;
            return true;
        }
        false
    }

    pub fn note_write_start(&mut self, actor: ActorId) {
        self.actor_mut(actor).writes_started += 1;
    }

    /// Count a completed write against the skip budgets of matching plans.
    pub fn note_write_done(&mut self, actor: ActorId, op: OpKind) {
        for plan in &mut self.crash_plans {
            if !plan.fired && plan.actor == actor && plan.op.is_none_or(|k| k == op) && plan.skip > 0 {
                plan.skip -= 1;
            }
        }
    }

    /// Clients (not the master) that have neither finished nor crashed.
    pub fn clients_running(&self) -> bool {
        self.actors.iter().any(|(a, s)| *a != ActorId::MASTER && s.alive && !s.done)
    }

    fn spawn(&mut self, actor: ActorId, task: Task) {
        self.spawn_queue.push((actor, task));
    }
}

/// Handle an actor's task uses to talk to the world.
#[derive(Clone)]
pub struct Ctx {
    world: Rc<RefCell<World>>,
    pub actor: ActorId,
}

impl Ctx {
    pub fn with<R>(&self, f: impl FnOnce(&mut World) -> R) -> R {
        f(&mut self.world.borrow_mut())
    }

    pub fn tick(&self) -> u64 {
        self.world.borrow().tick
    }

    pub fn cfg(&self) -> Config {
        self.world.borrow().cfg.clone()
    }

    pub fn emit(&self, e: Event) {
        self.world.borrow_mut().emit(e);
    }

    pub fn event(&self, kind: &str) -> Event {
        self.world.borrow().event(self.actor, kind)
    }

    pub fn epoch(&self) -> u64 {
        self.world.borrow().actor(self.actor).epoch
    }

    /// Issue one phase and wait for every result (1 RTT).
    pub fn phase(&self, ops: Vec<FabricOp>) -> PhaseFuture {
        PhaseFuture { ctx: self.clone(), ops: Some(ops), spin_on: Vec::new() }
    }

    /// A one-READ phase on a word the caller expects to change. In blocking
    /// mode the read is held back until the word differs from `unchanged`.
    pub fn spin_read(&self, addr: RemoteAddr, unchanged: Word) -> PhaseFuture {
        self.spin_reads(vec![(addr, unchanged)])
    }

    /// Read several words, one of which the caller expects to change. In
    /// blocking mode the phase is held back until one differs.
    pub fn spin_reads(&self, words: Vec<(RemoteAddr, Word)>) -> PhaseFuture {
        PhaseFuture {
            ctx: self.clone(),
            ops: Some(words.iter().map(|(a, _)| FabricOp::read_word(*a)).collect()),
            spin_on: words,
        }
    }

    /// Resolve once `pred` holds.
    pub fn wait_until<F: Fn(&World) -> bool>(&self, pred: F) -> WaitFuture<F> {
        WaitFuture { ctx: self.clone(), pred }
    }

    /// Crash this actor at a phase boundary. Never resolves.
    pub fn crash_self(&self) -> Halt {
        self.world.borrow_mut().crash_actor_now(self.actor);
        Halt
    }

    pub fn crash_due(&self, point: CrashPoint, op: OpKind) -> bool {
        self.world.borrow_mut().crash_due(self.actor, point, op)
    }

    pub fn report_liveness(&self, msg: String) {
        let mut w = self.world.borrow_mut();
        if w.liveness.is_none() {
            w.liveness = Some(msg);
        }
    }

    /// Start `task` as a fresh incarnation of `actor`.
    pub fn spawn<Fut>(&self, actor: ActorId, make: impl FnOnce(Ctx) -> Fut)
    where
        Fut: Future<Output = ()> + 'static,
    {
        let ctx = Ctx { world: self.world.clone(), actor };
        let task = Box::pin(make(ctx));
        let mut w = self.world.borrow_mut();
        let epoch = w.membership.epoch;
        w.fabric.restart_actor(actor);
        let slot = w.actors.entry(actor).or_default();
        slot.alive = true;
        slot.done = false;
        slot.incarnation += 1;
        slot.epoch = epoch;
        slot.crash_requested = false;
        slot.crashed_at = None;
        slot.ready = true;
        w.spawn(actor, task);
    }
}

pub struct PhaseFuture {
    ctx: Ctx,
    ops: Option<Vec<FabricOp>>,
    spin_on: Vec<(RemoteAddr, Word)>,
}

impl Future for PhaseFuture {
    type Output = Vec<OpResult>;

    fn poll(mut self: Pin<&mut Self>, _cx: &mut Context<'_>) -> Poll<Vec<OpResult>> {
        let actor = self.ctx.actor;
        let world = self.ctx.world.clone();
        let mut w = world.borrow_mut();
        if let Some(ops) = self.ops.take() {
            let slot = w.actor_mut(actor);
            if !slot.alive {
                return Poll::Pending;
            }
            if slot.crash_requested {
                slot.crash_requested = false;
                w.crash_actor_now(actor);
                return Poll::Pending;
            }
            if ops.is_empty() {
                return Poll::Ready(Vec::new());
            }
            let epoch = slot.epoch;
            let n = ops.len();
            let spin_on = std::mem::take(&mut self.spin_on);
            slot.inflight = Some(InFlight { ops, results: vec![None; n], epoch, spin_on });
            w.version += 1;
            return Poll::Pending;
        }
        let slot = w.actor_mut(actor);
        match &slot.inflight {
            Some(inf) if inf.results.iter().all(Option::is_some) => {
                let inf = slot.inflight.take().unwrap();
                w.version += 1;
                Poll::Ready(inf.results.into_iter().map(Option::unwrap).collect())
            }
            _ => Poll::Pending,
        }
    }
}

pub struct WaitFuture<F> {
    ctx: Ctx,
    pred: F,
}

impl<F: Fn(&World) -> bool> Future for WaitFuture<F> {
    type Output = ();

    fn poll(self: Pin<&mut Self>, _cx: &mut Context<'_>) -> Poll<()> {
        let mut w = self.ctx.world.borrow_mut();
        if (self.pred)(&w) {
            Poll::Ready(())
        } else {
            w.actor_mut(self.ctx.actor).waiting = true;
            Poll::Pending
        }
    }
}

/// A future that never resolves.
pub struct Halt;

impl Future for Halt {
    type Output = ();

    fn poll(self: Pin<&mut Self>, _cx: &mut Context<'_>) -> Poll<()> {
        Poll::Pending
    }
}

/// Why a run stopped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Stop {
    Quiescent,
    Liveness(String),
    TickLimit,
    /// Reduction left no step to take: an equivalent schedule is explored
    /// elsewhere.
    Pruned,
}

struct TaskEntry {
    actor: ActorId,
    incarnation: u32,
    fut: Task,
}

/// The scheduler.
pub struct Sim {
    world: Rc<RefCell<World>>,
    tasks: Vec<TaskEntry>,
    chooser: Box<dyn Chooser>,
    pub max_ticks: u64,
    pub max_idle: u64,
    /// Steps that need not be taken here: an equivalent schedule that takes
    /// them first is explored by an earlier sibling.
    sleep: Vec<(ActorId, Vec<FabricOp>)>,
    /// Resolved at the next choice.
    pending_sleep: Option<PendingSleep>,
}

fn op_range(op: &FabricOp) -> Option<(RemoteAddr, u64, bool)> {
    match op {
        FabricOp::Read { addr, len } => Some((*addr, *len as u64, false)),
        FabricOp::Write { addr, data } => Some((*addr, data.len() as u64, true)),
        FabricOp::Cas { addr, .. } | FabricOp::Faa { addr, .. } => Some((*addr, 8, true)),
        FabricOp::AllocBlock { .. } | FabricOp::FindBlocks { .. } => None,
    }
}

/// Two ops conflict if they touch overlapping bytes on one node and at
/// least one writes. Block RPCs conflict with everything on their node.
fn conflicts(a: &FabricOp, b: &FabricOp) -> bool {
    if a.node() != b.node() {
        return false;
    }
    match (op_range(a), op_range(b)) {
        (Some((x, xl, xw)), Some((y, yl, yw))) => {
            (xw || yw) && x.offset() < y.offset() + yl && y.offset() < x.offset() + xl
        }
        _ => true,
    }
}

impl Sim {
    pub fn new(world: World, chooser: Box<dyn Chooser>) -> Self {
        let max_idle = world.cfg.lease_ticks * 50 + 1000;
        Sim {
            world: Rc::new(RefCell::new(world)),
            tasks: Vec::new(),
            chooser,
            max_ticks: u64::MAX,
            max_idle,
            sleep: Vec::new(),
            pending_sleep: None,
        }
    }

    pub fn ctx(&self, actor: ActorId) -> Ctx {
        Ctx { world: self.world.clone(), actor }
    }

    pub fn world(&self) -> std::cell::Ref<'_, World> {
        self.world.borrow()
    }

    pub fn world_mut(&self) -> std::cell::RefMut<'_, World> {
        self.world.borrow_mut()
    }

    /// Register the first incarnation of `actor`.
    pub fn spawn<Fut>(&mut self, actor: ActorId, make: impl FnOnce(Ctx) -> Fut)
    where
        Fut: Future<Output = ()> + 'static,
    {
        self.ctx(actor).spawn(actor, make);
    }

    fn drain_spawns(&mut self) {
        let spawned: Vec<_> = std::mem::take(&mut self.world.borrow_mut().spawn_queue);
        for (actor, fut) in spawned {
            let incarnation = self.world.borrow().actor(actor).incarnation;
            self.tasks.retain(|t| t.actor != actor);
            self.tasks.push(TaskEntry { actor, incarnation, fut });
        }
    }

    /// Poll every task that can make progress until nothing changes.
    fn settle(&mut self) {
        let waker = Waker::noop();
        let mut cx = Context::from_waker(waker);
        loop {
            self.drain_spawns();
            let before = self.world.borrow().version;
            let mut i = 0;
            while i < self.tasks.len() {
                let (actor, inc) = (self.tasks[i].actor, self.tasks[i].incarnation);
                let runnable = {
                    let mut w = self.world.borrow_mut();
                    let slot = w.actor_mut(actor);
                    let run = slot.alive && slot.incarnation == inc && (slot.ready || slot.waiting);
                    if run {
                        slot.ready = false;
                        slot.waiting = false;
                    }
                    run
                };
                if runnable && self.tasks[i].fut.as_mut().poll(&mut cx).is_ready() {
                    let mut w = self.world.borrow_mut();
                    w.actor_mut(actor).done = true;
                    w.version += 1;
                    self.tasks.swap_remove(i);
                    continue;
                }
                i += 1;
            }
            let after = self.world.borrow().version;
            if before == after && self.world.borrow().spawn_queue.is_empty() {
                break;
            }
        }
    }

    fn enabled(&self) -> Vec<(ActorId, usize)> {
        let w = self.world.borrow();
        let mut out = Vec::new();
        for (aid, slot) in &w.actors {
            let Some(inf) = &slot.inflight else { continue };
            if !slot.alive {
                continue;
            }
            if w.block_spins
                && !inf.spin_on.is_empty()
                && inf.spin_on.iter().all(|(addr, old)| w.fabric.peek_word(*addr) == Some(*old))
            {
                continue;
            }
            if w.atomic_phases {
                if inf.results.iter().any(Option::is_none) {
                    out.push((*aid, usize::MAX));
                }
                continue;
            }
            let mut seen = BTreeSet::new();
            for (i, op) in inf.ops.iter().enumerate() {
                if inf.results[i].is_none() && seen.insert(op.node()) {
                    out.push((*aid, i));
                }
            }
        }
        out
    }

    fn step_ops(&self, actor: ActorId, idx: usize) -> Vec<FabricOp> {
        let w = self.world.borrow();
        let inf = w.actor(actor).inflight.as_ref().expect("step without a phase");
        if idx == usize::MAX {
            (0..inf.ops.len()).filter(|i| inf.results[*i].is_none()).map(|i| inf.ops[i].clone()).collect()
        } else {
            vec![inf.ops[idx].clone()]
        }
    }

    /// Pick a step outside the sleep set. Steps explored by earlier siblings
    /// stay asleep while they commute with the steps taken since. A step
    /// that emitted a request event wakes everything, so real-time order
    /// between requests is never reordered. `None` when every step sleeps.
    fn choose_reduced(&mut self, choices: Vec<(ActorId, usize)>) -> Option<(ActorId, usize)> {
        if let Some((candidates, taken, len)) = self.pending_sleep.take() {
            let w = self.world.borrow();
            let quiet = w.trace[len..].iter().all(|e| e.kind != "INVOKE" && e.kind != "RESPOND");
            drop(w);
            self.sleep = if quiet {
                candidates
                    .into_iter()
                    .filter(|(_, ops)| !ops.iter().any(|x| taken.iter().any(|y| conflicts(x, y))))
                    .collect()
            } else {
                Vec::new()
            };
        }
        let options: Vec<(ActorId, usize, Vec<FabricOp>)> = choices
            .into_iter()
            .map(|(a, i)| (a, i, self.step_ops(a, i)))
            .filter(|(a, _, ops)| !self.sleep.iter().any(|(b, s)| a == b && s == ops))
            .collect();
        if options.is_empty() {
            return None;
        }
        let c = self.chooser.choose(options.len());
        let mut candidates = std::mem::take(&mut self.sleep);
        candidates.extend(options[..c].iter().map(|(a, _, ops)| (*a, ops.clone())));
        let (actor, idx, ops) = options[c].clone();
        self.pending_sleep = Some((candidates, ops, self.world.borrow().trace.len()));
        Some((actor, idx))
    }

    fn apply(&mut self, actor: ActorId, idx: usize) {
        let mut guard = self.world.borrow_mut();
        let w = &mut *guard;
        let slot = w.actors.get_mut(&actor).unwrap();
        let inf = slot.inflight.as_mut().unwrap();
        let idxs: Vec<usize> = if idx == usize::MAX {
            (0..inf.ops.len()).filter(|i| inf.results[*i].is_none()).collect()
        } else {
            vec![idx]
        };
        let epoch = inf.epoch;
        let mut lines = Vec::new();
        for i in idxs {
            let op = &inf.ops[i];
            let res = w.fabric.apply(actor, op, epoch);
            if w.trace_fabric {
                let mut e = Event::new(w.tick, actor, op.kind()).with("outcome", &res);
                if let Some(a) = op.addr() {
                    e = e.at(a);
                }
                lines.push(e);
            }
            inf.results[i] = Some(res);
        }
        if inf.results.iter().all(Option::is_some) {
            slot.ready = true;
            w.fabric.charge_rtt(actor);
        }
        for e in lines {
            w.emit(e);
        }
        w.version += 1;
    }

    fn inject_due_crashes(&mut self) {
        let mut w = self.world.borrow_mut();
        let tick = w.tick;
        let due: Vec<NodeId> = w.mn_crashes.iter().filter(|(t, _)| *t <= tick).map(|(_, n)| *n).collect();
        w.mn_crashes.retain(|(t, _)| *t > tick);
        for n in due {
            w.crash_node_now(n);
        }
        let due: Vec<ActorId> = w.client_crashes.iter().filter(|(t, _)| *t <= tick).map(|(_, a)| *a).collect();
        w.client_crashes.retain(|(t, _)| *t > tick);
        for a in due {
            if let Some(slot) = w.actors.get_mut(&a) {
                if slot.alive && !slot.done {
                    slot.crash_requested = true;
                }
            }
        }
    }

    /// Run to quiescence (every task finished or permanently halted).
    pub fn run(&mut self) -> Stop {
        let mut idle = 0u64;
        loop {
            self.inject_due_crashes();
            self.settle();
            if let Some(msg) = self.world.borrow().liveness.clone() {
                return Stop::Liveness(msg);
            }
            let choices = self.enabled();
            if self.world.borrow().tick >= self.max_ticks {
                return Stop::TickLimit;
            }
            if choices.is_empty() {
                let any_waiting = {
                    let w = self.world.borrow();
                    self.tasks.iter().any(|t| {
                        let s = w.actor(t.actor);
                        s.alive && s.incarnation == t.incarnation && s.waiting
                    })
                };
                let pending_crashes = {
                    let w = self.world.borrow();
                    !w.mn_crashes.is_empty() && w.clients_running()
                };
                if !any_waiting && !pending_crashes {
                    if self.tasks_blocked() {
                        let msg = format!("deadlock at tick {}", self.world.borrow().tick);
                        self.world.borrow_mut().liveness = Some(msg.clone());
                        return Stop::Liveness(msg);
                    }
                    return Stop::Quiescent;
                }
                idle += 1;
                if idle > self.max_idle {
                    let msg = format!("no progress for {idle} ticks at tick {}", self.world.borrow().tick);
                    self.world.borrow_mut().liveness = Some(msg.clone());
                    return Stop::Liveness(msg);
                }
                let mut w = self.world.borrow_mut();
                w.tick += 1;
                // Waiting tasks re-check their predicates on the new tick.
                for t in &self.tasks {
                    if let Some(s) = w.actors.get_mut(&t.actor) {
                        if s.alive && s.incarnation == t.incarnation && s.waiting {
                            s.waiting = false;
                            s.ready = true;
                        }
                    }
                }
                continue;
            }
            idle = 0;
            let (actor, idx) = if self.world.borrow().reduce {
                match self.choose_reduced(choices) {
                    Some(c) => c,
                    None => return Stop::Pruned,
                }
            } else {
                choices[self.chooser.choose(choices.len())]
            };
            self.apply(actor, idx);
            let mut w = self.world.borrow_mut();
            w.tick += 1;
            for t in &self.tasks {
                if let Some(s) = w.actors.get_mut(&t.actor) {
                    if s.alive && s.incarnation == t.incarnation && s.waiting {
                        s.waiting = false;
                        s.ready = true;
                    }
                }
            }
        }
    }

    /// Some live task is neither finished nor crashed.
    fn tasks_blocked(&self) -> bool {
        let w = self.world.borrow();
        self.tasks.iter().any(|t| {
            let s = w.actor(t.actor);
            s.alive && s.incarnation == t.incarnation && !s.done
        })
    }

    pub fn into_world(self) -> World {
        drop(self.tasks);
        Rc::try_unwrap(self.world).ok().expect("world still shared after run").into_inner()
    }
}
