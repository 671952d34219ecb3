//! Build and run simulations from scenarios.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::scenario::{CrashSpec, Mode, Scenario};
use super::workload;
use super::{audit, checker};
use crate::client::{Client, Request};
use crate::config::Config;
use crate::error::Result;
use crate::event::Event;
use crate::fabric::ActorId;
use crate::master::run_master;
use crate::memalloc::{build_fabric, reclaim_scan};
use crate::sim::{Chooser, CrashPlan, RandomChooser, ScriptChooser, Sim, Stats, Stop, World};
use crate::slotproto::{slot_write, WriteParams, WriteReport};

/// Everything a finished run leaves behind.
pub struct RunResult {
    pub trace: Vec<Event>,
    pub stats: Stats,
    pub stop: Stop,
    pub world: World,
}

impl RunResult {
    /// Everything wrong with this run: liveness, linearizability and audits.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        match (&self.stop, &self.world.liveness) {
            (Stop::Quiescent, None) => {}
            (Stop::Quiescent, Some(m)) | (Stop::Liveness(m), _) => out.push(format!("liveness: {m}")),
            (Stop::TickLimit, _) => out.push("liveness: tick limit reached".into()),
            (Stop::Pruned, _) => {}
        }
        if let Err(v) = checker::check(&self.trace) {
            out.push(format!("linearizability: {v}"));
        }
        out.extend(audit::audit(&self.trace, &self.world).iter().map(ToString::to_string));
        out
    }

    pub fn trace_text(&self) -> String {
        let mut out = String::new();
        for e in &self.trace {
            out.push_str(&e.to_string());
            out.push('\n');
        }
        out
    }
}

/// Actor that inserts the initial keys before the clients start.
pub fn loader_id(s: &Scenario) -> ActorId {
    ActorId(s.clients as u32)
}

/// A world with crash schedules installed, but no tasks yet.
pub fn build_world(s: &Scenario) -> Result<World> {
    s.validate()?;
    let cfg = s.config();
    let (fabric, index_nodes) = build_fabric(&cfg)?;
    let mut w = World::new(cfg, fabric, index_nodes);
    for c in &s.crashes {
        match *c {
            CrashSpec::Node { node, tick } => w.mn_crashes.push((tick, node)),
            CrashSpec::ClientAt { client, tick } => w.client_crashes.push((tick, client)),
            CrashSpec::ClientPoint { client, point, op, skip } => {
                w.crash_plans.push(CrashPlan { actor: client, point, op, skip, fired: false })
            }
        }
    }
    Ok(w)
}

/// Spawn the master, the loader and one task per request stream.
pub fn spawn_tasks(sim: &mut Sim, s: &Scenario, streams: Vec<Vec<Request>>) {
    sim.spawn(ActorId::MASTER, run_master);
    let loader = loader_id(s);
    let initial = if s.preload { workload::preload(s) } else { Vec::new() };
    sim.spawn(loader, move |ctx| async move {
        let Ok(mut c) = Client::start(ctx.clone()).await else {
            ctx.report_liveness(format!("{} could not get memory", ctx.actor));
            return;
        };
        for req in &initial {
            c.execute(req).await;
        }
        reclaim_scan(&ctx).await;
    });
    // In exhaustive mode clients start one at a time and skip the final
    // reclaim scan, so the enumeration covers only the requests.
    let exhaustive = s.mode == Mode::Exhaustive;
    let started = Rc::new(Cell::new(0usize));
    let clients = streams.len();
    for (i, reqs) in streams.into_iter().enumerate() {
        let started = started.clone();
        sim.spawn(ActorId(i as u32), move |ctx| async move {
            if exhaustive {
                let turn = started.clone();
                ctx.wait_until(move |w| w.actor(loader).done && turn.get() == i).await;
            }
            let Ok(mut c) = Client::start(ctx.clone()).await else {
                ctx.report_liveness(format!("{} could not get memory", ctx.actor));
                return;
            };
            started.set(started.get() + 1);
            let all = started.clone();
            ctx.wait_until(move |w| w.actor(loader).done && all.get() == clients).await;
            for req in &reqs {
                c.execute(req).await;
            }
            if !exhaustive {
                reclaim_scan(&ctx).await;
            }
        });
    }
}

/// Concurrent writes of `writers` clients to one slot replicated on `r`
/// nodes, under the seeded random scheduler. Writer `i` proposes
/// `0x100 + i`. Returns how the run stopped, each writer's report and the
/// RTTs the fabric charged it.
pub fn slot_race(seed: u64, r: usize, writers: usize) -> Result<(Stop, Vec<(WriteReport, u64)>)> {
    let cfg = Config { num_mns: r, r, num_regions: 2, ..Config::default() };
    let (fabric, index_nodes) = build_fabric(&cfg)?;
    let offset = fabric.geometry().index_base;
    let mut sim = Sim::new(World::new(cfg, fabric, index_nodes), Box::new(RandomChooser::new(seed)));
    let reports = Rc::new(RefCell::new(Vec::new()));
    for i in 0..writers as u32 {
        let reports = reports.clone();
        sim.spawn(ActorId(i), move |ctx| async move {
            let rep = slot_write(&ctx, offset, 0x100 + u64::from(i), WriteParams::default()).await;
            reports.borrow_mut().push((ActorId(i), rep));
        });
    }
    let stop = sim.run();
    let world = sim.into_world();
    let out = reports.borrow().iter().map(|(a, rep)| (rep.clone(), world.fabric.rtts(*a))).collect();
    Ok((stop, out))
}

/// Run a scenario with a given scheduler.
pub fn run_with(s: &Scenario, chooser: Box<dyn Chooser>) -> Result<RunResult> {
    run_inner(s, workload::generate(s), chooser)
}

/// Run explicit request streams, one per client, under the scenario's
/// seeded random scheduler. `s.clients` is taken from the stream count.
pub fn run_streams(s: &Scenario, streams: Vec<Vec<Request>>) -> Result<RunResult> {
    let s = Scenario { clients: streams.len(), ..s.clone() };
    run_inner(&s, streams, Box::new(RandomChooser::new(s.seed)))
}

fn run_inner(s: &Scenario, streams: Vec<Vec<Request>>, chooser: Box<dyn Chooser>) -> Result<RunResult> {
    let world = build_world(s)?;
    let mut sim = Sim::new(world, chooser);
    sim.max_ticks = s.max_ticks;
    spawn_tasks(&mut sim, s, streams);
    let stop = sim.run();
    let world = sim.into_world();
    Ok(RunResult { trace: world.trace.clone(), stats: world.stats.clone(), stop, world })
}

/// Run a scenario under the seeded random scheduler.
pub fn run(s: &Scenario) -> Result<RunResult> {
    run_with(s, Box::new(RandomChooser::new(s.seed)))
}

/// How schedules are enumerated.
#[derive(Debug, Clone, Copy)]
pub struct Enumeration {
    /// Each fabric phase is one step; otherwise each op is.
    pub atomic_phases: bool,
    /// Skip schedules that only reorder adjacent independent steps.
    pub reduce: bool,
    /// Stop after this many complete schedules.
    pub limit: usize,
}

/// Enumerate schedules of a small scenario by replaying choice prefixes.
/// Calls `visit` on every complete run. Returns the number of runs and
/// whether the enumeration finished within the limit.
pub fn for_each_schedule(s: &Scenario, e: Enumeration, visit: impl FnMut(&RunResult)) -> Result<(usize, bool)> {
    for_each_schedule_of(s, &workload::generate(s), e, visit)
}

/// [`for_each_schedule`] with explicit request streams, one per client.
pub fn for_each_schedule_of(
    s: &Scenario,
    streams: &[Vec<Request>],
    e: Enumeration,
    mut visit: impl FnMut(&RunResult),
) -> Result<(usize, bool)> {
    let s = &Scenario { clients: streams.len(), mode: Mode::Exhaustive, ..s.clone() };
    let mut prefix = Some(Vec::new());
    let mut runs = 0;
    while let Some(p) = prefix {
        if runs == e.limit {
            return Ok((runs, false));
        }
        let chooser = Rc::new(RefCell::new(ScriptChooser::new(p)));
        let mut world = build_world(s)?;
        world.atomic_phases = e.atomic_phases;
        world.reduce = e.reduce;
        world.block_spins = true;
        let mut sim = Sim::new(world, Box::new(chooser.clone()));
        sim.max_ticks = s.max_ticks;
        spawn_tasks(&mut sim, s, streams.to_vec());
        let stop = sim.run();
        if stop != Stop::Pruned {
            let world = sim.into_world();
            let r = RunResult { trace: world.trace.clone(), stats: world.stats.clone(), stop, world };
            visit(&r);
            runs += 1;
        }
        prefix = ScriptChooser::next_prefix(&chooser.borrow().taken);
    }
    Ok((runs, true))
}
