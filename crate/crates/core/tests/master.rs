//! Memory-node crash handling and client recovery.

use snapkv::client::Request;
use snapkv::event::Event;
use snapkv::fabric::{ActorId, NodeId, RemoteAddr};
use snapkv::harness::audit::conservation;
use snapkv::harness::runner::{build_world, run_streams, RunResult};
use snapkv::harness::scenario::{CrashSpec, Scenario};
use snapkv::harness::workload::key_name;
use snapkv::index::{group_len, locate, parse_group, slot_offset};
use snapkv::oplog::MASTER_SENTINEL;

fn checked(s: &Scenario, streams: Vec<Vec<Request>>) -> RunResult {
    let r = run_streams(s, streams).unwrap();
    let problems = r.problems();
    assert!(problems.is_empty(), "seed {}: {problems:?}\n{}", s.seed, r.trace_text());
    r
}

fn index_nodes(s: &Scenario) -> Vec<NodeId> {
    build_world(s).unwrap().membership.index_nodes
}

fn events<'a>(r: &'a RunResult, kind: &'a str) -> impl Iterator<Item = &'a Event> {
    r.trace.iter().filter(move |e| e.kind == kind)
}

/// The key's group on every alive index replica.
fn groups(r: &RunResult, key: &[u8]) -> Vec<Vec<u64>> {
    let w = &r.world;
    let loc = locate(&w.cfg, key);
    let base = slot_offset(w.fabric.geometry(), &w.cfg, loc.group, 0);
    w.membership
        .index_nodes
        .iter()
        .map(|n| parse_group(&w.fabric.peek(RemoteAddr::new(*n, base), group_len(&w.cfg)).unwrap()))
        .collect()
}

fn assert_replicas_agree(r: &RunResult, key: &[u8]) {
    let g = groups(r, key);
    assert!(g.iter().all(|x| *x == g[0]), "replicas disagree: {g:?}");
}

fn searches(keys: usize, rounds: usize) -> Vec<Request> {
    (0..rounds).flat_map(|_| (0..keys).map(|k| Request::search(&key_name(k)))).collect()
}

#[test]
fn backup_crash_in_a_quiet_period_changes_no_value() {
    let base = Scenario { keys: 4, ..Scenario::default() };
    let backup = index_nodes(&base)[1];
    let mut s = base.clone();
    s.crashes.push(CrashSpec::Node { node: backup, tick: 300 });
    let r = checked(&s, vec![searches(4, 60)]);
    let views: Vec<&Event> = events(&r, "INSTALL_VIEW").collect();
    assert_eq!(views.len(), 1);
    assert_eq!(views[0].get_u64("epoch"), Some(2));
    assert_eq!(views[0].get_u64("decided"), Some(0));
    assert!(!r.world.membership.index_nodes.contains(&backup));
    for e in events(&r, "RESPOND") {
        assert_eq!(e.get("status"), Some("OK"));
    }
    for k in 0..4 {
        assert_replicas_agree(&r, &key_name(k));
    }
}

#[test]
fn primary_crash_during_conflicting_updates() {
    let k = key_name(0);
    for seed in 0..25 {
        let base = Scenario { seed, keys: 2, ..Scenario::default() };
        let primary = index_nodes(&base)[0];
        let mut s = base.clone();
        s.crashes.push(CrashSpec::Node { node: primary, tick: 250 + seed * 13 });
        let streams =
            (0..4).map(|c| (0..12).map(|i| Request::update(&k, format!("c{c}.{i}").as_bytes())).collect()).collect();
        let r = checked(&s, streams);
        assert_eq!(events(&r, "INSTALL_VIEW").count(), 1, "seed {seed}");
        assert_replicas_agree(&r, &k);
    }
}

#[test]
fn reads_survive_an_index_crash_without_the_master() {
    for seed in 0..10 {
        for which in 0..2 {
            let base = Scenario { seed, keys: 8, ..Scenario::default() };
            let node = index_nodes(&base)[which];
            let mut s = base.clone();
            s.crashes.push(CrashSpec::Node { node, tick: 600 });
            let r = checked(&s, (0..3).map(|_| searches(8, 20)).collect());
            assert_eq!(events(&r, "INSTALL_VIEW").count(), 1);
            assert_eq!(events(&r, "FAIL_QUERY").count(), 0, "seed {seed}");
            assert_eq!(r.stats.fail_queries, 0);
        }
    }
}

/// One client updates key 0 once and crashes at `point`.
fn crash_update(point: &str, seed: u64) -> RunResult {
    let mut s = Scenario { seed, keys: 1, ..Scenario::default() };
    s.crashes.push(format!("client:0:{point}:update:0").parse().unwrap());
    let r = checked(&s, vec![vec![Request::update(&key_name(0), b"new")]]);
    assert_eq!(events(&r, "RECOVERY").count(), 1);
    assert_replicas_agree(&r, &key_name(0));
    r
}

fn installs(r: &RunResult) -> Vec<&Event> {
    events(r, "INSTALL").collect()
}

fn primary_word(r: &RunResult) -> u64 {
    let g = groups(r, &key_name(0));
    *g[0].iter().find(|w| **w != 0).unwrap()
}

#[test]
fn crash_while_writing_the_object_is_reclaimed() {
    for seed in 0..5 {
        let r = crash_update("c0", seed);
        let ins = installs(&r);
        // Only the preload is installed; the torn object never reaches a slot.
        assert_eq!(ins.len(), 1);
        assert_eq!(ins[0].get_u64("word"), Some(primary_word(&r)));
        assert_eq!(events(&r, "PROPOSAL").count(), 1);
        assert_eq!(events(&r, "REDO").count() + events(&r, "FINISH").count(), 0);
    }
}

#[test]
fn crash_after_the_commit_is_installed_by_recovery() {
    for seed in 0..5 {
        let r = crash_update("c2", seed);
        let ins = installs(&r);
        assert_eq!(ins.len(), 2);
        assert_eq!(ins[1].actor, ActorId(0));
        assert_eq!(ins[1].get("id"), Some("0"), "installed by the recovery run");
        assert_eq!(ins[1].get_u64("word"), Some(primary_word(&r)));
        assert_eq!(events(&r, "FINISH").count(), 1);
    }
}

#[test]
fn crash_after_the_primary_cas_needs_no_repair() {
    for seed in 0..5 {
        let r = crash_update("c3", seed);
        let ins = installs(&r);
        assert_eq!(ins.len(), 2);
        assert_ne!(ins[1].get("id"), Some("0"), "installed by the request itself");
        assert_eq!(ins[1].get_u64("word"), Some(primary_word(&r)));
        assert_eq!(events(&r, "REDO").count(), 0);
    }
}

#[test]
fn uncommitted_write_is_redone_once() {
    for seed in 0..5 {
        let r = crash_update("c1", seed);
        assert_eq!(events(&r, "REDO").count(), 1);
        assert_eq!(installs(&r).len(), 2);
    }
}

#[test]
fn client_and_index_crash_together() {
    let k = key_name(0);
    for seed in 0..20 {
        for point in ["c1", "c2"] {
            let base = Scenario { seed, keys: 2, ..Scenario::default() };
            let node = index_nodes(&base)[(seed % 2) as usize];
            let mut s = base.clone();
            s.crashes.push(format!("client:0:{point}:update:1").parse().unwrap());
            s.crashes.push(CrashSpec::Node { node, tick: 200 + seed * 7 });
            let streams =
                (0..3).map(|c| (0..8).map(|i| Request::update(&k, format!("c{c}.{i}").as_bytes())).collect()).collect();
            let r = run_streams(&s, streams).unwrap();
            let other: Vec<String> = r.problems().into_iter().filter(|p| !p.starts_with("conservation")).collect();
            assert!(other.is_empty(), "seed {seed} {point}: {other:?}");
            // A write the master decided after the primary holding the
            // replaced word crashed cannot free that word's object.
            let unknown_old = events(&r, "FINISH").filter(|e| e.get_u64("old") == Some(MASTER_SENTINEL)).count();
            let leaked: usize = conservation(&r.world).values().map(|b| b.leaked.len()).sum();
            assert!(conservation(&r.world).values().all(|b| b.doubled.is_empty()), "seed {seed} {point}");
            assert!(leaked <= unknown_old, "seed {seed} {point}: {leaked} leaked, {unknown_old} unknown");
            assert_replicas_agree(&r, &k);
            // Node handling always precedes the client's recovery.
            let view = r.trace.iter().position(|e| e.kind == "INSTALL_VIEW");
            let recovery = r.trace.iter().position(|e| e.kind == "RECOVERY");
            if let (Some(v), Some(c)) = (view, recovery) {
                let crashed_before_view = r.world.stats.recoveries.iter().all(|(_, t)| *t > r.trace[v].tick);
                assert!(v < c || !crashed_before_view, "seed {seed} {point}");
            }
        }
    }
}
