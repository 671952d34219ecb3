//! Client-level enumeration of small concurrent scenarios.

use std::collections::BTreeSet;

use snapkv::client::Request;
use snapkv::harness::runner::{for_each_schedule_of, Enumeration, RunResult};
use snapkv::harness::scenario::Scenario;
use snapkv::harness::workload::key_name;
use snapkv::index::{group_len, locate, parse_group, slot_offset};
use snapkv::sim::World;

fn scenario() -> Scenario {
    Scenario { keys: 1, cache: false, ..Scenario::default() }
}

fn full(reduce: bool) -> Enumeration {
    Enumeration { atomic_phases: true, reduce, limit: 1_000_000 }
}

fn search() -> Vec<Request> {
    vec![Request::search(&key_name(0))]
}

fn update(v: &str) -> Vec<Request> {
    vec![Request::update(&key_name(0), v.as_bytes())]
}

/// Every schedule of `streams`, with its responses as (actor, op, status, value).
fn enumerate(streams: &[Vec<Request>], reduce: bool, mut visit: impl FnMut(&RunResult)) -> usize {
    let (n, complete) = for_each_schedule_of(&scenario(), streams, full(reduce), |r| {
        let problems = r.problems();
        assert!(problems.is_empty(), "{problems:?}\n{}", r.trace_text());
        visit(r);
    })
    .unwrap();
    assert!(complete);
    n
}

/// Responses to the enumerated clients, skipping the loader's preload.
fn responses(r: &RunResult) -> Vec<(String, String, String, String)> {
    let loader = r.world.actors.keys().filter(|a| **a != snapkv::fabric::ActorId::MASTER).max().copied();
    let mut out: Vec<_> = r
        .trace
        .iter()
        .filter(|e| e.kind == "RESPOND" && Some(e.actor) != loader)
        .map(|e| {
            let f = |k| e.get(k).unwrap_or("").to_string();
            (e.actor.to_string(), f("op"), f("status"), f("value"))
        })
        .collect();
    out.sort();
    out
}

/// The key's index group as seen on each replica.
fn group_replicas(w: &World, key: &[u8]) -> Vec<Vec<u64>> {
    let loc = locate(&w.cfg, key);
    let base = slot_offset(w.fabric.geometry(), &w.cfg, loc.group, 0);
    w.membership
        .index_nodes
        .iter()
        .map(|n| {
            let bytes = w.fabric.peek(snapkv::fabric::RemoteAddr::new(*n, base), group_len(&w.cfg)).unwrap();
            parse_group(&bytes)
        })
        .collect()
}

#[test]
fn read_only_schedules_match_the_multinomial_count() {
    // Each search is three scheduler steps and reads commute, so without
    // reduction every interleaving is distinct: (3k)! / (3!)^k.
    assert_eq!(enumerate(&[search(), search()], false, |_| {}), 20);
    assert_eq!(enumerate(&[search(), search(), search()], false, |_| {}), 1680);
}

#[test]
fn reduction_keeps_every_outcome() {
    let cases = [
        vec![update("a"), update("b")],
        vec![update("a"), search()],
        vec![update("a"), vec![Request::delete(&key_name(0))]],
        vec![vec![Request::insert(b"fresh", b"a")], vec![Request::insert(b"fresh", b"b")]],
    ];
    for streams in &cases {
        let mut all = BTreeSet::new();
        let n_all = enumerate(streams, false, |r| {
            all.insert(responses(r));
        });
        let mut reduced = BTreeSet::new();
        let n_reduced = enumerate(streams, true, |r| {
            reduced.insert(responses(r));
        });
        assert!(n_reduced < n_all, "reduction removed nothing");
        assert_eq!(all, reduced);
    }
}

#[test]
fn two_writers_and_a_reader_on_three_replicas() {
    let mut finals = BTreeSet::new();
    let n = enumerate(&[update("a"), update("b"), search()], true, |r| {
        let groups = group_replicas(&r.world, &key_name(0));
        assert!(groups.iter().all(|g| *g == groups[0]), "replicas disagree: {groups:?}");
        let rs = responses(r);
        assert!(rs.iter().filter(|x| x.1 == "UPDATE").all(|x| x.2 == "OK"));
        finals.insert(groups[0].clone());
    });
    assert!(n > 1000);
    assert!(finals.len() >= 2, "both proposals can win");
}

#[test]
fn racing_inserts_of_one_fresh_key() {
    let streams = [vec![Request::insert(b"fresh", b"a")], vec![Request::insert(b"fresh", b"b")], search()];
    enumerate(&streams, true, |r| {
        let mut st: Vec<String> = responses(r).into_iter().filter(|x| x.1 == "INSERT").map(|x| x.2).collect();
        st.sort();
        assert_eq!(st, ["EXISTS", "OK"], "{}", r.trace_text());
    });
}

#[test]
fn update_delete_race() {
    let mut outcomes = BTreeSet::new();
    enumerate(&[update("a"), vec![Request::delete(&key_name(0))], search()], true, |r| {
        outcomes.insert(responses(r).into_iter().map(|x| (x.1, x.2)).collect::<Vec<_>>());
    });
    // Both orders occur: update first (both OK) and delete first (update
    // finds nothing).
    assert!(outcomes.iter().any(|o| o.contains(&("UPDATE".into(), "NOT_FOUND".into()))));
    assert!(outcomes.iter().any(|o| o.contains(&("UPDATE".into(), "OK".into()))));
}
