//! Request semantics and RTT costs of single and concurrent clients.

use snapkv::client::Request;
use snapkv::event::Event;
use snapkv::fabric::ActorId;
use snapkv::harness::runner::{run_streams, RunResult};
use snapkv::harness::scenario::Scenario;
use snapkv::harness::workload::key_name;

fn scenario(cache: bool) -> Scenario {
    Scenario { keys: 4, cache, ..Scenario::default() }
}

fn run(cache: bool, streams: Vec<Vec<Request>>) -> RunResult {
    let r = run_streams(&scenario(cache), streams).unwrap();
    let problems = r.problems();
    assert!(problems.is_empty(), "{problems:?}");
    r
}

/// Responses of one client, in order.
fn responses(r: &RunResult, client: u32) -> Vec<&Event> {
    r.trace.iter().filter(|e| e.kind == "RESPOND" && e.actor == ActorId(client)).collect()
}

fn field<'a>(e: &'a Event, k: &str) -> &'a str {
    e.get(k).unwrap_or("")
}

fn summary(e: &Event) -> (String, String, u64) {
    (field(e, "op").to_string(), field(e, "status").to_string(), e.get_u64("rtts").unwrap())
}

#[test]
fn uncontended_costs() {
    let k = key_name(0);
    let r = run(
        false,
        vec![vec![
            Request::insert(b"fresh", b"v1"),
            Request::update(&k, b"v2"),
            Request::search(&k),
            Request::delete(&k),
            Request::search(&k),
        ]],
    );
    let got: Vec<_> = responses(&r, 0).into_iter().map(summary).collect();
    let want = [
        ("INSERT", "OK", 4),
        ("UPDATE", "OK", 5),
        ("SEARCH", "OK", 2),
        ("DELETE", "OK", 6),
        ("SEARCH", "NOT_FOUND", 1),
    ];
    let want: Vec<_> = want.iter().map(|(o, s, n)| (o.to_string(), s.to_string(), *n)).collect();
    assert_eq!(got, want);
}

#[test]
fn cached_keys_take_the_short_paths() {
    let k = key_name(1);
    let r =
        run(true, vec![vec![Request::search(&k), Request::search(&k), Request::update(&k, b"v"), Request::delete(&k)]]);
    let got: Vec<_> =
        responses(&r, 0).iter().map(|e| (field(e, "path").to_string(), e.get_u64("rtts").unwrap())).collect();
    assert_eq!(got[1], ("hit".into(), 1), "{got:?}");
    assert_eq!(got[2], ("hit".into(), 4), "{got:?}");
    assert_eq!(got[3].1, 5, "{got:?}");
}

#[test]
fn sequential_semantics() {
    let k = key_name(2);
    let r = run(
        false,
        vec![vec![
            Request::insert(&k, b"dup"),
            Request::update(b"absent", b"x"),
            Request::delete(b"absent"),
            Request::search(b"absent"),
            Request::update(&k, b"new"),
            Request::search(&k),
            Request::delete(&k),
            Request::search(&k),
            Request::insert(&k, b"again"),
            Request::search(&k),
        ]],
    );
    let got: Vec<_> = responses(&r, 0)
        .iter()
        .map(|e| (field(e, "status").to_string(), e.get_bytes("value").unwrap_or_default()))
        .collect();
    let want: Vec<(&str, &[u8])> = vec![
        ("EXISTS", b""),
        ("NOT_FOUND", b""),
        ("NOT_FOUND", b""),
        ("NOT_FOUND", b""),
        ("OK", b""),
        ("OK", b"new"),
        ("OK", b""),
        ("NOT_FOUND", b""),
        ("OK", b""),
        ("OK", b"again"),
    ];
    let want: Vec<_> = want.into_iter().map(|(s, v)| (s.to_string(), v.to_vec())).collect();
    assert_eq!(got, want);
}

#[test]
fn concurrent_updates_all_succeed() {
    let k = key_name(0);
    for seed in 0..30 {
        let s = Scenario { seed, ..scenario(true) };
        let streams = (0..4).map(|c| vec![Request::update(&k, format!("c{c}").as_bytes())]).collect();
        let r = run_streams(&s, streams).unwrap();
        assert!(r.problems().is_empty(), "seed {seed}: {:?}", r.problems());
        for c in 0..4 {
            assert_eq!(field(responses(&r, c)[0], "status"), "OK", "seed {seed}");
        }
    }
}

#[test]
fn concurrent_inserts_of_one_key_admit_one() {
    for seed in 0..30 {
        let s = Scenario { seed, ..scenario(true) };
        let streams = (0..3).map(|c| vec![Request::insert(b"fresh", format!("c{c}").as_bytes())]).collect();
        let r = run_streams(&s, streams).unwrap();
        assert!(r.problems().is_empty(), "seed {seed}: {:?}", r.problems());
        let ok = (0..3).filter(|c| field(responses(&r, *c)[0], "status") == "OK").count();
        assert_eq!(ok, 1, "seed {seed}");
    }
}

#[test]
fn failed_writes_return_their_objects() {
    // NOT_FOUND updates and deletes cancel their staged objects; the
    // conservation audit inside `problems` checks nothing leaked.
    let reqs: Vec<Request> = (0..40)
        .flat_map(|i| [Request::update(format!("gone{i}").as_bytes(), b"x"), Request::delete(b"gone")])
        .collect();
    let r = run(false, vec![reqs]);
    assert!(responses(&r, 0).iter().all(|e| field(e, "status") == "NOT_FOUND"));
}
