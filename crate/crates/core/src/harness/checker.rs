//! Linearizability checking of per-key histories against map semantics.
//!
//! Keys are independent, so each key's history is checked on its own with
//! a Wing–Gong style search memoized on (linearized set, current value).
//! Operations without a response may take effect at any point after their
//! invocation, or never.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use crate::event::{Event, OpKind, Status};
use crate::fabric::ActorId;

/// One request as seen by the checker. Positions are trace indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Op {
    pub id: u64,
    pub actor: ActorId,
    pub kind: OpKind,
    pub key: Vec<u8>,
    pub value: Vec<u8>,
    /// `None` while pending.
    pub result: Option<(Status, Option<Vec<u8>>)>,
    pub inv: usize,
    pub resp: usize,
}

impl Op {
    pub fn is_pending(&self) -> bool {
        self.result.is_none()
    }
}

/// Pair INVOKE and RESPOND events into operations.
pub fn history(trace: &[Event]) -> Vec<Op> {
    let mut ops: Vec<Op> = Vec::new();
    let mut open: HashMap<u64, usize> = HashMap::new();
    for (pos, e) in trace.iter().enumerate() {
        match e.kind.as_str() {
            "INVOKE" => {
                let (Some(id), Some(kind), Some(key)) =
                    (e.get_u64("id"), e.get("op").and_then(|o| o.parse().ok()), e.get_bytes("key"))
                else {
                    continue;
                };
                open.insert(id, ops.len());
                ops.push(Op {
                    id,
                    actor: e.actor,
                    kind,
                    key,
                    value: e.get_bytes("value").unwrap_or_default(),
                    result: None,
                    inv: pos,
                    resp: usize::MAX,
                });
            }
            "RESPOND" => {
                let Some(i) = e.get_u64("id").and_then(|id| open.remove(&id)) else { continue };
                let status = e.get("status").and_then(|s| s.parse().ok()).unwrap_or(Status::Error);
                ops[i].result = Some((status, e.get_bytes("value")));
                ops[i].resp = pos;
            }
            _ => {}
        }
    }
    ops
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub key: Vec<u8>,
    /// Operations that could not be ordered at the furthest point reached.
    pub stuck: Vec<u64>,
    /// Completed operations linearized before getting stuck.
    pub linearized: usize,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "key {} has no linearization: stuck after {} ops at ops {:?}",
            String::from_utf8_lossy(&self.key),
            self.linearized,
            self.stuck
        )
    }
}

/// Check a whole trace.
pub fn check(trace: &[Event]) -> Result<(), Violation> {
    check_history(&history(trace))
}

pub fn check_history(ops: &[Op]) -> Result<(), Violation> {
    let mut by_key: BTreeMap<&[u8], Vec<&Op>> = BTreeMap::new();
    for op in ops {
        by_key.entry(&op.key).or_default().push(op);
    }
    for (key, ops) in by_key {
        check_key(key, ops)?;
    }
    Ok(())
}

type State = Option<u32>;

/// Successor states of applying `op` to `state`; empty if inconsistent.
fn apply(op: &Op, state: State, val: u32, lookup: &HashMap<&[u8], u32>) -> Vec<State> {
    let present = state.is_some();
    match &op.result {
        None => {
            let effect = match op.kind {
                OpKind::Search => state,
                OpKind::Insert if !present => Some(val),
                OpKind::Update if present => Some(val),
                OpKind::Delete => None,
                _ => state,
            };
            if effect == state {
                vec![state]
            } else {
                vec![effect, state]
            }
        }
        Some((status, got)) => match (op.kind, status) {
            (_, Status::Error | Status::TableFull) => vec![state],
            (OpKind::Search, Status::Ok) => {
                let want = got.as_deref().and_then(|g| lookup.get(g).copied());
                if present && want == state {
                    vec![state]
                } else {
                    vec![]
                }
            }
            (OpKind::Insert, Status::Ok) if !present => vec![Some(val)],
            (OpKind::Insert, Status::Exists) if present => vec![state],
            (OpKind::Update, Status::Ok) if present => vec![Some(val)],
            (OpKind::Delete, Status::Ok) if present => vec![None],
            (OpKind::Search | OpKind::Update | OpKind::Delete, Status::NotFound) if !present => vec![state],
            _ => vec![],
        },
    }
}

#[derive(Clone, PartialEq, Eq, Hash)]
struct Config {
    /// Every op before `prefix` is linearized.
    prefix: usize,
    /// Linearized ops at or after `prefix`.
    extra: BTreeSet<usize>,
    state: State,
}

impl Config {
    fn done(&self, i: usize) -> bool {
        i < self.prefix || self.extra.contains(&i)
    }

    fn mark(&self, i: usize, state: State) -> Config {
        let mut next = Config { prefix: self.prefix, extra: self.extra.clone(), state };
        next.extra.insert(i);
        while next.extra.remove(&next.prefix) {
            next.prefix += 1;
        }
        next
    }
}

fn check_key(key: &[u8], mut ops: Vec<&Op>) -> Result<(), Violation> {
    ops.sort_by_key(|o| o.inv);
    let n = ops.len();
    // Intern written values; reads of unknown values can never match.
    let mut lookup: HashMap<&[u8], u32> = HashMap::new();
    for op in &ops {
        if matches!(op.kind, OpKind::Insert | OpKind::Update) {
            let next = lookup.len() as u32;
            lookup.entry(op.value.as_slice()).or_insert(next);
        }
    }
    let vals: Vec<u32> = ops.iter().map(|o| lookup.get(o.value.as_slice()).copied().unwrap_or(u32::MAX)).collect();
    let completed_after: Vec<usize> = {
        let mut v = vec![0; n + 1];
        for i in (0..n).rev() {
            v[i] = v[i + 1] + usize::from(!ops[i].is_pending());
        }
        v
    };
    let finished = |c: &Config| completed_after[c.prefix] == c.extra.iter().filter(|i| !ops[**i].is_pending()).count();

    let start = Config { prefix: 0, extra: BTreeSet::new(), state: None };
    let mut seen: HashSet<Config> = HashSet::new();
    let mut stack = vec![start];
    let mut best: Option<Config> = None;
    while let Some(c) = stack.pop() {
        if finished(&c) {
            return Ok(());
        }
        if !seen.insert(c.clone()) {
            continue;
        }
        if best.as_ref().is_none_or(|b| c.prefix + c.extra.len() > b.prefix + b.extra.len()) {
            best = Some(c.clone());
        }
        // Minimal ops: invoked before every unlinearized op has responded.
        let mut bound = usize::MAX;
        let mut cands = Vec::new();
        let mut i = c.prefix;
        while i < n && ops[i].inv < bound {
            if !c.done(i) {
                bound = bound.min(ops[i].resp);
                cands.push(i);
            }
            i += 1;
        }
        for &i in cands.iter().rev().filter(|i| ops[**i].inv < bound) {
            for s in apply(ops[i], c.state, vals[i], &lookup) {
                stack.push(c.mark(i, s));
            }
        }
    }
    let b = best.unwrap_or(Config { prefix: 0, extra: BTreeSet::new(), state: None });
    let stuck = (b.prefix..n).filter(|i| !b.done(*i)).take(8).map(|i| ops[i].id).collect();
    Err(Violation { key: key.to_vec(), stuck, linearized: b.prefix + b.extra.len() })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct H(Vec<Event>, u64);

    impl H {
        fn new() -> Self {
            H(Vec::new(), 0)
        }

        fn inv(&mut self, actor: u32, op: OpKind, key: &str, value: &str) -> u64 {
            self.1 += 1;
            let mut e = Event::new(0, ActorId(actor), "INVOKE").with("id", self.1).with("op", op);
            e = e.with_bytes("key", key.as_bytes());
            if !value.is_empty() {
                e = e.with_bytes("value", value.as_bytes());
            }
            self.0.push(e);
            self.1
        }

        fn resp(&mut self, id: u64, status: Status, value: Option<&str>) {
            let mut e = Event::new(0, ActorId(0), "RESPOND").with("id", id).with("status", status);
            if let Some(v) = value {
                e = e.with_bytes("value", v.as_bytes());
            }
            self.0.push(e);
        }

        fn call(&mut self, actor: u32, op: OpKind, key: &str, value: &str, status: Status, out: Option<&str>) {
            let id = self.inv(actor, op, key, value);
            self.resp(id, status, out);
        }
    }

    #[test]
    fn sequential_history_is_linearizable() {
        let mut h = H::new();
        h.call(0, OpKind::Search, "k", "", Status::NotFound, None);
        h.call(0, OpKind::Insert, "k", "a", Status::Ok, None);
        h.call(0, OpKind::Insert, "k", "b", Status::Exists, None);
        h.call(0, OpKind::Search, "k", "", Status::Ok, Some("a"));
        h.call(0, OpKind::Update, "k", "c", Status::Ok, None);
        h.call(0, OpKind::Search, "k", "", Status::Ok, Some("c"));
        h.call(0, OpKind::Delete, "k", "", Status::Ok, None);
        h.call(0, OpKind::Delete, "k", "", Status::NotFound, None);
        h.call(0, OpKind::Update, "k", "d", Status::NotFound, None);
        assert_eq!(check(&h.0), Ok(()));
    }

    #[test]
    fn stale_read_is_rejected() {
        let mut h = H::new();
        h.call(0, OpKind::Insert, "k", "a", Status::Ok, None);
        h.call(0, OpKind::Update, "k", "b", Status::Ok, None);
        h.call(1, OpKind::Search, "k", "", Status::Ok, Some("a"));
        let v = check(&h.0).unwrap_err();
        assert_eq!(v.key, b"k");
        assert_eq!(v.linearized, 2);
    }

    #[test]
    fn concurrent_ops_may_reorder() {
        let mut h = H::new();
        h.call(0, OpKind::Insert, "k", "a", Status::Ok, None);
        let u = h.inv(0, OpKind::Update, "k", "b");
        h.call(1, OpKind::Search, "k", "", Status::Ok, Some("b"));
        h.call(2, OpKind::Search, "k", "", Status::Ok, Some("b"));
        h.resp(u, Status::Ok, None);
        assert_eq!(check(&h.0), Ok(()));
        // Once one reader saw the new value, a later reader cannot see the old one.
        let mut h = H::new();
        h.call(0, OpKind::Insert, "k", "a", Status::Ok, None);
        let u = h.inv(0, OpKind::Update, "k", "b");
        h.call(1, OpKind::Search, "k", "", Status::Ok, Some("b"));
        h.call(2, OpKind::Search, "k", "", Status::Ok, Some("a"));
        h.resp(u, Status::Ok, None);
        assert!(check(&h.0).is_err());
    }

    #[test]
    fn pending_ops_may_or_may_not_apply() {
        let mut h = H::new();
        h.call(0, OpKind::Insert, "k", "a", Status::Ok, None);
        h.inv(1, OpKind::Update, "k", "b");
        h.call(0, OpKind::Search, "k", "", Status::Ok, Some("a"));
        h.call(0, OpKind::Search, "k", "", Status::Ok, Some("b"));
        assert_eq!(check(&h.0), Ok(()));
        let mut h = H::new();
        h.call(0, OpKind::Insert, "k", "a", Status::Ok, None);
        h.inv(1, OpKind::Update, "k", "b");
        h.call(0, OpKind::Search, "k", "", Status::Ok, Some("b"));
        h.call(0, OpKind::Search, "k", "", Status::Ok, Some("a"));
        assert!(check(&h.0).is_err());
    }

    #[test]
    fn duplicate_insert_success_is_rejected() {
        let mut h = H::new();
        h.call(0, OpKind::Insert, "k", "a", Status::Ok, None);
        h.call(1, OpKind::Insert, "k", "b", Status::Ok, None);
        assert!(check(&h.0).is_err());
    }

    #[test]
    fn keys_are_checked_independently() {
        let mut h = H::new();
        h.call(0, OpKind::Insert, "x", "1", Status::Ok, None);
        h.call(0, OpKind::Insert, "y", "2", Status::Ok, None);
        h.call(1, OpKind::Search, "x", "", Status::Ok, Some("1"));
        h.call(1, OpKind::Search, "y", "", Status::Ok, Some("1"));
        assert_eq!(check(&h.0).unwrap_err().key, b"y");
    }
}
