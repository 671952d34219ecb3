//! Post-run audits over a trace and the final memory image.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::event::Event;
use crate::fabric::{read_u64, ActorId, RemoteAddr, Word};
use crate::index::{is_tombstone_word, SlotWord};
use crate::memalloc::{alive_replicas, BlockLayout};
use crate::sim::World;

/// One audit failure.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Finding {
    pub check: &'static str,
    pub detail: String,
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.check, self.detail)
    }
}

fn finding(check: &'static str, detail: String) -> Finding {
    Finding { check, detail }
}

/// RTTs of a failure-free request on a checked path, before rule extras.
pub fn base_rtts(op: &str, status: &str, path: &str) -> Option<u32> {
    Some(match (op, status, path) {
        ("SEARCH", _, "hit" | "empty") => 1,
        ("SEARCH", _, "stale" | "miss") => 2,
        ("INSERT", "OK", "fast") => 4,
        ("INSERT", "OK", "probe") => 5,
        ("INSERT", "TABLE_FULL", "fast") => 2,
        ("INSERT", "TABLE_FULL", "probe") => 3,
        ("UPDATE", "OK", "hit") => 4,
        ("UPDATE", "OK", "stale" | "miss") => 5,
        ("DELETE", "OK", "hit") => 5,
        ("DELETE", "OK", "stale" | "miss") => 6,
        ("UPDATE" | "DELETE", "NOT_FOUND", "empty") => 2,
        ("UPDATE" | "DELETE", "NOT_FOUND", "miss") => 3,
        _ => return None,
    })
}

/// Extra RTTs a write pays for the rule that decided its round.
pub fn rule_extra(rule: Option<&str>) -> u32 {
    match rule {
        Some("RULE2") => 1,
        Some("RULE3") => 2,
        _ => 0,
    }
}

/// Every response on a checked path costs exactly its contract.
pub fn rtt_contract(trace: &[Event]) -> Vec<Finding> {
    let mut out = Vec::new();
    for e in trace.iter().filter(|e| e.kind == "RESPOND") {
        let (Some(op), Some(status), Some(path), Some(rtts)) =
            (e.get("op"), e.get("status"), e.get("path"), e.get_u64("rtts"))
        else {
            out.push(finding("rtt", format!("malformed response: {e}")));
            continue;
        };
        if path == "slow" {
            continue;
        }
        match base_rtts(op, status, path) {
            Some(b) if u64::from(b + rule_extra(e.get("rule"))) == rtts => {}
            Some(b) => out.push(finding("rtt", format!("expected {} RTTs: {e}", b + rule_extra(e.get("rule"))))),
            None => out.push(finding("rtt", format!("no contract for this path: {e}"))),
        }
    }
    out
}

/// Per slot, installs form one chain: each replaces exactly the word the
/// previous one installed (or a master decision, or a cleared tombstone or
/// void entry). Two winners of one round would both name the same
/// predecessor.
pub fn install_chain(trace: &[Event]) -> Vec<Finding> {
    let mut cur: BTreeMap<u64, Word> = BTreeMap::new();
    let mut void: BTreeSet<Word> = BTreeSet::new();
    let mut out = Vec::new();
    for e in trace {
        let Some(addr) = e.addr else { continue };
        let offset = addr.offset();
        match e.kind.as_str() {
            "DECIDE" => {
                cur.insert(offset, e.get_u64("word").unwrap_or(0));
            }
            "INSTALL" | "VOID" => {
                let (old, word) = (e.get_u64("old").unwrap_or(0), e.get_u64("word").unwrap_or(0));
                let prev = cur.get(&offset).copied().unwrap_or(0);
                if old != prev && !(old == 0 && (is_tombstone_word(prev) || void.contains(&prev))) {
                    out.push(finding("winner", format!("replaces {old:#x} but the slot held {prev:#x}: {e}")));
                }
                if e.kind == "VOID" {
                    void.insert(word);
                }
                cur.insert(offset, word);
            }
            _ => {}
        }
    }
    out
}

/// No staged object is installed twice, and every write that reports a
/// winning rule installed exactly once.
pub fn exactly_once(trace: &[Event]) -> Vec<Finding> {
    let mut out = Vec::new();
    let mut by_obj: BTreeMap<(String, u64), usize> = BTreeMap::new();
    let mut by_id: BTreeMap<u64, usize> = BTreeMap::new();
    for e in trace.iter().filter(|e| e.kind == "INSTALL") {
        if let (Some(obj), Some(seq)) = (e.get("obj"), e.get_u64("seq")) {
            *by_obj.entry((obj.to_string(), seq)).or_default() += 1;
        }
        if let Some(id) = e.get_u64("id").filter(|id| *id != 0) {
            *by_id.entry(id).or_default() += 1;
        }
    }
    for ((obj, seq), n) in &by_obj {
        if *n > 1 {
            out.push(finding("exactly-once", format!("object {obj} seq {seq} installed {n} times")));
        }
    }
    for e in trace.iter().filter(|e| e.kind == "RESPOND") {
        if !matches!(e.get("rule"), Some("RULE1" | "RULE2" | "RULE3")) {
            continue;
        }
        let id = e.get_u64("id").unwrap_or(0);
        let n = by_id.get(&id).copied().unwrap_or(0);
        if n != 1 {
            out.push(finding("exactly-once", format!("winner {id} has {n} installs")));
        }
    }
    out
}

/// After a view with epoch `e` is installed, no write of an older epoch
/// reaches a primary.
pub fn fencing(trace: &[Event]) -> Vec<Finding> {
    let mut epoch = 0;
    let mut out = Vec::new();
    for e in trace {
        match e.kind.as_str() {
            "INSTALL_VIEW" => epoch = epoch.max(e.get_u64("epoch").unwrap_or(0)),
            "INSTALL" if e.get_u64("epoch").unwrap_or(0) < epoch => {
                out.push(finding("fencing", format!("install from a fenced epoch after view {epoch}: {e}")))
            }
            _ => {}
        }
    }
    out
}

/// Where each object of one client currently stands.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Balance {
    pub granted: u64,
    pub live: u64,
    pub free: u64,
    pub pending: u64,
    /// Objects in none of the three sets.
    pub leaked: Vec<RemoteAddr>,
    /// Objects in more than one set, or listed free twice.
    pub doubled: Vec<RemoteAddr>,
}

impl Balance {
    pub fn holds(&self) -> bool {
        self.granted == self.live + self.free + self.pending && self.leaked.is_empty() && self.doubled.is_empty()
    }
}

/// Words of the whole index, as the current primary holds them.
fn index_words(w: &World) -> Vec<Word> {
    let geo = w.fabric.geometry();
    let slots = (u64::from(w.cfg.index_capacity) * u64::from(w.cfg.slots_per_key)) as usize;
    let node = w.membership.index_nodes.iter().copied().find(|n| w.fabric.is_alive(*n));
    let Some(bytes) = node.and_then(|n| w.fabric.peek(RemoteAddr::new(n, geo.index_base), slots * 8)) else {
        return Vec::new();
    };
    (0..slots).map(|i| read_u64(&bytes, i * 8)).collect()
}

/// Per client: granted objects split into live (named by an index slot),
/// free-listed and bitmap-pending (freed, not yet reclaimed).
pub fn conservation(w: &World) -> BTreeMap<ActorId, Balance> {
    let live: BTreeSet<RemoteAddr> = index_words(w).into_iter().filter_map(SlotWord::decode).map(|s| s.ptr).collect();
    let mut out = BTreeMap::new();
    for (cid, a) in &w.allocs {
        let mut b = Balance { granted: a.objects_granted, ..Balance::default() };
        let mut free: BTreeSet<RemoteAddr> = BTreeSet::new();
        for obj in a.free.iter().flatten() {
            if !free.insert(*obj) {
                b.doubled.push(*obj);
            }
        }
        for (block, class) in &a.blocks {
            let layout = BlockLayout::new(&w.cfg, *class);
            let mut bits = vec![0u64; layout.bitmap_words() as usize];
            for rep in alive_replicas(&w.fabric, *block) {
                if let Some(d) = w.fabric.peek(rep, bits.len() * 8) {
                    for (i, word) in bits.iter_mut().enumerate() {
                        *word |= read_u64(&d, i * 8);
                    }
                }
            }
            for i in 0..layout.objects {
                let obj = layout.object(*block, i);
                let states = [live.contains(&obj), free.contains(&obj), bits[(i / 64) as usize] >> (i % 64) & 1 == 1];
                b.live += u64::from(states[0]);
                b.free += u64::from(states[1]);
                b.pending += u64::from(states[2]);
                match states.iter().filter(|s| **s).count() {
                    0 => b.leaked.push(obj),
                    1 => {}
                    _ => b.doubled.push(obj),
                }
            }
        }
        out.insert(*cid, b);
    }
    out
}

/// Conservation as findings.
pub fn conservation_findings(w: &World) -> Vec<Finding> {
    conservation(w)
        .into_iter()
        .filter(|(_, b)| !b.holds())
        .map(|(cid, b)| {
            finding(
                "conservation",
                format!(
                    "{cid}: granted {} != live {} + free {} + pending {} (leaked [{}], doubled [{}])",
                    b.granted,
                    b.live,
                    b.free,
                    b.pending,
                    join(&b.leaked),
                    join(&b.doubled)
                ),
            )
        })
        .collect()
}

fn join(addrs: &[RemoteAddr]) -> String {
    addrs.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ")
}

/// Audits that need only the trace.
pub fn trace_audit(trace: &[Event]) -> Vec<Finding> {
    let mut out = rtt_contract(trace);
    out.extend(install_chain(trace));
    out.extend(exactly_once(trace));
    out.extend(fencing(trace));
    out
}

/// All trace audits plus conservation.
pub fn audit(trace: &[Event], w: &World) -> Vec<Finding> {
    let mut out = trace_audit(trace);
    out.extend(conservation_findings(w));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::runner;
    use crate::harness::scenario::Scenario;

    fn small() -> runner::RunResult {
        let mut s = Scenario { seed: 11, clients: 3, keys: 8, ops: 150, ..Scenario::default() };
        s.set("mix", "0.4:0.2:0.2:0.2").unwrap();
        runner::run(&s).unwrap()
    }

    #[test]
    fn clean_run_passes_every_audit() {
        let r = small();
        assert_eq!(audit(&r.trace, &r.world), Vec::new());
    }

    #[test]
    fn a_second_winner_is_caught() {
        let r = small();
        let mut trace = r.trace.clone();
        let i = trace.iter().position(|e| e.kind == "INSTALL").unwrap();
        let dup = trace[i].clone();
        trace.insert(i + 1, dup);
        assert!(install_chain(&trace).iter().any(|f| f.check == "winner"));
        assert!(exactly_once(&trace).iter().any(|f| f.check == "exactly-once"));
    }

    #[test]
    fn a_wrong_rtt_count_is_caught() {
        let r = small();
        let mut trace = r.trace.clone();
        let e = trace.iter_mut().find(|e| e.kind == "RESPOND" && e.get("path") == Some("hit")).unwrap();
        let rtts = e.get_u64("rtts").unwrap();
        for (k, v) in &mut e.fields {
            if k == "rtts" {
                *v = (rtts + 1).to_string();
            }
        }
        assert_eq!(rtt_contract(&trace).len(), 1);
    }

    #[test]
    fn a_stale_epoch_install_is_caught() {
        let r = small();
        let mut trace = r.trace.clone();
        trace.insert(0, Event::new(0, ActorId::MASTER, "INSTALL_VIEW").with("epoch", 2));
        assert!(!fencing(&trace).is_empty());
    }

    #[test]
    fn a_dropped_free_object_is_a_leak() {
        let mut r = small();
        let a = r.world.allocs.values_mut().find(|a| a.free.iter().any(|f| !f.is_empty())).unwrap();
        let class = a.free.iter().position(|f| !f.is_empty()).unwrap();
        let lost = a.free[class].pop_back().unwrap();
        let findings = conservation_findings(&r.world);
        assert_eq!(findings.len(), 1);
        assert!(findings[0].detail.contains(&lost.to_string()));
    }
}
