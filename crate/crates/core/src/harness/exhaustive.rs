//! Explicit-state enumeration of concurrent slot writes.
//!
//! Every writer runs the real [`SlotWriter`] state machine against a bare
//! word memory holding the replicas of one slot. Each fabric op is one atomic
//! step, so all interleavings of ops across writers (and within a phase) are
//! explored. States are memoized; the number of complete schedules is counted
//! along the way.

use std::collections::{BTreeMap, HashMap};

use crate::fabric::{FabricOp, NodeId, OpResult, RemoteAddr, Word};
use crate::slotproto::{RuleOutcome, SlotSet, SlotWriter};

const SLOT_OFFSET: u64 = 0x100;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct Writer {
    w: SlotWriter,
    ops: Vec<FabricOp>,
    results: Vec<Option<Word>>,
}

impl Writer {
    fn new(w: SlotWriter) -> Self {
        let mut x = Writer { w, ops: Vec::new(), results: Vec::new() };
        x.issue();
        x
    }

    fn issue(&mut self) {
        self.ops = self.w.next_ops().unwrap_or_default();
        self.results = vec![None; self.ops.len()];
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct State {
    mem: Vec<Word>,
    writers: Vec<Writer>,
}

/// What an enumeration found.
#[derive(Debug, Clone, Default)]
pub struct Report {
    pub writers: usize,
    pub r: usize,
    /// Distinct states visited.
    pub states: usize,
    /// Complete schedules (paths from the start to a final state).
    pub schedules: u128,
    /// Distinct final states.
    pub finals: usize,
    /// How often each winning rule occurs among final states.
    pub wins: BTreeMap<RuleOutcome, usize>,
    pub violations: Vec<String>,
}

impl Report {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Enumerate every interleaving of `writers` concurrent writes to one slot
/// replicated on `r` nodes. Writer `i` proposes word `i + 1` and starts by
/// reading the primary.
pub fn explore(writers: usize, r: usize) -> Report {
    assert!((1..=3).contains(&writers), "between 1 and 3 writers");
    assert!((2..=8).contains(&r), "between 2 and 8 replicas");
    let nodes: Vec<NodeId> = (0..r as u8).map(NodeId).collect();
    let slots = SlotSet::from_view(SLOT_OFFSET, &nodes);
    let start = State {
        mem: vec![0; r],
        writers: (0..writers).map(|i| Writer::new(SlotWriter::new(slots.clone(), i as Word + 1))).collect(),
    };
    let mut ex = Explorer { memo: HashMap::new(), report: Report { writers, r, ..Report::default() } };
    ex.report.schedules = ex.visit(start);
    ex.report.states = ex.memo.len();
    ex.report
}

struct Explorer {
    memo: HashMap<State, u128>,
    report: Report,
}

fn apply(mem: &mut [Word], op: &FabricOp) -> Word {
    let slot = |a: &RemoteAddr| a.node().0 as usize;
    match op {
        FabricOp::Read { addr, .. } => mem[slot(addr)],
        FabricOp::Cas { addr, expected, swap } => {
            let old = mem[slot(addr)];
            if old == *expected {
                mem[slot(addr)] = *swap;
            }
            old
        }
        other => panic!("unexpected op {} in slot enumeration", other.kind()),
    }
}

impl Explorer {
    fn visit(&mut self, s: State) -> u128 {
        if let Some(n) = self.memo.get(&s) {
            return *n;
        }
        let mut total = 0u128;
        let mut moved = false;
        for i in 0..s.writers.len() {
            let wr = &s.writers[i];
            if wr.w.is_finished() {
                continue;
            }
            // A spinning writer only makes progress once the primary moves.
            if wr.w.is_spinning() && s.mem[0] == wr.w.v_old {
                continue;
            }
            for j in 0..wr.ops.len() {
                if wr.results[j].is_some() {
                    continue;
                }
                moved = true;
                let mut next = s.clone();
                let word = apply(&mut next.mem, &next.writers[i].ops[j]);
                let nw = &mut next.writers[i];
                nw.results[j] = Some(word);
                if nw.results.iter().all(Option::is_some) {
                    let res: Vec<OpResult> = nw.results.iter().map(|w| OpResult::Word(w.unwrap())).collect();
                    nw.w.feed(&res);
                    nw.issue();
                }
                total += self.visit(next);
            }
        }
        if !moved {
            total = 1;
            self.check_final(&s);
        }
        self.memo.insert(s, total);
        total
    }

    fn check_final(&mut self, s: &State) {
        self.report.finals += 1;
        let v = &mut self.report.violations;
        if let Some(i) = s.writers.iter().position(|w| !w.w.is_finished()) {
            v.push(format!("writer {i} stuck in {:?} with memory {:?}", s.writers[i].w.step, s.mem));
            return;
        }
        if s.mem.iter().any(|w| *w != s.mem[0]) {
            v.push(format!("replicas disagree: {:?}", s.mem));
        }
        // Writers that read the same primary value form one round.
        let mut rounds: BTreeMap<Word, Vec<&SlotWriter>> = BTreeMap::new();
        for wr in &s.writers {
            rounds.entry(wr.w.v_old).or_default().push(&wr.w);
        }
        let mut installed = vec![0];
        for (v_old, ws) in &rounds {
            let winners: Vec<&&SlotWriter> = ws.iter().filter(|w| w.won).collect();
            if winners.len() != 1 {
                v.push(format!("round from {v_old}: {} winners", winners.len()));
                continue;
            }
            let win = winners[0];
            match win.outcome {
                Some(o) if o.is_win() => {
                    let expect = match o {
                        RuleOutcome::Rule1 => 3,
                        RuleOutcome::Rule2 => 4,
                        _ => 5,
                    };
                    if win.rtts != expect {
                        v.push(format!("{o} winner took {} RTTs", win.rtts));
                    }
                    *self.report.wins.entry(o).or_default() += 1;
                }
                other => v.push(format!("winner of round {v_old} has outcome {other:?}")),
            }
            if let Some(w) = ws.iter().find(|w| !w.won && w.outcome.is_some_and(RuleOutcome::is_win)) {
                v.push(format!("writer {} claims {:?} but did not win", w.v_new, w.outcome));
            }
            installed.push(win.v_new);
        }
        for v_old in rounds.keys() {
            if !installed.contains(v_old) {
                v.push(format!("a round started from {v_old}, which was never installed"));
            }
        }
        // The last installed value is the one no round started from.
        let last: Vec<&Word> = installed.iter().filter(|w| !rounds.contains_key(w)).collect();
        if last.len() != 1 || *last[0] != s.mem[0] {
            v.push(format!("final value {} is not the last installed word", s.mem[0]));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_writer_has_one_schedule_per_backup_order() {
        // Read, then r - 1 backup CASes in any order, then the primary CAS.
        for r in 2..=4 {
            let rep = explore(1, r);
            assert!(rep.ok(), "{:?}", rep.violations);
            let orders: u128 = (1..r as u128).product();
            assert_eq!(rep.schedules, orders);
            assert_eq!(rep.wins.get(&RuleOutcome::Rule1), Some(&1));
        }
    }

    #[test]
    fn two_writers_on_two_replicas() {
        let rep = explore(2, 2);
        assert!(rep.ok(), "{:?}", rep.violations);
        assert!(rep.wins.contains_key(&RuleOutcome::Rule1));
        assert!(!rep.wins.contains_key(&RuleOutcome::Rule2), "RULE2 needs three backups");
    }

    #[test]
    fn split_backups_reach_the_check_rule() {
        let rep = explore(2, 3);
        assert!(rep.ok(), "{:?}", rep.violations);
        assert!(rep.wins.contains_key(&RuleOutcome::Rule3));
    }
}
