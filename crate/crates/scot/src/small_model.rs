//! Small-model linearizability exploration.
//!
//! Runs two-thread operation scenarios over tiny key spaces under the
//! lockstep scheduler and checks every execution against sequential set
//! semantics: the per-operation results plus the final membership must be
//! reproducible by some merge of the two programs that respects program
//! order and real-time order.
//!
//! Coverage comes in two layers: an exhaustive sweep over all pairs of
//! short programs with one forced preemption per schedule, and a curated
//! adversarial set (deleted chains, pending tree deletions, same-key races)
//! explored with two preemptions.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use crate::interleave::Explorer;
use crate::list::{HarrisList, ListOptions};
use crate::smr::{Domain, DomainConfig, Scheme, ThreadHandle};
use crate::test_util::quiet_corruption_panics;
use crate::tree::NmTree;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Insert,
    Remove,
    Search,
}

#[derive(Clone, Copy, Debug)]
struct Op {
    kind: Kind,
    key: u64,
}

const fn ins(key: u64) -> Op {
    Op { kind: Kind::Insert, key }
}
const fn del(key: u64) -> Op {
    Op { kind: Kind::Remove, key }
}
const fn find(key: u64) -> Op {
    Op { kind: Kind::Search, key }
}

/// One completed operation with its logical time window.
#[derive(Clone, Copy, Debug)]
struct Done {
    op: Op,
    ok: bool,
    start: u64,
    end: u64,
}

trait SetUnderTest: Send + Sync + 'static {
    fn apply(&self, handle: &mut ThreadHandle, op: Op) -> bool;
    fn snapshot(&mut self) -> Vec<u64>;
}

impl SetUnderTest for HarrisList {
    fn apply(&self, h: &mut ThreadHandle, op: Op) -> bool {
        match op.kind {
            Kind::Insert => self.insert(h, op.key),
            Kind::Remove => self.remove(h, op.key),
            Kind::Search => self.contains(h, op.key),
        }
    }
    fn snapshot(&mut self) -> Vec<u64> {
        self.collect()
    }
}

impl SetUnderTest for NmTree {
    fn apply(&self, h: &mut ThreadHandle, op: Op) -> bool {
        match op.kind {
            Kind::Insert => self.insert(h, op.key),
            Kind::Remove => self.remove(h, op.key),
            Kind::Search => self.contains(h, op.key),
        }
    }
    fn snapshot(&mut self) -> Vec<u64> {
        self.collect()
    }
}

struct World<S> {
    domain: Domain,
    set: S,
    handles: [Mutex<ThreadHandle>; 2],
    logs: [Mutex<Vec<Done>>; 2],
    clock: AtomicU64,
}

impl<S: SetUnderTest> World<S> {
    fn run_program(&self, tid: usize, program: &[Op]) {
        let mut h = self.handles[tid].lock().unwrap();
        for &op in program {
            let start = self.clock.fetch_add(1, Ordering::Relaxed);
            let ok = self.set.apply(&mut h, op);
            let end = self.clock.fetch_add(1, Ordering::Relaxed);
            self.logs[tid].lock().unwrap().push(Done { op, ok, start, end });
        }
    }
}

/// True iff some merge of the two histories that respects program order and
/// real-time order replays every observed result on a sequential set and
/// ends in `final_members`.
fn admissible(
    init: &BTreeSet<u64>,
    h0: &[Done],
    h1: &[Done],
    final_members: &BTreeSet<u64>,
) -> bool {
    fn dfs(
        set: &mut BTreeSet<u64>,
        h0: &[Done],
        h1: &[Done],
        i: usize,
        j: usize,
        final_members: &BTreeSet<u64>,
    ) -> bool {
        if i == h0.len() && j == h1.len() {
            return set == final_members;
        }
        for (take0, next, other) in [
            (true, h0.get(i), h1.get(j)),
            (false, h1.get(j), h0.get(i)),
        ] {
            let Some(d) = next else { continue };
            // Real-time order: an op whose window closed before ours opened
            // must be merged first.
            if let Some(o) = other {
                if o.end < d.start {
                    continue;
                }
            }
            let expect = match d.op.kind {
                Kind::Insert => !set.contains(&d.op.key),
                Kind::Remove => set.contains(&d.op.key),
                Kind::Search => set.contains(&d.op.key),
            };
            if expect != d.ok {
                continue;
            }
            let inserted = match d.op.kind {
                Kind::Insert => set.insert(d.op.key),
                Kind::Remove => !set.remove(&d.op.key),
                Kind::Search => true,
            };
            let (ni, nj) = if take0 { (i + 1, j) } else { (i, j + 1) };
            if dfs(set, h0, h1, ni, nj, final_members) {
                return true;
            }
            // Undo.
            match d.op.kind {
                Kind::Insert => {
                    set.remove(&d.op.key);
                }
                Kind::Remove => {
                    if !inserted {
                        set.insert(d.op.key);
                    }
                }
                Kind::Search => {}
            }
            let _ = inserted;
        }
        false
    }
    let mut set = init.clone();
    dfs(&mut set, h0, h1, 0, 0, final_members)
}

struct Stats {
    scenarios: usize,
    executions: usize,
}

/// Explores one scenario: `prefill` members (plus `pre_marked` logically
/// deleted keys for the list), two programs, preemption bound.
fn explore_scenario<S, F>(
    make: F,
    init: BTreeSet<u64>,
    p0: Vec<Op>,
    p1: Vec<Op>,
    preemptions: usize,
) -> usize
where
    S: SetUnderTest,
    F: Fn() -> World<S> + 'static,
{
    let init0 = init.clone();
    let prog0 = p0.clone();
    let prog1 = p1.clone();
    Explorer { max_preemptions: preemptions, max_execs: 500_000 }.explore(
        make,
        move |w: &World<S>| w.run_program(0, &prog0),
        move |w: &World<S>| w.run_program(1, &prog1),
        move |mut w, trace| {
            assert!(w.domain.corruption().is_none(), "corruption under {p0:?} / {p1:?}");
            let members: BTreeSet<u64> = w.set.snapshot().into_iter().collect();
            let h0 = w.logs[0].lock().unwrap().clone();
            let h1 = w.logs[1].lock().unwrap().clone();
            assert!(
                admissible(&init0, &h0, &h1, &members),
                "non-linearizable history\n  programs {p0:?} / {p1:?}\n  results {h0:?} / {h1:?}\n  final {members:?}\n  schedule len {}",
                trace.len(),
            );
        },
    )
}

fn list_world(prefill: &[u64], marked: &[u64]) -> World<HarrisList> {
    let domain = Domain::with_config(
        DomainConfig::new(Scheme::Hp, 3, 5).scan_threshold(2).poison(true),
    )
    .unwrap();
    let list = HarrisList::with_options(&domain, ListOptions::default());
    let mut setup = domain.register().unwrap();
    for &k in prefill {
        assert!(list.insert(&mut setup, k));
    }
    for &k in marked {
        assert!(list.mark_for_removal(&mut setup, k));
    }
    drop(setup);
    World {
        handles: [
            Mutex::new(domain.register().unwrap()),
            Mutex::new(domain.register().unwrap()),
        ],
        logs: [Mutex::new(Vec::new()), Mutex::new(Vec::new())],
        clock: AtomicU64::new(0),
        set: list,
        domain,
    }
}

fn tree_world(prefill: &[u64]) -> World<NmTree> {
    let domain = Domain::with_config(
        DomainConfig::new(Scheme::Hp, 3, 5).scan_threshold(2).poison(true),
    )
    .unwrap();
    let tree = NmTree::new(&domain);
    let mut setup = domain.register().unwrap();
    for &k in prefill {
        assert!(tree.insert(&mut setup, k));
    }
    drop(setup);
    World {
        handles: [
            Mutex::new(domain.register().unwrap()),
            Mutex::new(domain.register().unwrap()),
        ],
        logs: [Mutex::new(Vec::new()), Mutex::new(Vec::new())],
        clock: AtomicU64::new(0),
        set: tree,
        domain,
    }
}

/// All programs of length 1..=2 over {insert, remove, search} x keys.
fn short_programs(keys: &[u64]) -> Vec<Vec<Op>> {
    let ops: Vec<Op> = keys
        .iter()
        .flat_map(|&k| [ins(k), del(k), find(k)])
        .collect();
    let mut out: Vec<Vec<Op>> = ops.iter().map(|&o| vec![o]).collect();
    for &a in &ops {
        for &b in &ops {
            out.push(vec![a, b]);
        }
    }
    out
}

fn exhaustive_sweep<S: SetUnderTest, F>(make: F, init: &[u64]) -> Stats
where
    F: Fn() -> World<S> + Clone + 'static,
{
    let programs = short_programs(&[1, 2]);
    let init_set: BTreeSet<u64> = init.iter().copied().collect();
    let mut stats = Stats { scenarios: 0, executions: 0 };
    for (i, p0) in programs.iter().enumerate() {
        for p1 in &programs[i..] {
            stats.scenarios += 1;
            stats.executions += explore_scenario(
                make.clone(),
                init_set.clone(),
                p0.clone(),
                p1.clone(),
                1,
            );
        }
    }
    stats
}

fn curated_pairs() -> Vec<(Vec<Op>, Vec<Op>)> {
    vec![
        (vec![ins(2)], vec![ins(2)]),
        (vec![del(2)], vec![del(2)]),
        (vec![ins(1), del(1)], vec![del(1), ins(1)]),
        (vec![find(3), find(1), find(2)], vec![del(1), del(2), del(3)]),
        (vec![ins(1), ins(2), ins(3)], vec![del(3), del(2), del(1)]),
        (vec![del(1), ins(2), find(3)], vec![ins(1), del(2), del(3)]),
        (vec![find(2), ins(2), find(2)], vec![del(2), find(2), ins(2)]),
        (vec![del(2), del(3), find(1)], vec![ins(2), ins(3), del(1)]),
    ]
}

#[test]
fn small_model_list_exhaustive_pairs() {
    quiet_corruption_panics();
    let stats = exhaustive_sweep(|| list_world(&[2], &[]), &[2]);
    eprintln!(
        "small-model list: {} scenarios, {} executions",
        stats.scenarios, stats.executions
    );
}

#[test]
fn small_model_list_adversarial() {
    quiet_corruption_panics();
    let mut total = 0;
    // Initial membership {1, 3}: key 2 is pre-marked (logically deleted but
    // still linked), so traversals start inside a deleted zone.
    let init: BTreeSet<u64> = [1, 3].into_iter().collect();
    for (p0, p1) in curated_pairs() {
        total += explore_scenario(
            || list_world(&[1, 2, 3], &[2]),
            init.clone(),
            p0,
            p1,
            2,
        );
    }
    eprintln!("small-model list adversarial: {total} executions");
}

#[test]
fn small_model_tree_exhaustive_pairs() {
    quiet_corruption_panics();
    let stats = exhaustive_sweep(|| tree_world(&[2]), &[2]);
    eprintln!(
        "small-model tree: {} scenarios, {} executions",
        stats.scenarios, stats.executions
    );
}

#[test]
fn small_model_tree_adversarial() {
    quiet_corruption_panics();
    let mut total = 0;
    let init: BTreeSet<u64> = [1, 2, 3].into_iter().collect();
    for (p0, p1) in curated_pairs() {
        total += explore_scenario(|| tree_world(&[1, 2, 3]), init.clone(), p0, p1, 2);
    }
    eprintln!("small-model tree adversarial: {total} executions");
}
