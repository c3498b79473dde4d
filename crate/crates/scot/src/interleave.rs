//! Lockstep scheduler for deterministic interleaving exploration in tests.
//!
//! Every shared atomic access in this crate funnels through [`step`], which
//! is inert unless the calling thread was registered by [`Explorer`]. A
//! registered thread blocks at each step until the schedule grants it the
//! next turn, so a two-thread test executes one shared access at a time in
//! a fully reproducible order.
//!
//! Schedules are explored with preemption bounding: the default policy runs
//! one thread until it finishes, and the explorer re-runs the scenario for
//! every way of injecting up to `max_preemptions` switches at steps where
//! both threads were alive. Exploration replays decision prefixes, which is
//! sound because executions are deterministic given the schedule.

use std::cell::RefCell;
use std::collections::HashSet;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

const NONE_THREAD: u64 = 2;
const MAX_STEPS: u64 = 1 << 20;

/// One scheduled step of an execution.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Step {
    pub thread: u8,
    /// Whether the other thread was still alive, i.e. a switch was possible.
    pub had_alt: bool,
}

struct Exec {
    // Packed scheduler state: (step << 4) | (last_runner << 2) | done_mask.
    state: AtomicU64,
    decisions: Vec<u8>,
    trace: Mutex<Vec<Step>>,
    poisoned: AtomicUsize,
}

impl Exec {
    fn new(decisions: Vec<u8>) -> Self {
        Exec {
            state: AtomicU64::new(NONE_THREAD << 2),
            decisions,
            trace: Mutex::new(Vec::new()),
            poisoned: AtomicUsize::new(0),
        }
    }

    fn decide(&self, step: u64, last: u64, done_mask: u64) -> u64 {
        if let Some(&d) = self.decisions.get(step as usize) {
            return d as u64;
        }
        if last == NONE_THREAD {
            return 0;
        }
        if done_mask & (1 << last) == 0 {
            last
        } else {
            1 - last
        }
    }

    // Blocks until the schedule grants `me` a turn; `finishing` also records
    // completion so the other thread stops waiting for us.
    fn acquire(&self, me: u8, finishing: bool) {
        let mut spins = 0u32;
        loop {
            if self.poisoned.load(Ordering::Acquire) != 0 {
                panic!("peer thread panicked during interleaving exploration");
            }
            let s = self.state.load(Ordering::Acquire);
            let step = s >> 4;
            let last = (s >> 2) & 0b11;
            let done_mask = s & 0b11;
            assert!(step < MAX_STEPS, "interleaving runaway: over {MAX_STEPS} steps");
            if self.decide(step, last, done_mask) == me as u64 {
                let had_alt = done_mask & (1 << (1 - me)) == 0;
                self.trace.lock().unwrap().push(Step { thread: me, had_alt });
                let new_done = if finishing { done_mask | (1 << me) } else { done_mask };
                let next = ((step + 1) << 4) | ((me as u64) << 2) | new_done;
                self.state.store(next, Ordering::Release);
                return;
            }
            spins += 1;
            if spins > 64 {
                std::thread::yield_now();
            } else {
                std::hint::spin_loop();
            }
        }
    }
}

thread_local! {
    static CTX: RefCell<Option<(Arc<Exec>, u8)>> = const { RefCell::new(None) };
}

/// Scheduling point; no-op unless this thread is under exploration.
#[inline]
pub(crate) fn step() {
    CTX.with(|c| {
        if let Some((exec, me)) = &*c.borrow() {
            exec.acquire(*me, false);
        }
    });
}

type Job = Box<dyn FnOnce() + Send>;

struct Worker {
    tx: Sender<Job>,
    rx: Receiver<std::thread::Result<()>>,
    handle: Option<JoinHandle<()>>,
}

fn spawn_worker() -> Worker {
    let (tx, job_rx) = channel::<Job>();
    let (done_tx, rx) = channel();
    let handle = std::thread::spawn(move || {
        while let Ok(job) = job_rx.recv() {
            let r = std::panic::catch_unwind(std::panic::AssertUnwindSafe(job));
            if done_tx.send(r).is_err() {
                break;
            }
        }
    });
    Worker { tx, rx, handle: Some(handle) }
}

impl Drop for Worker {
    fn drop(&mut self) {
        let (tx, _) = channel();
        drop(std::mem::replace(&mut self.tx, tx));
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// Preemption-bounded exploration of two-thread scenarios.
pub(crate) struct Explorer {
    pub max_preemptions: usize,
    /// Safety valve on the number of executions per scenario.
    pub max_execs: usize,
}

impl Default for Explorer {
    fn default() -> Self {
        Explorer { max_preemptions: 2, max_execs: 200_000 }
    }
}

/// Reusable two-worker session; executions share the pool so exploration
/// avoids per-schedule thread spawns.
pub(crate) struct Session {
    w0: Worker,
    w1: Worker,
}

impl Session {
    pub fn new() -> Self {
        Session { w0: spawn_worker(), w1: spawn_worker() }
    }

    /// Runs one execution under `prefix` (default policy beyond it) and
    /// returns the quiesced state plus the schedule trace.
    pub fn run<S>(
        &self,
        prefix: Vec<u8>,
        mk: &dyn Fn() -> S,
        p0: &Arc<dyn Fn(&S) + Send + Sync>,
        p1: &Arc<dyn Fn(&S) + Send + Sync>,
    ) -> (S, Vec<Step>)
    where
        S: Send + Sync + 'static,
    {
        let exec = Arc::new(Exec::new(prefix.clone()));
        let state = Arc::new(mk());

        let run = |worker: &Worker, id: u8, prog: Arc<dyn Fn(&S) + Send + Sync>| {
            let exec = exec.clone();
            let state = state.clone();
            worker
                .tx
                .send(Box::new(move || {
                    CTX.with(|c| *c.borrow_mut() = Some((exec.clone(), id)));
                    let r = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| prog(&state)));
                    match r {
                        Ok(()) => exec.acquire(id, true),
                        Err(e) => {
                            exec.poisoned.store(1, Ordering::Release);
                            CTX.with(|c| *c.borrow_mut() = None);
                            std::panic::resume_unwind(e);
                        }
                    }
                    CTX.with(|c| *c.borrow_mut() = None);
                }))
                .expect("worker gone");
        };

        run(&self.w0, 0, p0.clone());
        run(&self.w1, 1, p1.clone());

        let r0 = self.w0.rx.recv().expect("worker 0 lost");
        let r1 = self.w1.rx.recv().expect("worker 1 lost");
        if let Err(e) = r0 {
            eprintln!("exploration panic under schedule {prefix:?}");
            std::panic::resume_unwind(e);
        }
        if let Err(e) = r1 {
            eprintln!("exploration panic under schedule {prefix:?}");
            std::panic::resume_unwind(e);
        }

        let trace = exec.trace.lock().unwrap().clone();
        let state = Arc::into_inner(state).expect("state still shared after join");
        (state, trace)
    }
}

impl Explorer {
    /// Runs `p0`/`p1` against a fresh `mk()` state under every schedule with
    /// at most `max_preemptions` forced switches, then hands the quiesced
    /// state and the trace to `check`. Returns the number of executions.
    pub fn explore<S, F0, F1, C>(&self, mk: impl Fn() -> S, p0: F0, p1: F1, check: C) -> usize
    where
        S: Send + Sync + 'static,
        F0: Fn(&S) + Send + Sync + 'static,
        F1: Fn(&S) + Send + Sync + 'static,
        C: Fn(S, &[Step]),
    {
        let session = Session::new();
        let p0: Arc<dyn Fn(&S) + Send + Sync> = Arc::new(p0);
        let p1: Arc<dyn Fn(&S) + Send + Sync> = Arc::new(p1);

        // (decision prefix, preemptions already spent)
        let mut queue: Vec<(Vec<u8>, usize)> = vec![(vec![0], 0), (vec![1], 0)];
        let mut seen: HashSet<Vec<u8>> = queue.iter().map(|(d, _)| d.clone()).collect();
        let mut execs = 0usize;

        while let Some((prefix, spent)) = queue.pop() {
            execs += 1;
            assert!(execs <= self.max_execs, "exploration exceeded {} executions", self.max_execs);

            let (state, trace) = session.run(prefix.clone(), &mk, &p0, &p1);
            check(state, &trace);

            // Branch: inject one extra preemption at every default-region
            // step where the other thread was alive.
            if spent < self.max_preemptions {
                for i in prefix.len()..trace.len() {
                    if !trace[i].had_alt {
                        continue;
                    }
                    let mut child: Vec<u8> = trace[..i].iter().map(|s| s.thread).collect();
                    child.push(1 - trace[i].thread);
                    if seen.insert(child.clone()) {
                        queue.push((child, spent + 1));
                    }
                }
            }
        }
        execs
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicU64 as StdAtomicU64;

    // A pair of compare-and-swap increments must always sum to 2 regardless
    // of the schedule, and the scheduler must actually explore both orders
    // of two racing stores.
    #[test]
    fn cas_increments_always_both_land() {
        struct S {
            v: crate::tagged::AtomicCell<u8>,
            hits: StdAtomicU64,
        }
        let bump = |s: &S| loop {
            let cur = s.v.load();
            let next = crate::tagged::TaggedRef::from_raw(cur.into_raw() + 4);
            if s.v.compare_exchange(cur, next).is_ok() {
                s.hits.fetch_add(1, Ordering::Relaxed);
                break;
            }
        };
        let execs = Explorer { max_preemptions: 2, max_execs: 10_000 }.explore(
            || S { v: crate::tagged::AtomicCell::null(), hits: StdAtomicU64::new(0) },
            bump,
            bump,
            |s, trace| {
                assert_eq!(s.v.load().into_raw(), 8, "trace {trace:?}");
                assert_eq!(s.hits.load(Ordering::Relaxed), 2);
            },
        );
        assert!(execs > 2, "expected multiple schedules, got {execs}");
    }

    #[test]
    fn store_race_produces_both_final_values() {
        let outcomes = Mutex::new(HashSet::new());
        Explorer { max_preemptions: 1, max_execs: 10_000 }.explore(
            crate::tagged::AtomicCell::<u8>::null,
            |c| c.store(crate::tagged::TaggedRef::from_raw(4)),
            |c| c.store(crate::tagged::TaggedRef::from_raw(8)),
            |c, _| {
                outcomes.lock().unwrap().insert(c.load().into_raw());
            },
        );
        assert_eq!(*outcomes.lock().unwrap(), HashSet::from([4, 8]));
    }
}
