//! Instrumented work-stealing executor with scoped task isolation.
//!
//! Each worker owns a deque. Tasks spawned from a worker go to the back of
//! its own deque; tasks spawned from other threads go to a shared injector.
//! Idle workers pop their own deque from the back, then steal from the
//! front of other workers' deques, then take from the injector.
//!
//! Every task carries a [`ScopeId`]. A thread blocked in
//! [`Executor::wait_until`] keeps executing tasks while it waits; when it
//! waits *isolated* it only takes tasks of its own scope. Every executed task
//! is appended to a per-thread provenance log.

use std::cell::Cell;
use std::collections::VecDeque;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Weak};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};

use crate::error::panic_message;
use crate::stall::Occupancy;

/// Identifies the job a task belongs to. Zero is the root scope.
pub type ScopeId = u64;

pub const ROOT_SCOPE: ScopeId = 0;

type TaskFn = Box<dyn FnOnce() + Send + 'static>;

struct Task {
    id: u64,
    scope: ScopeId,
    origin: Arc<str>,
    func: TaskFn,
}

/// One executed task, as recorded on the thread that ran it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProvenanceEntry {
    pub thread: usize,
    pub task_id: u64,
    pub scope: ScopeId,
    pub origin: Arc<str>,
    /// Nanoseconds since the executor epoch.
    pub start_ns: u64,
    pub end_ns: u64,
    /// Number of task frames already on this thread's stack when it started.
    pub depth: u32,
}

/// Result of a wait: how many tasks the waiting thread ran meanwhile.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct WaitStats {
    pub own: usize,
    pub foreign: usize,
}

#[derive(Clone)]
pub struct Waker(Weak<Shared>);

impl Waker {
    pub fn wake(&self) {
        if let Some(shared) = self.0.upgrade() {
            let _g = shared.done_lock.lock();
            shared.done_cv.notify_all();
        }
    }
}

thread_local! {
    static WORKER: Cell<Option<(u64, usize)>> = const { Cell::new(None) };
    static DEPTH: Cell<u32> = const { Cell::new(0) };
}

static NEXT_EXECUTOR: AtomicU64 = AtomicU64::new(1);

struct Shared {
    id: u64,
    injector: Mutex<VecDeque<Task>>,
    locals: Vec<Mutex<VecDeque<Task>>>,
    queued: AtomicUsize,
    // spawned and not yet fully retired (provenance included)
    in_flight: AtomicUsize,
    sleep_lock: Mutex<()>,
    work_cv: Condvar,
    sleepers: AtomicUsize,
    done_lock: Mutex<()>,
    done_cv: Condvar,
    shutdown: AtomicBool,
    next_task: AtomicU64,
    next_scope: AtomicU64,
    epoch: Instant,
    log_enabled: AtomicBool,
    logs: Vec<Mutex<Vec<ProvenanceEntry>>>,
    panics: Mutex<Vec<String>>,
    occupancy: Arc<Occupancy>,
}

/// Fixed-size pool of worker threads.
pub struct Executor {
    shared: Arc<Shared>,
    handles: Mutex<Vec<JoinHandle<()>>>,
}

impl std::fmt::Debug for Executor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Executor")
            .field("threads", &self.threads())
            .finish_non_exhaustive()
    }
}

impl Executor {
    pub fn new(threads: usize) -> Arc<Self> {
        Self::with_occupancy(threads, Arc::new(Occupancy::new(0)))
    }

    pub fn with_occupancy(threads: usize, occupancy: Arc<Occupancy>) -> Arc<Self> {
        let threads = threads.max(1);
        let shared = Arc::new(Shared {
            id: NEXT_EXECUTOR.fetch_add(1, Ordering::Relaxed),
            injector: Mutex::new(VecDeque::new()),
            locals: (0..threads).map(|_| Mutex::new(VecDeque::new())).collect(),
            queued: AtomicUsize::new(0),
            in_flight: AtomicUsize::new(0),
            sleep_lock: Mutex::new(()),
            work_cv: Condvar::new(),
            sleepers: AtomicUsize::new(0),
            done_lock: Mutex::new(()),
            done_cv: Condvar::new(),
            shutdown: AtomicBool::new(false),
            next_task: AtomicU64::new(1),
            next_scope: AtomicU64::new(1),
            epoch: Instant::now(),
            log_enabled: AtomicBool::new(true),
            logs: (0..threads).map(|_| Mutex::new(Vec::new())).collect(),
            panics: Mutex::new(Vec::new()),
            occupancy,
        });
        let handles = (0..threads)
            .map(|index| {
                let shared = shared.clone();
                std::thread::Builder::new()
                    .name(format!("parasink-worker-{index}"))
                    .spawn(move || worker_loop(&shared, index))
                    .expect("failed to spawn worker thread")
            })
            .collect();
        Arc::new(Executor {
            shared,
            handles: Mutex::new(handles),
        })
    }

    pub fn threads(&self) -> usize {
        self.shared.locals.len()
    }

    pub fn epoch(&self) -> Instant {
        self.shared.epoch
    }

    pub fn occupancy(&self) -> &Arc<Occupancy> {
        &self.shared.occupancy
    }

    pub fn new_scope(&self) -> ScopeId {
        self.shared.next_scope.fetch_add(1, Ordering::Relaxed)
    }

    /// Worker index of the calling thread, if it belongs to this pool.
    pub fn current_worker(&self) -> Option<usize> {
        WORKER.with(|w| match w.get() {
            Some((id, index)) if id == self.shared.id => Some(index),
            _ => None,
        })
    }

    pub fn set_provenance_logging(&self, enabled: bool) {
        self.shared.log_enabled.store(enabled, Ordering::Relaxed);
    }

    /// Blocks until every spawned task has retired, including its log entry.
    /// Returns `false` on timeout. Must be called from outside the pool.
    pub fn quiesce(&self, timeout: Duration) -> bool {
        debug_assert!(self.current_worker().is_none(), "quiesce called from a worker");
        let deadline = Instant::now() + timeout;
        while self.shared.in_flight.load(Ordering::SeqCst) > 0 {
            if Instant::now() >= deadline {
                return false;
            }
            std::thread::sleep(Duration::from_micros(200));
        }
        true
    }

    /// Drains and returns the provenance log of every worker.
    pub fn take_provenance(&self) -> Vec<ProvenanceEntry> {
        let mut all: Vec<ProvenanceEntry> = self
            .shared
            .logs
            .iter()
            .flat_map(|l| std::mem::take(&mut *l.lock()))
            .collect();
        all.sort_by_key(|e| (e.start_ns, e.thread));
        all
    }

    /// Panics caught in tasks that did not handle them themselves.
    pub fn take_panics(&self) -> Vec<String> {
        std::mem::take(&mut *self.shared.panics.lock())
    }

    pub fn spawn<F>(&self, scope: ScopeId, origin: &Arc<str>, f: F)
    where
        F: FnOnce() + Send + 'static,
    {
        let task = Task {
            id: self.shared.next_task.fetch_add(1, Ordering::Relaxed),
            scope,
            origin: origin.clone(),
            func: Box::new(f),
        };
        self.push(task, self.current_worker());
    }

    /// Like [`spawn`](Self::spawn) but always enqueues on the global queue,
    /// as a submission from outside the pool would.
    pub fn inject<F>(&self, scope: ScopeId, origin: &Arc<str>, f: F)
    where
        F: FnOnce() + Send + 'static,
    {
        let task = Task {
            id: self.shared.next_task.fetch_add(1, Ordering::Relaxed),
            scope,
            origin: origin.clone(),
            func: Box::new(f),
        };
        self.push(task, None);
    }

    fn push(&self, task: Task, local: Option<usize>) {
        self.shared.in_flight.fetch_add(1, Ordering::SeqCst);
        self.shared.queued.fetch_add(1, Ordering::SeqCst);
        match local {
            Some(index) => self.shared.locals[index].lock().push_back(task),
            None => self.shared.injector.lock().push_back(task),
        }
        if self.shared.sleepers.load(Ordering::SeqCst) > 0 {
            let _g = self.shared.sleep_lock.lock();
            self.shared.work_cv.notify_one();
        }
    }

    /// Weak handle that wakes waiters without keeping the pool alive.
    pub fn waker(&self) -> Waker {
        Waker(Arc::downgrade(&self.shared))
    }

    /// Wakes every thread blocked in [`wait_until`](Self::wait_until).
    pub fn notify_waiters(&self) {
        let _g = self.shared.done_lock.lock();
        self.shared.done_cv.notify_all();
    }

    /// Blocks until `done()` holds, running queued tasks in the meantime when
    /// called from a worker. With `isolate = Some(scope)` only tasks of
    /// `scope` are taken; everything else counts as foreign.
    ///
    /// Whoever makes `done()` true must call [`notify_waiters`](Self::notify_waiters).
    pub fn wait_until(&self, own_scope: ScopeId, isolate: bool, done: &dyn Fn() -> bool) -> WaitStats {
        let mut stats = WaitStats::default();
        let filter = isolate.then_some(own_scope);
        let worker = self.current_worker();
        while !done() {
            if let Some(index) = worker {
                if let Some(task) = find_task(&self.shared, index, filter) {
                    if task.scope == own_scope {
                        stats.own += 1;
                    } else {
                        stats.foreign += 1;
                    }
                    execute(&self.shared, index, task);
                    continue;
                }
            }
            let mut g = self.shared.done_lock.lock();
            if done() {
                break;
            }
            self.shared
                .done_cv
                .wait_for(&mut g, Duration::from_micros(500));
        }
        stats
    }

    /// Runs `f` as a root-scope task and blocks the caller until it returns.
    pub fn run_blocking<R, F>(&self, origin: &str, f: F) -> R
    where
        R: Send + 'static,
        F: FnOnce() -> R + Send + 'static,
    {
        let slot: Arc<Mutex<Option<std::thread::Result<R>>>> = Arc::new(Mutex::new(None));
        let out = slot.clone();
        let shared = self.shared.clone();
        let origin: Arc<str> = Arc::from(origin);
        self.spawn(ROOT_SCOPE, &origin, move || {
            let r = catch_unwind(AssertUnwindSafe(f));
            *out.lock() = Some(r);
            let _g = shared.done_lock.lock();
            shared.done_cv.notify_all();
        });
        self.wait_until(ROOT_SCOPE, false, &|| slot.lock().is_some());
        let result = slot.lock().take().expect("completed above");
        match result {
            Ok(r) => r,
            Err(p) => std::panic::resume_unwind(p),
        }
    }
}

impl Drop for Executor {
    fn drop(&mut self) {
        self.shared.shutdown.store(true, Ordering::SeqCst);
        {
            let _g = self.shared.sleep_lock.lock();
            self.shared.work_cv.notify_all();
        }
        let me = std::thread::current().id();
        for h in self.handles.lock().drain(..) {
            if h.thread().id() != me {
                let _ = h.join();
            }
        }
    }
}

fn worker_loop(shared: &Arc<Shared>, index: usize) {
    WORKER.with(|w| w.set(Some((shared.id, index))));
    loop {
        if let Some(task) = find_task(shared, index, None) {
            execute(shared, index, task);
            continue;
        }
        if shared.shutdown.load(Ordering::SeqCst) {
            break;
        }
        let mut g = shared.sleep_lock.lock();
        shared.sleepers.fetch_add(1, Ordering::SeqCst);
        if shared.queued.load(Ordering::SeqCst) == 0 && !shared.shutdown.load(Ordering::SeqCst) {
            shared.work_cv.wait_for(&mut g, Duration::from_millis(20));
        }
        shared.sleepers.fetch_sub(1, Ordering::SeqCst);
    }
    WORKER.with(|w| w.set(None));
}

fn take_matching(queue: &mut VecDeque<Task>, filter: Option<ScopeId>, from_back: bool) -> Option<Task> {
    match filter {
        None if from_back => queue.pop_back(),
        None => queue.pop_front(),
        Some(scope) => {
            let pos = if from_back {
                queue.iter().rposition(|t| t.scope == scope)
            } else {
                queue.iter().position(|t| t.scope == scope)
            }?;
            queue.remove(pos)
        }
    }
}

fn find_task(shared: &Shared, index: usize, filter: Option<ScopeId>) -> Option<Task> {
    if shared.queued.load(Ordering::SeqCst) == 0 {
        return None;
    }
    let n = shared.locals.len();
    // own deque newest-first, then steal oldest-first, then the global queue
    // Each guard is dropped before the next lock: holding our own deque
    // while locking a victim's deadlocks two workers stealing from each other.
    let mut found = take_matching(&mut shared.locals[index].lock(), filter, true);
    if found.is_none() {
        found = (1..n).find_map(|k| {
            let victim = (index + k) % n;
            let mut q = shared.locals[victim].lock();
            take_matching(&mut q, filter, false)
        });
    }
    if found.is_none() {
        found = take_matching(&mut shared.injector.lock(), filter, false);
    }
    if found.is_some() {
        shared.queued.fetch_sub(1, Ordering::SeqCst);
    }
    found
}

fn execute(shared: &Shared, index: usize, task: Task) {
    let depth = DEPTH.with(|d| {
        let v = d.get();
        d.set(v + 1);
        v
    });
    shared.occupancy.task_started();
    let start = shared.epoch.elapsed();
    let Task {
        id,
        scope,
        origin,
        func,
    } = task;
    if let Err(p) = catch_unwind(AssertUnwindSafe(func)) {
        let msg = panic_message(&*p);
        log::error!("task {id} from `{origin}` panicked: {msg}");
        shared.panics.lock().push(msg);
    }
    let end = shared.epoch.elapsed();
    shared.occupancy.task_finished();
    DEPTH.with(|d| d.set(depth));
    if shared.log_enabled.load(Ordering::Relaxed) {
        shared.logs[index].lock().push(ProvenanceEntry {
            thread: index,
            task_id: id,
            scope,
            origin,
            start_ns: start.as_nanos() as u64,
            end_ns: end.as_nanos() as u64,
            depth,
        });
    }
    shared.in_flight.fetch_sub(1, Ordering::SeqCst);
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicUsize;

    #[test]
    fn runs_all_spawned_tasks() {
        let ex = Executor::new(3);
        let count = Arc::new(AtomicUsize::new(0));
        let origin: Arc<str> = Arc::from("t");
        for _ in 0..200 {
            let c = count.clone();
            ex.spawn(ROOT_SCOPE, &origin, move || {
                c.fetch_add(1, Ordering::SeqCst);
            });
        }
        let c = count.clone();
        ex.wait_until(ROOT_SCOPE, false, &move || c.load(Ordering::SeqCst) == 200);
        let log = ex.take_provenance();
        assert_eq!(log.len(), 200);
        assert!(log.iter().all(|e| e.end_ns >= e.start_ns && e.thread < 3));
    }

    #[test]
    fn run_blocking_returns_value_and_propagates_panics() {
        let ex = Executor::new(2);
        assert_eq!(ex.run_blocking("v", || 6 * 7), 42);
        let r = catch_unwind(AssertUnwindSafe(|| ex.run_blocking("p", || panic!("boom"))));
        assert!(r.is_err());
    }

    #[test]
    fn isolated_wait_takes_only_own_scope() {
        // One worker: the outer task spawns foreign work, then its own scoped
        // work, and waits isolated. The foreign task must not run until the
        // outer task returns.
        let ex = Executor::new(1);
        let ex2 = ex.clone();
        let stats = ex.run_blocking("outer", move || {
            let foreign_ran = Arc::new(AtomicBool::new(false));
            let f = foreign_ran.clone();
            ex2.spawn(ROOT_SCOPE, &Arc::from("foreign"), move || f.store(true, Ordering::SeqCst));
            let scope = ex2.new_scope();
            let left = Arc::new(AtomicUsize::new(4));
            for _ in 0..4 {
                let l = left.clone();
                let e = ex2.clone();
                ex2.spawn(scope, &Arc::from("job"), move || {
                    l.fetch_sub(1, Ordering::SeqCst);
                    e.notify_waiters();
                });
            }
            let l = left.clone();
            let stats = ex2.wait_until(scope, true, &move || l.load(Ordering::SeqCst) == 0);
            assert!(!foreign_ran.load(Ordering::SeqCst));
            stats
        });
        assert_eq!(stats, WaitStats { own: 4, foreign: 0 });
    }

    #[test]
    fn non_isolated_wait_may_take_foreign() {
        let ex = Executor::new(1);
        let ex2 = ex.clone();
        let stats = ex.run_blocking("outer", move || {
            let scope = ex2.new_scope();
            let done = Arc::new(AtomicBool::new(false));
            let d = done.clone();
            let e = ex2.clone();
            ex2.spawn(scope, &Arc::from("job"), move || {
                d.store(true, Ordering::SeqCst);
                e.notify_waiters();
            });
            // pushed last, so the LIFO pop sees it first
            ex2.spawn(ROOT_SCOPE, &Arc::from("foreign"), || {});
            ex2.wait_until(scope, false, &move || done.load(Ordering::SeqCst))
        });
        assert_eq!(stats, WaitStats { own: 1, foreign: 1 });
    }

    #[test]
    fn nested_depth_recorded() {
        let ex = Executor::new(1);
        let ex2 = ex.clone();
        ex.run_blocking("outer", move || {
            let scope = ex2.new_scope();
            let done = Arc::new(AtomicBool::new(false));
            let d = done.clone();
            let e = ex2.clone();
            ex2.spawn(scope, &Arc::from("inner"), move || {
                d.store(true, Ordering::SeqCst);
                e.notify_waiters();
            });
            ex2.wait_until(scope, true, &move || done.load(Ordering::SeqCst));
        });
        assert!(ex.quiesce(Duration::from_secs(5)));
        let log = ex.take_provenance();
        let inner = log.iter().find(|e| &*e.origin == "inner").unwrap();
        let outer = log.iter().find(|e| &*e.origin == "outer").unwrap();
        assert_eq!((outer.depth, inner.depth), (0, 1));
        assert!(inner.start_ns >= outer.start_ns && inner.end_ns <= outer.end_ns);
    }
}
