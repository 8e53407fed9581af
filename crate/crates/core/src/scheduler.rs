//! A small on-demand event-processing framework.
//!
//! Modules declare the products they consume and produce; [`build_schedule`]
//! turns that into a dependency DAG. [`Framework::run`] pushes events through
//! `n_streams` logical slots on a shared [`Executor`]: a module becomes
//! runnable for an event once all its producers finished for that event.
//! Each module has a counting permit; a request that finds no free permit is
//! parked on the module's wait list and the thread moves on to other work.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use parking_lot::Mutex;

use crate::error::{panic_message, Error, Result};
use crate::executor::{Executor, ProvenanceEntry, ROOT_SCOPE};
use crate::imt::Imt;
use crate::stall::{Occupancy, StallMonitor, StallReport, StallSample, DEFAULT_SAMPLE_PERIOD};

/// Busy-loop iterations per abstract work unit.
pub const WORK_UNIT_ITERATIONS: u64 = 1000;

/// Burns `units` work units of CPU deterministically.
pub fn burn(units: u64) -> u64 {
    let mut x: u64 = 0x9e37_79b9_7f4a_7c15;
    for _ in 0..units * WORK_UNIT_ITERATIONS {
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
    }
    std::hint::black_box(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModuleKind {
    Producer,
    Output,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModuleSpec {
    pub name: String,
    pub consumes: BTreeSet<String>,
    pub produces: BTreeSet<String>,
    pub kind: ModuleKind,
    /// `None` means unlimited.
    pub concurrency_limit: Option<usize>,
    /// Simulated work units per event.
    pub cost: u64,
}

impl ModuleSpec {
    pub fn producer<I, J, S, T>(name: &str, consumes: I, produces: J, cost: u64) -> Self
    where
        I: IntoIterator<Item = S>,
        J: IntoIterator<Item = T>,
        S: Into<String>,
        T: Into<String>,
    {
        ModuleSpec {
            name: name.to_string(),
            consumes: consumes.into_iter().map(Into::into).collect(),
            produces: produces.into_iter().map(Into::into).collect(),
            kind: ModuleKind::Producer,
            concurrency_limit: None,
            cost,
        }
    }

    pub fn output<I, S>(name: &str, consumes: I, concurrency_limit: Option<usize>) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        ModuleSpec {
            name: name.to_string(),
            consumes: consumes.into_iter().map(Into::into).collect(),
            produces: BTreeSet::new(),
            kind: ModuleKind::Output,
            concurrency_limit,
            cost: 0,
        }
    }

    pub fn with_limit(mut self, limit: Option<usize>) -> Self {
        self.concurrency_limit = limit;
        self
    }
}

/// Validated dependency DAG.
#[derive(Debug, Clone)]
pub struct Schedule {
    specs: Vec<ModuleSpec>,
    prerequisites: Vec<Vec<usize>>,
    dependents: Vec<Vec<usize>>,
    order: Vec<usize>,
    product_index: Arc<HashMap<String, usize>>,
}

impl Schedule {
    pub fn specs(&self) -> &[ModuleSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    /// Modules that must finish for an event before `module` may run.
    pub fn prerequisites(&self, module: usize) -> &[usize] {
        &self.prerequisites[module]
    }

    pub fn dependents(&self, module: usize) -> &[usize] {
        &self.dependents[module]
    }

    pub fn topological_order(&self) -> &[usize] {
        &self.order
    }

    pub fn names(&self) -> Vec<String> {
        self.specs.iter().map(|s| s.name.clone()).collect()
    }

    pub fn limits(&self) -> Vec<Option<usize>> {
        self.specs.iter().map(|s| s.concurrency_limit).collect()
    }
}

/// Validates `modules` against the products the event source provides and
/// derives each module's prerequisites.
pub fn build_schedule(modules: Vec<ModuleSpec>, source_products: &[String]) -> Result<Schedule> {
    let mut names = HashMap::new();
    for (i, m) in modules.iter().enumerate() {
        if names.insert(m.name.as_str(), i).is_some() {
            return Err(Error::Config(format!("duplicate module name `{}`", m.name)));
        }
        if m.concurrency_limit == Some(0) {
            return Err(Error::Config(format!("module `{}` has a zero concurrency limit", m.name)));
        }
        if m.kind == ModuleKind::Output && !m.produces.is_empty() {
            return Err(Error::Config(format!("output module `{}` must not produce products", m.name)));
        }
    }

    let mut producer_of: HashMap<&str, Option<usize>> = HashMap::new();
    for p in source_products {
        producer_of.insert(p, None);
    }
    for (i, m) in modules.iter().enumerate() {
        for p in &m.produces {
            if producer_of.insert(p, Some(i)).is_some() {
                return Err(Error::Config(format!("product `{p}` has more than one producer")));
            }
        }
    }

    let n = modules.len();
    let mut prerequisites = vec![Vec::new(); n];
    let mut dependents = vec![Vec::new(); n];
    for (i, m) in modules.iter().enumerate() {
        let mut pre = BTreeSet::new();
        for p in &m.consumes {
            match producer_of.get(p.as_str()) {
                None => {
                    return Err(Error::Config(format!(
                        "module `{}` consumes `{p}` but nothing produces it",
                        m.name
                    )))
                }
                Some(Some(j)) => {
                    pre.insert(*j);
                }
                Some(None) => {}
            }
        }
        for &j in &pre {
            dependents[j].push(i);
        }
        prerequisites[i] = pre.into_iter().collect();
    }

    let order = topological_order(&modules, &prerequisites)?;

    let mut products: Vec<String> = source_products.to_vec();
    for m in &modules {
        products.extend(m.produces.iter().cloned());
    }
    let product_index = products.into_iter().enumerate().map(|(i, p)| (p, i)).collect();

    Ok(Schedule {
        specs: modules,
        prerequisites,
        dependents,
        order,
        product_index: Arc::new(product_index),
    })
}

fn topological_order(modules: &[ModuleSpec], prerequisites: &[Vec<usize>]) -> Result<Vec<usize>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Active,
        Done,
    }
    fn visit(
        v: usize,
        pre: &[Vec<usize>],
        marks: &mut [Mark],
        stack: &mut Vec<usize>,
        order: &mut Vec<usize>,
    ) -> std::result::Result<(), Vec<usize>> {
        match marks[v] {
            Mark::Done => return Ok(()),
            Mark::Active => {
                let at = stack.iter().position(|&x| x == v).unwrap_or(0);
                let mut cycle = stack[at..].to_vec();
                cycle.push(v);
                return Err(cycle);
            }
            Mark::New => {}
        }
        marks[v] = Mark::Active;
        stack.push(v);
        for &u in &pre[v] {
            visit(u, pre, marks, stack, order)?;
        }
        stack.pop();
        marks[v] = Mark::Done;
        order.push(v);
        Ok(())
    }

    let mut marks = vec![Mark::New; modules.len()];
    let mut order = Vec::with_capacity(modules.len());
    for v in 0..modules.len() {
        let mut stack = Vec::new();
        if let Err(mut cycle) = visit(v, prerequisites, &mut marks, &mut stack, &mut order) {
            // the stack runs consumer -> producer; print it in data-flow order
            cycle.reverse();
            let names: Vec<&str> = cycle.iter().map(|&i| modules[i].name.as_str()).collect();
            return Err(Error::Config(format!("dependency cycle: {}", names.join(" -> "))));
        }
    }
    Ok(order)
}

/// Per-event product store shared by the modules processing it.
#[derive(Debug)]
pub struct EventPrincipal {
    id: u64,
    slots: Vec<OnceLock<Vec<u8>>>,
    index: Arc<HashMap<String, usize>>,
}

impl EventPrincipal {
    fn new(id: u64, index: Arc<HashMap<String, usize>>) -> Self {
        EventPrincipal {
            id,
            slots: (0..index.len()).map(|_| OnceLock::new()).collect(),
            index,
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn put(&self, product: &str, bytes: Vec<u8>) -> Result<()> {
        let &i = self
            .index
            .get(product)
            .ok_or_else(|| Error::SchemaMismatch(format!("unknown product `{product}`")))?;
        self.slots[i]
            .set(bytes)
            .map_err(|_| Error::SchemaMismatch(format!("product `{product}` put twice")))
    }

    pub fn get(&self, product: &str) -> Option<&[u8]> {
        self.index
            .get(product)
            .and_then(|&i| self.slots[i].get())
            .map(Vec::as_slice)
    }

    /// Looks up `product`, failing when it has not been produced.
    pub fn require(&self, product: &str) -> Result<&[u8]> {
        self.get(product)
            .ok_or_else(|| Error::SchemaMismatch(format!("event {} lacks product `{product}`", self.id)))
    }
}

/// Supplies events and the products they carry on arrival.
pub trait EventSource: Send + Sync {
    fn event_count(&self) -> u64;

    fn source_products(&self) -> Vec<String> {
        Vec::new()
    }

    fn fill(&self, _event: &EventPrincipal) -> Result<()> {
        Ok(())
    }
}

/// Events `0..n` without products.
#[derive(Debug, Clone, Copy)]
pub struct IdSource(pub u64);

impl EventSource for IdSource {
    fn event_count(&self) -> u64 {
        self.0
    }
}

pub struct ModuleContext<'a> {
    pub module: usize,
    pub name: &'a str,
    /// `None` during end-of-job.
    pub stream: Option<usize>,
    pub imt: &'a Imt,
    pub executor: &'a Arc<Executor>,
    pub occupancy: &'a Arc<Occupancy>,
    epoch: Instant,
}

impl ModuleContext<'_> {
    /// Milliseconds since the run started.
    pub fn elapsed_ms(&self) -> f64 {
        self.epoch.elapsed().as_secs_f64() * 1e3
    }
}

pub trait Module: Send + Sync {
    fn process(&self, event: &EventPrincipal, ctx: &ModuleContext<'_>) -> Result<()>;

    /// Called once after the last event, in topological order.
    fn end_job(&self, _ctx: &ModuleContext<'_>) -> Result<()> {
        Ok(())
    }
}

impl<F> Module for F
where
    F: Fn(&EventPrincipal, &ModuleContext<'_>) -> Result<()> + Send + Sync,
{
    fn process(&self, event: &EventPrincipal, ctx: &ModuleContext<'_>) -> Result<()> {
        self(event, ctx)
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub n_streams: usize,
    pub n_threads: usize,
    pub imt: bool,
    pub isolation: bool,
    /// `None` disables the stall monitor.
    pub sample_period: Option<Duration>,
    pub log_provenance: bool,
}

impl RunOptions {
    pub fn new(n_threads: usize) -> Self {
        RunOptions {
            n_streams: n_threads,
            n_threads,
            imt: false,
            isolation: true,
            sample_period: Some(DEFAULT_SAMPLE_PERIOD),
            log_provenance: true,
        }
    }
}

/// One module execution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModuleExecution {
    pub module: usize,
    /// `None` for end-of-job work.
    pub event_id: Option<u64>,
    pub stream: Option<usize>,
    pub thread: Option<usize>,
    /// Nanoseconds since run start.
    pub start_ns: u64,
    pub end_ns: u64,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub module_names: Vec<String>,
    pub limits: Vec<Option<usize>>,
    pub n_threads: usize,
    pub n_streams: usize,
    pub events_processed: u64,
    pub wall_time: Duration,
    pub busy_time: Vec<Duration>,
    pub executions: Vec<ModuleExecution>,
    pub samples: Vec<StallSample>,
    pub provenance: Vec<ProvenanceEntry>,
    /// Foreign tasks run by threads waiting inside an IMT job.
    pub imt_foreign_executions: u64,
}

impl RunReport {
    /// Largest number of simultaneously running executions of `module`.
    pub fn max_overlap(&self, module: usize) -> usize {
        let mut edges: Vec<(u64, i32)> = Vec::new();
        for e in self.executions.iter().filter(|e| e.module == module) {
            edges.push((e.start_ns, 1));
            edges.push((e.end_ns, -1));
        }
        // ends sort before starts at equal timestamps
        edges.sort_unstable();
        let (mut cur, mut max) = (0i32, 0i32);
        for (_, d) in edges {
            cur += d;
            max = max.max(cur);
        }
        max as usize
    }

    pub fn max_overlaps(&self) -> Vec<usize> {
        (0..self.module_names.len()).map(|m| self.max_overlap(m)).collect()
    }

    pub fn check_limits(&self) -> Result<()> {
        for (m, limit) in self.limits.iter().enumerate() {
            if let Some(limit) = limit {
                let seen = self.max_overlap(m);
                if seen > *limit {
                    return Err(Error::Verification(format!(
                        "module `{}` ran {seen} instances concurrently, limit {limit}",
                        self.module_names[m]
                    )));
                }
            }
        }
        Ok(())
    }

    /// Every `(event, module)` pair ran exactly once.
    pub fn check_completeness(&self, events: u64) -> Result<()> {
        let n = self.module_names.len();
        let mut seen = vec![0u32; events as usize * n];
        for e in &self.executions {
            if let Some(id) = e.event_id {
                if id >= events {
                    return Err(Error::Verification(format!("unexpected event id {id}")));
                }
                seen[id as usize * n + e.module] += 1;
            }
        }
        if let Some(bad) = seen.iter().position(|&c| c != 1) {
            return Err(Error::Verification(format!(
                "event {} ran module `{}` {} times",
                bad / n,
                self.module_names[bad % n],
                seen[bad]
            )));
        }
        Ok(())
    }

    /// Tasks that did not come from an IMT job but ran nested inside an
    /// execution of `module` on the same thread.
    pub fn foreign_nested_in(&self, module: usize) -> usize {
        self.executions
            .iter()
            .filter(|e| e.module == module && e.thread.is_some())
            .map(|e| {
                self.provenance
                    .iter()
                    .filter(|p| {
                        Some(p.thread) == e.thread
                            && p.depth > 0
                            && p.start_ns > e.start_ns
                            && p.end_ns < e.end_ns
                            && &*p.origin != "imt"
                    })
                    .count()
            })
            .sum()
    }

    pub fn stall_report(&self) -> StallReport {
        StallReport::from_samples(
            self.module_names.clone(),
            self.limits.clone(),
            self.n_threads,
            self.samples.clone(),
        )
    }

    /// Per-module summary: `module,limit,executions,busy_s,max_overlap`.
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["module", "limit", "executions", "busy_s", "max_overlap"])?;
        for (m, name) in self.module_names.iter().enumerate() {
            let execs = self
                .executions
                .iter()
                .filter(|e| e.module == m && e.event_id.is_some())
                .count();
            w.write_record([
                name.clone(),
                self.limits[m].map_or("unlimited".to_string(), |l| l.to_string()),
                execs.to_string(),
                format!("{:.6}", self.busy_time[m].as_secs_f64()),
                self.max_overlap(m).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

struct Permit {
    limit: Option<usize>,
    inner: Mutex<PermitState>,
}

struct PermitState {
    running: usize,
    waiting: VecDeque<usize>,
}

struct Stream {
    event: Mutex<Option<Arc<EventPrincipal>>>,
    pending: Vec<AtomicUsize>,
    left: AtomicUsize,
}

struct RunState {
    schedule: Arc<Schedule>,
    modules: Vec<Arc<dyn Module>>,
    source: Arc<dyn EventSource>,
    executor: Arc<Executor>,
    imt: Arc<Imt>,
    occupancy: Arc<Occupancy>,
    origins: Vec<Arc<str>>,
    total: u64,
    next_event: AtomicU64,
    streams: Vec<Stream>,
    permits: Vec<Permit>,
    abort: AtomicBool,
    error: Mutex<Option<Error>>,
    streams_done: AtomicUsize,
    executions: Mutex<Vec<ModuleExecution>>,
    epoch: Instant,
}

impl RunState {
    fn ctx(&self, module: usize, stream: Option<usize>) -> ModuleContext<'_> {
        ModuleContext {
            module,
            name: &self.schedule.specs[module].name,
            stream,
            imt: &self.imt,
            executor: &self.executor,
            occupancy: &self.occupancy,
            epoch: self.epoch,
        }
    }

    fn fail(&self, e: Error) {
        self.abort.store(true, Ordering::SeqCst);
        self.error.lock().get_or_insert(e);
    }

    fn now_ns(&self) -> u64 {
        self.epoch.elapsed().as_nanos() as u64
    }
}

fn start_stream(st: &Arc<RunState>, s: usize) {
    let stream = &st.streams[s];
    loop {
        let id = st.next_event.fetch_add(1, Ordering::SeqCst);
        if st.abort.load(Ordering::SeqCst) || id >= st.total {
            *stream.event.lock() = None;
            if st.streams_done.fetch_add(1, Ordering::SeqCst) + 1 == st.streams.len() {
                st.executor.notify_waiters();
            }
            return;
        }
        let principal = EventPrincipal::new(id, st.schedule.product_index.clone());
        if let Err(e) = st.source.fill(&principal) {
            st.fail(Error::ModuleFailed {
                module: "source".into(),
                event_id: id,
                source: Box::new(e),
            });
            continue;
        }
        *stream.event.lock() = Some(Arc::new(principal));
        let n = st.schedule.len();
        if n == 0 {
            continue;
        }
        for m in 0..n {
            stream.pending[m].store(st.schedule.prerequisites[m].len(), Ordering::SeqCst);
        }
        stream.left.store(n, Ordering::SeqCst);
        for m in 0..n {
            if st.schedule.prerequisites[m].is_empty() {
                request(st, s, m);
            }
        }
        return;
    }
}

fn request(st: &Arc<RunState>, s: usize, m: usize) {
    let permit = &st.permits[m];
    {
        let mut p = permit.inner.lock();
        if permit.limit.is_some_and(|l| p.running >= l) {
            p.waiting.push_back(s);
            return;
        }
        p.running += 1;
    }
    spawn_module(st, s, m);
}

fn spawn_module(st: &Arc<RunState>, s: usize, m: usize) {
    let state = st.clone();
    st.executor
        .spawn(ROOT_SCOPE, &st.origins[m], move || run_module(&state, s, m));
}

fn run_module(st: &Arc<RunState>, s: usize, m: usize) {
    let stream = &st.streams[s];
    let principal = stream
        .event
        .lock()
        .clone()
        .expect("stream holds an event while modules run");
    if !st.abort.load(Ordering::SeqCst) {
        st.occupancy.module_started(m);
        let start_ns = st.now_ns();
        let ctx = st.ctx(m, Some(s));
        let result = catch_unwind(AssertUnwindSafe(|| st.modules[m].process(&principal, &ctx)))
            .unwrap_or_else(|p| Err(Error::TaskPanic(panic_message(&*p))));
        let end_ns = st.now_ns();
        st.occupancy.module_finished(m);
        st.executions.lock().push(ModuleExecution {
            module: m,
            event_id: Some(principal.id()),
            stream: Some(s),
            thread: st.executor.current_worker(),
            start_ns,
            end_ns,
        });
        if let Err(e) = result {
            st.fail(Error::ModuleFailed {
                module: st.schedule.specs[m].name.clone(),
                event_id: principal.id(),
                source: Box::new(e),
            });
        }
    }

    let handoff = {
        let mut p = st.permits[m].inner.lock();
        let next = p.waiting.pop_front();
        if next.is_none() {
            p.running -= 1;
        }
        next
    };
    if let Some(s2) = handoff {
        spawn_module(st, s2, m);
    }

    for &d in &st.schedule.dependents[m] {
        if stream.pending[d].fetch_sub(1, Ordering::SeqCst) == 1 {
            request(st, s, d);
        }
    }
    if stream.left.fetch_sub(1, Ordering::SeqCst) == 1 {
        start_stream(st, s);
    }
}

/// Owns the pool, the IMT switch and the occupancy counters for one run.
pub struct Framework {
    schedule: Arc<Schedule>,
    options: RunOptions,
    executor: Arc<Executor>,
    occupancy: Arc<Occupancy>,
    imt: Arc<Imt>,
    ran: AtomicBool,
}

impl Framework {
    pub fn new(schedule: Schedule, options: RunOptions) -> Result<Self> {
        if options.n_streams == 0 || options.n_threads == 0 {
            return Err(Error::Config("n_streams and n_threads must be >= 1".into()));
        }
        let occupancy = Arc::new(Occupancy::new(schedule.len()));
        let executor = Executor::with_occupancy(options.n_threads, occupancy.clone());
        executor.set_provenance_logging(options.log_provenance);
        let imt = Arc::new(Imt::with_pool(options.imt, executor.clone(), options.isolation));
        Ok(Framework {
            schedule: Arc::new(schedule),
            options,
            executor,
            occupancy,
            imt,
            ran: AtomicBool::new(false),
        })
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn options(&self) -> &RunOptions {
        &self.options
    }

    pub fn executor(&self) -> &Arc<Executor> {
        &self.executor
    }

    pub fn occupancy(&self) -> &Arc<Occupancy> {
        &self.occupancy
    }

    pub fn imt(&self) -> &Arc<Imt> {
        &self.imt
    }

    /// Processes every event of `source`, then runs each module's end-of-job
    /// hook. `modules[i]` implements `schedule().specs()[i]`.
    pub fn run(&self, source: Arc<dyn EventSource>, modules: Vec<Arc<dyn Module>>) -> Result<RunReport> {
        if self.ran.swap(true, Ordering::SeqCst) {
            return Err(Error::Lifecycle("a framework instance runs only once".into()));
        }
        if modules.len() != self.schedule.len() {
            return Err(Error::Config(format!(
                "{} module implementations for {} specs",
                modules.len(),
                self.schedule.len()
            )));
        }
        let n_modules = self.schedule.len();
        let epoch = Instant::now();
        let st = Arc::new(RunState {
            schedule: self.schedule.clone(),
            modules,
            source: source.clone(),
            executor: self.executor.clone(),
            imt: self.imt.clone(),
            occupancy: self.occupancy.clone(),
            origins: self.schedule.specs.iter().map(|s| Arc::from(s.name.as_str())).collect(),
            total: source.event_count(),
            next_event: AtomicU64::new(0),
            streams: (0..self.options.n_streams)
                .map(|_| Stream {
                    event: Mutex::new(None),
                    pending: (0..n_modules).map(|_| AtomicUsize::new(0)).collect(),
                    left: AtomicUsize::new(0),
                })
                .collect(),
            permits: self
                .schedule
                .specs
                .iter()
                .map(|s| Permit {
                    limit: s.concurrency_limit,
                    inner: Mutex::new(PermitState {
                        running: 0,
                        waiting: VecDeque::new(),
                    }),
                })
                .collect(),
            abort: AtomicBool::new(false),
            error: Mutex::new(None),
            streams_done: AtomicUsize::new(0),
            executions: Mutex::new(Vec::new()),
            epoch,
        });

        let monitor = self
            .options
            .sample_period
            .map(|p| StallMonitor::start(self.occupancy.clone(), epoch, p, self.options.n_threads));

        let stream_origin: Arc<str> = Arc::from("stream");
        for s in 0..self.options.n_streams {
            let state = st.clone();
            self.executor
                .spawn(ROOT_SCOPE, &stream_origin, move || start_stream(&state, s));
        }
        let waiter = st.clone();
        self.executor.wait_until(ROOT_SCOPE, false, &move || {
            waiter.streams_done.load(Ordering::SeqCst) == waiter.streams.len()
        });

        if st.error.lock().is_none() {
            for &m in self.schedule.topological_order() {
                let state = st.clone();
                let r = self.executor.run_blocking("end_job", move || {
                    state.occupancy.module_started(m);
                    let start_ns = state.now_ns();
                    let ctx = state.ctx(m, None);
                    let r = state.modules[m].end_job(&ctx);
                    let end_ns = state.now_ns();
                    state.occupancy.module_finished(m);
                    state.executions.lock().push(ModuleExecution {
                        module: m,
                        event_id: None,
                        stream: None,
                        thread: state.executor.current_worker(),
                        start_ns,
                        end_ns,
                    });
                    r
                });
                if let Err(e) = r {
                    st.fail(Error::ModuleFailed {
                        module: self.schedule.specs[m].name.clone(),
                        event_id: u64::MAX,
                        source: Box::new(e),
                    });
                    break;
                }
            }
        }
        let wall_time = epoch.elapsed();
        let samples = monitor.map(StallMonitor::stop).unwrap_or_default();

        if let Some(e) = st.error.lock().take() {
            return Err(e);
        }
        let executions = std::mem::take(&mut *st.executions.lock());
        let mut busy_time = vec![Duration::ZERO; n_modules];
        for e in &executions {
            busy_time[e.module] += Duration::from_nanos(e.end_ns - e.start_ns);
        }
        if !self.executor.quiesce(Duration::from_secs(10)) {
            log::warn!("executor did not quiesce; provenance may be incomplete");
        }
        let offset = epoch.duration_since(self.executor.epoch()).as_nanos() as u64;
        let provenance = self
            .executor
            .take_provenance()
            .into_iter()
            .map(|mut p| {
                p.start_ns = p.start_ns.saturating_sub(offset);
                p.end_ns = p.end_ns.saturating_sub(offset);
                p
            })
            .collect();
        Ok(RunReport {
            module_names: self.schedule.names(),
            limits: self.schedule.limits(),
            n_threads: self.options.n_threads,
            n_streams: self.options.n_streams,
            events_processed: st.total.min(st.next_event.load(Ordering::SeqCst)),
            wall_time,
            busy_time,
            executions,
            samples,
            provenance,
            imt_foreign_executions: self.imt.foreign_executions(),
        })
    }
}
