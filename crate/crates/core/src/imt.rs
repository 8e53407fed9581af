//! Implicit multi-threading of the basket compression loop.
//!
//! [`compress_all`] fans a job's baskets out as tasks on a shared
//! [`Executor`] and blocks until all of them finish. While it waits the
//! calling thread keeps running tasks. With `isolation` set it only runs the
//! job's own tasks, so a flushing output module cannot pick up unrelated
//! (possibly long) work and delay its own return.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;

use crate::codec::{compress_basket, Basket, CompressedBasket, MAX_LEVEL};
use crate::error::{panic_message, Error, Result};
use crate::executor::{Executor, WaitStats};

#[derive(Debug, Clone)]
pub struct CompressionJob {
    pub baskets: Vec<Basket>,
    pub level: u32,
    pub isolation: bool,
}

/// Outcome of one parallel job as seen from the calling thread.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct JobStats {
    pub tasks: usize,
    /// Tasks from outside the job that ran on the caller while it waited.
    pub foreign_on_caller: usize,
    pub own_on_caller: usize,
}

/// Compresses every basket of `job` on `pool`, preserving input order.
pub fn compress_all(job: CompressionJob, pool: &Executor) -> Result<Vec<CompressedBasket>> {
    compress_all_with_stats(job, pool).map(|(out, _)| out)
}

pub fn compress_all_with_stats(
    job: CompressionJob,
    pool: &Executor,
) -> Result<(Vec<CompressedBasket>, JobStats)> {
    let CompressionJob {
        baskets,
        level,
        isolation,
    } = job;
    if level > MAX_LEVEL {
        return Err(Error::Usage(format!("codec level {level} outside 0..={MAX_LEVEL}")));
    }
    if baskets.len() <= 1 {
        let out = baskets
            .iter()
            .map(|b| compress_basket(b, level))
            .collect::<Result<Vec<_>>>()?;
        return Ok((out, JobStats::default()));
    }
    parallel_map(baskets, Arc::new(move |b: &Basket| compress_basket(b, level)), pool, isolation)
}

type JobFn<T, R> = Arc<dyn Fn(&T) -> Result<R> + Send + Sync>;

struct JobState<R> {
    results: Mutex<Vec<Option<R>>>,
    remaining: AtomicUsize,
    failed: AtomicBool,
    first_error: Mutex<Option<Error>>,
}

/// Runs `f` over `items` as one scoped job; fail-fast, but every task is
/// drained before returning.
pub(crate) fn parallel_map<T, R>(
    items: Vec<T>,
    f: JobFn<T, R>,
    pool: &Executor,
    isolation: bool,
) -> Result<(Vec<R>, JobStats)>
where
    T: Send + Sync + 'static,
    R: Send + 'static,
{
    let n = items.len();
    let scope = pool.new_scope();
    let origin: Arc<str> = Arc::from("imt");
    let items = Arc::new(items);
    let state = Arc::new(JobState {
        results: Mutex::new((0..n).map(|_| None).collect()),
        remaining: AtomicUsize::new(n),
        failed: AtomicBool::new(false),
        first_error: Mutex::new(None),
    });
    let notifier = pool_notifier(pool);
    for i in 0..n {
        let items = items.clone();
        let state = state.clone();
        let f = f.clone();
        let notify = notifier.clone();
        pool.spawn(scope, &origin, move || {
            if !state.failed.load(Ordering::SeqCst) {
                let r = catch_unwind(AssertUnwindSafe(|| f(&items[i])))
                    .unwrap_or_else(|p| Err(Error::TaskPanic(panic_message(&*p))));
                match r {
                    Ok(v) => state.results.lock()[i] = Some(v),
                    Err(e) => {
                        state.failed.store(true, Ordering::SeqCst);
                        state.first_error.lock().get_or_insert(e);
                    }
                }
            }
            if state.remaining.fetch_sub(1, Ordering::SeqCst) == 1 {
                notify();
            }
        });
    }
    let s = state.clone();
    let WaitStats { own, foreign } =
        pool.wait_until(scope, isolation, &move || s.remaining.load(Ordering::SeqCst) == 0);
    let stats = JobStats {
        tasks: n,
        foreign_on_caller: foreign,
        own_on_caller: own,
    };
    if let Some(e) = state.first_error.lock().take() {
        return Err(e);
    }
    let out = std::mem::take(&mut *state.results.lock())
        .into_iter()
        .map(|r| r.expect("every task completed without error"))
        .collect();
    Ok((out, stats))
}

// Tasks must not keep the executor alive (it is dropped from its owner), so
// the notifier captures a weak handle.
fn pool_notifier(pool: &Executor) -> Arc<dyn Fn() + Send + Sync> {
    let waker = pool.waker();
    Arc::new(move || waker.wake())
}

/// Process-level IMT switch plus the pool it dispatches to.
///
/// The switch can be flipped only before the first [`Imt::compress_all`].
#[derive(Debug)]
pub struct Imt {
    state: Mutex<ImtState>,
    used: AtomicBool,
    foreign: AtomicU64,
}

#[derive(Debug)]
struct ImtState {
    enabled: bool,
    isolation: bool,
    pool: Option<Arc<Executor>>,
}

impl Default for Imt {
    fn default() -> Self {
        Imt::disabled()
    }
}

impl Imt {
    pub fn disabled() -> Self {
        Imt {
            state: Mutex::new(ImtState {
                enabled: false,
                isolation: true,
                pool: None,
            }),
            used: AtomicBool::new(false),
            foreign: AtomicU64::new(0),
        }
    }

    /// IMT bound to an existing shared pool.
    pub fn with_pool(enabled: bool, pool: Arc<Executor>, isolation: bool) -> Self {
        Imt {
            state: Mutex::new(ImtState {
                enabled,
                isolation,
                pool: Some(pool),
            }),
            used: AtomicBool::new(false),
            foreign: AtomicU64::new(0),
        }
    }

    /// Enables or disables IMT with a dedicated pool of `pool_size` workers.
    pub fn set_imt(&self, enabled: bool, pool_size: usize) -> Result<()> {
        if pool_size == 0 {
            return Err(Error::Usage("IMT pool size must be positive".into()));
        }
        if self.used.load(Ordering::SeqCst) {
            return Err(Error::Usage("IMT cannot be reconfigured after first use".into()));
        }
        let mut st = self.state.lock();
        st.enabled = enabled;
        st.pool = enabled.then(|| Executor::new(pool_size));
        Ok(())
    }

    pub fn set_isolation(&self, isolation: bool) -> Result<()> {
        if self.used.load(Ordering::SeqCst) {
            return Err(Error::Usage("IMT cannot be reconfigured after first use".into()));
        }
        self.state.lock().isolation = isolation;
        Ok(())
    }

    pub fn enabled(&self) -> bool {
        self.state.lock().enabled
    }

    pub fn isolation(&self) -> bool {
        self.state.lock().isolation
    }

    /// Foreign tasks run by callers waiting on any job so far.
    pub fn foreign_executions(&self) -> u64 {
        self.foreign.load(Ordering::SeqCst)
    }

    /// Compresses `baskets` at `level`, in parallel when enabled and
    /// sequentially on the caller otherwise.
    pub fn compress_all(&self, baskets: Vec<Basket>, level: u32) -> Result<Vec<CompressedBasket>> {
        self.compress_all_with_stats(baskets, level).map(|(out, _)| out)
    }

    pub fn compress_all_with_stats(
        &self,
        baskets: Vec<Basket>,
        level: u32,
    ) -> Result<(Vec<CompressedBasket>, JobStats)> {
        self.used.store(true, Ordering::SeqCst);
        let (pool, isolation) = {
            let st = self.state.lock();
            (st.enabled.then(|| st.pool.clone()).flatten(), st.isolation)
        };
        match pool {
            Some(pool) => {
                let r = compress_all_with_stats(
                    CompressionJob {
                        baskets,
                        level,
                        isolation,
                    },
                    &pool,
                );
                if let Ok((_, stats)) = &r {
                    self.foreign.fetch_add(stats.foreign_on_caller as u64, Ordering::SeqCst);
                }
                r
            }
            None => {
                if level > MAX_LEVEL {
                    return Err(Error::Usage(format!("codec level {level} outside 0..={MAX_LEVEL}")));
                }
                let out = baskets
                    .iter()
                    .map(|b| compress_basket(b, level))
                    .collect::<Result<Vec<_>>>()?;
                Ok((out, JobStats::default()))
            }
        }
    }
}
