//! Concurrency sampling and stall graphs.
//!
//! [`Occupancy`] holds the live counters the scheduler and executor update:
//! running instances per module, active task frames (which include IMT
//! subtasks) and merges in flight. A [`StallMonitor`] snapshots it on a
//! dedicated thread; [`StallReport`] aggregates the samples after the run.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use parking_lot::Mutex;

use crate::error::Result;

pub const DEFAULT_SAMPLE_PERIOD: Duration = Duration::from_millis(50);

pub const SVG_WIDTH: f64 = 1000.0;
pub const SVG_HEIGHT: f64 = 300.0;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct Counts {
    modules: Vec<u32>,
    tasks: u32,
    merges: u32,
}

/// Live occupancy counters. All updates go through one lock so a snapshot
/// never sees a module running without the task frame that hosts it.
#[derive(Debug)]
pub struct Occupancy {
    counts: Mutex<Counts>,
}

impl Occupancy {
    pub fn new(modules: usize) -> Self {
        Occupancy {
            counts: Mutex::new(Counts {
                modules: vec![0; modules],
                ..Counts::default()
            }),
        }
    }

    pub fn module_started(&self, module: usize) {
        self.counts.lock().modules[module] += 1;
    }

    pub fn module_finished(&self, module: usize) {
        self.counts.lock().modules[module] -= 1;
    }

    pub fn task_started(&self) {
        self.counts.lock().tasks += 1;
    }

    pub fn task_finished(&self) {
        self.counts.lock().tasks -= 1;
    }

    pub fn merge_started(&self) {
        self.counts.lock().merges += 1;
    }

    pub fn merge_finished(&self) {
        self.counts.lock().merges -= 1;
    }

    /// Consistent snapshot taken `t_ms` after the run started.
    pub fn sample(&self, t_ms: f64, n_threads: usize) -> StallSample {
        let c = self.counts.lock().clone();
        StallSample {
            t_ms,
            running_total: c.modules.iter().sum(),
            running_by_module: c.modules,
            active_tasks: c.tasks,
            merges_in_flight: c.merges,
            n_threads: n_threads as u32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StallSample {
    pub t_ms: f64,
    pub running_total: u32,
    pub running_by_module: Vec<u32>,
    /// Task frames on the executor, including IMT subtasks.
    pub active_tasks: u32,
    pub merges_in_flight: u32,
    pub n_threads: u32,
}

impl StallSample {
    /// `1 - min(running, n_threads) / n_threads` for this instant.
    pub fn instantaneous_stall(&self) -> f64 {
        1.0 - f64::from(self.running_total.min(self.n_threads)) / f64::from(self.n_threads)
    }
}

/// Samples an [`Occupancy`] from its own thread until stopped.
pub struct StallMonitor {
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<Vec<StallSample>>>,
}

impl StallMonitor {
    pub fn start(occupancy: Arc<Occupancy>, epoch: Instant, period: Duration, n_threads: usize) -> Self {
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let handle = std::thread::Builder::new()
            .name("parasink-stall-monitor".into())
            .spawn(move || {
                let mut samples = Vec::new();
                let mut next = Instant::now();
                while !flag.load(Ordering::Relaxed) {
                    let t = epoch.elapsed().as_secs_f64() * 1e3;
                    samples.push(occupancy.sample(t, n_threads));
                    next += period;
                    let now = Instant::now();
                    if next > now {
                        std::thread::sleep(next - now);
                    } else {
                        next = now;
                    }
                }
                samples
            })
            .expect("failed to spawn stall monitor");
        StallMonitor {
            stop,
            handle: Some(handle),
        }
    }

    pub fn stop(mut self) -> Vec<StallSample> {
        self.stop.store(true, Ordering::Relaxed);
        self.handle
            .take()
            .map(|h| h.join().unwrap_or_default())
            .unwrap_or_default()
    }
}

impl Drop for StallMonitor {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StallReport {
    pub module_names: Vec<String>,
    /// Permit limit per module; `None` is unlimited.
    pub limits: Vec<Option<usize>>,
    pub n_threads: usize,
    pub samples: Vec<StallSample>,
    /// `1 - mean(running_total) / n_threads`, with totals capped at `n_threads`.
    pub stall_fraction: f64,
    /// Per module: fraction of samples where it holds all its permits while
    /// total occupancy is below `n_threads`.
    pub attribution: Vec<f64>,
}

impl StallReport {
    pub fn from_samples(
        module_names: Vec<String>,
        limits: Vec<Option<usize>>,
        n_threads: usize,
        samples: Vec<StallSample>,
    ) -> Self {
        let n = samples.len();
        let stall_fraction = if n == 0 {
            0.0
        } else {
            samples.iter().map(StallSample::instantaneous_stall).sum::<f64>() / n as f64
        };
        let attribution = limits
            .iter()
            .enumerate()
            .map(|(m, limit)| match limit {
                Some(limit) if n > 0 => {
                    let hits = samples
                        .iter()
                        .filter(|s| {
                            s.running_by_module.get(m).copied().unwrap_or(0) as usize >= *limit
                                && (s.running_total as usize) < n_threads
                        })
                        .count();
                    hits as f64 / n as f64
                }
                _ => 0.0,
            })
            .collect();
        StallReport {
            module_names,
            limits,
            n_threads,
            samples,
            stall_fraction,
            attribution,
        }
    }

    /// Mean running modules per sample.
    pub fn module_occupancy(&self) -> f64 {
        mean(self.samples.iter().map(|s| f64::from(s.running_total)))
    }

    /// Mean active task frames per sample, including IMT subtasks.
    pub fn task_occupancy(&self) -> f64 {
        mean(self.samples.iter().map(|s| f64::from(s.active_tasks)))
    }

    /// Per-sample stall depth, `1 - min(total, n) / n`.
    pub fn stall_series(&self) -> Vec<f64> {
        self.samples.iter().map(StallSample::instantaneous_stall).collect()
    }

    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        let mut header = vec!["t_ms".to_string(), "total".to_string()];
        header.extend(self.module_names.iter().cloned());
        w.write_record(&header)?;
        for s in &self.samples {
            let mut row = vec![format!("{:.1}", s.t_ms), s.running_total.to_string()];
            row.extend(s.running_by_module.iter().map(u32::to_string));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Area chart of module concurrency over time, with the thread ceiling.
    pub fn write_svg<W: Write>(&self, mut sink: W) -> Result<()> {
        let mut svg = String::new();
        let _ = writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {SVG_WIDTH} {SVG_HEIGHT}" width="{SVG_WIDTH}" height="{SVG_HEIGHT}">"#
        );
        let _ = writeln!(svg, r##"<rect width="{SVG_WIDTH}" height="{SVG_HEIGHT}" fill="#fbe9e7"/>"##);
        let t_max = self.samples.last().map(|s| s.t_ms).unwrap_or(0.0).max(1.0);
        let y_max = self
            .samples
            .iter()
            .map(|s| s.running_total as usize)
            .max()
            .unwrap_or(0)
            .max(self.n_threads)
            .max(1) as f64
            * 1.1;
        let x = |t: f64| t / t_max * SVG_WIDTH;
        let y = |v: f64| SVG_HEIGHT - v / y_max * SVG_HEIGHT;
        if !self.samples.is_empty() {
            let mut pts = format!("0,{SVG_HEIGHT}");
            for s in &self.samples {
                let _ = write!(pts, " {:.2},{:.2}", x(s.t_ms), y(f64::from(s.running_total)));
            }
            let _ = write!(pts, " {:.2},{SVG_HEIGHT}", x(t_max));
            let _ = writeln!(svg, r##"<polygon points="{pts}" fill="#2e7d32" stroke="none"/>"##);
        }
        let ceiling = y(self.n_threads as f64);
        let _ = writeln!(
            svg,
            r##"<line x1="0" y1="{ceiling:.2}" x2="{SVG_WIDTH}" y2="{ceiling:.2}" stroke="#000" stroke-dasharray="6,4"/>"##
        );
        let _ = writeln!(
            svg,
            r#"<text x="8" y="16" font-size="12" font-family="sans-serif">threads={} stall={:.3} t_max={:.0}ms</text>"#,
            self.n_threads, self.stall_fraction, t_max
        );
        svg.push_str("</svg>\n");
        sink.write_all(svg.as_bytes())?;
        Ok(())
    }
}

/// Writes `<stem>.csv` and `<stem>.svg` into `dir`.
pub fn emit_stall_graph(report: &StallReport, dir: &Path, stem: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    report.write_csv(std::io::BufWriter::new(std::fs::File::create(dir.join(format!("{stem}.csv")))?))?;
    report.write_svg(std::io::BufWriter::new(std::fs::File::create(dir.join(format!("{stem}.svg")))?))?;
    Ok(())
}

/// A module execution interval, in milliseconds since run start.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub module: usize,
    pub start_ms: f64,
    pub end_ms: f64,
}

/// Samples a recorded schedule at `period_ms` over `[0, duration_ms)` as the
/// live monitor would have.
pub fn replay(
    intervals: &[Interval],
    module_names: Vec<String>,
    limits: Vec<Option<usize>>,
    n_threads: usize,
    period_ms: f64,
    duration_ms: f64,
) -> StallReport {
    let modules = module_names.len();
    let mut samples = Vec::new();
    let mut t = 0.0;
    while t < duration_ms {
        let mut by_module = vec![0u32; modules];
        for iv in intervals {
            if iv.start_ms <= t && t < iv.end_ms {
                by_module[iv.module] += 1;
            }
        }
        let total: u32 = by_module.iter().sum();
        samples.push(StallSample {
            t_ms: t,
            running_total: total,
            running_by_module: by_module,
            active_tasks: total,
            merges_in_flight: 0,
            n_threads: n_threads as u32,
        });
        t += period_ms;
    }
    StallReport::from_samples(module_names, limits, n_threads, samples)
}

/// Pearson correlation between per-sample stall depth and whether a flush
/// window `[start_ms, end_ms)` covers the sample time. `None` when either
/// series is constant.
pub fn flush_gap_correlation(report: &StallReport, flush_windows: &[(f64, f64)]) -> Option<f64> {
    let stall = report.stall_series();
    let active: Vec<f64> = report
        .samples
        .iter()
        .map(|s| {
            let hit = flush_windows.iter().any(|&(a, b)| a <= s.t_ms && s.t_ms < b);
            if hit {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    pearson(&stall, &active)
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len().min(b.len());
    if n < 2 {
        return None;
    }
    let (a, b) = (&a[..n], &b[..n]);
    let ma = a.iter().sum::<f64>() / n as f64;
    let mb = b.iter().sum::<f64>() / n as f64;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va.sqrt() * vb.sqrt()))
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}
