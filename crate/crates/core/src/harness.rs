//! Experiment harness: output scenarios x processing configurations x
//! thread counts, with scaling tables, stall graphs and output verification.

use std::borrow::Cow;
use std::fmt::{self, Write as _};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::codec::{decompress_basket, ColumnStore, FlushPolicy, EVENT_ID_COLUMN};
use crate::container::{read_container, ContainerWriter, FileMeta};
use crate::error::{Error, Result};
use crate::event_model::{EventGenerator, Tier, WorkloadProfile};
use crate::imt::Imt;
use crate::merger::{BufferMerger, MergeDecision, MergeStats, MergerConfig, SelectionPolicy};
use crate::scheduler::{
    build_schedule, burn, EventPrincipal, Framework, IdSource, Module, ModuleContext, ModuleSpec, RunOptions,
    RunReport,
};
use crate::stall::{emit_stall_graph, StallReport, DEFAULT_SAMPLE_PERIOD};

/// Extension of container files written by the harness.
pub const CONTAINER_EXT: &str = "psnk";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    RecoAodMini,
    AodMini,
}

impl Scenario {
    pub fn tiers(self) -> &'static [Tier] {
        match self {
            Scenario::RecoAodMini => &[Tier::Reco, Tier::Aod, Tier::MiniAod],
            Scenario::AodMini => &[Tier::Aod, Tier::MiniAod],
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Scenario::RecoAodMini => "reco-aod-mini",
            Scenario::AodMini => "aod-mini",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reco-aod-mini" => Ok(Scenario::RecoAodMini),
            "aod-mini" => Ok(Scenario::AodMini),
            other => Err(Error::Config(format!(
                "unknown scenario `{other}` (expected reco-aod-mini or aod-mini)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputMode {
    SingleThreaded,
    SingleThreadedImt,
    ParallelMergerImt,
    /// Touches the products but serializes nothing.
    Dummy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProcessingConfig {
    pub id: u8,
    pub output_mode: OutputMode,
    pub imt: bool,
}

impl ProcessingConfig {
    pub const IDS: [u8; 4] = [1, 2, 3, 4];

    pub fn from_id(id: u8) -> Result<Self> {
        let (output_mode, imt) = match id {
            1 => (OutputMode::SingleThreaded, false),
            2 => (OutputMode::SingleThreadedImt, true),
            3 => (OutputMode::ParallelMergerImt, true),
            4 => (OutputMode::Dummy, false),
            _ => return Err(Error::Config(format!("unknown processing config {id} (expected 1-4)"))),
        };
        Ok(ProcessingConfig { id, output_mode, imt })
    }

    pub fn all() -> Vec<ProcessingConfig> {
        Self::IDS.iter().map(|&i| Self::from_id(i).expect("known id")).collect()
    }

    pub fn writes_output(&self) -> bool {
        self.output_mode != OutputMode::Dummy
    }
}

/// Knobs shared by every run of an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct HarnessSettings {
    pub flush: FlushPolicy,
    pub level: u32,
    /// Merger buffer count (and output concurrency limit) per tier.
    pub reco_buffers: usize,
    pub aod_buffers: usize,
    pub mini_buffers: usize,
    pub merge_threshold_bytes: u64,
    pub merge_threshold_events: Option<u64>,
    pub selection: SelectionPolicy,
    pub sample_period: Option<Duration>,
    /// Defaults to the thread count.
    pub n_streams: Option<usize>,
    pub isolation: bool,
    pub log_provenance: bool,
    pub verify: bool,
}

impl Default for HarnessSettings {
    fn default() -> Self {
        HarnessSettings {
            flush: FlushPolicy {
                basket_target_bytes: 64 * 1024,
                flush_every_n_events: Some(25),
            },
            level: 6,
            reco_buffers: 6,
            aod_buffers: 6,
            mini_buffers: 3,
            merge_threshold_bytes: 16 * 1024 * 1024,
            merge_threshold_events: None,
            selection: SelectionPolicy::FullestFirst,
            sample_period: Some(DEFAULT_SAMPLE_PERIOD),
            n_streams: None,
            isolation: true,
            log_provenance: false,
            verify: true,
        }
    }
}

impl HarnessSettings {
    pub fn buffers_for(&self, tier: Tier) -> usize {
        match tier {
            Tier::Reco => self.reco_buffers,
            Tier::Aod => self.aod_buffers,
            Tier::MiniAod => self.mini_buffers,
        }
    }

    pub fn set_buffers(&mut self, tier: Tier, n: usize) {
        match tier {
            Tier::Reco => self.reco_buffers = n,
            Tier::Aod => self.aod_buffers = n,
            Tier::MiniAod => self.mini_buffers = n,
        }
    }

    pub fn merger_config(&self, tier: Tier) -> MergerConfig {
        MergerConfig {
            buffer_count: self.buffers_for(tier),
            merge_threshold_bytes: self.merge_threshold_bytes,
            merge_threshold_events: self.merge_threshold_events,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.flush.validate()?;
        if self.level > crate::codec::MAX_LEVEL {
            return Err(Error::Config(format!("codec level {} outside 0..=9", self.level)));
        }
        for tier in Tier::ALL {
            self.merger_config(tier).validate()?;
        }
        if self.n_streams == Some(0) {
            return Err(Error::Config("n_streams must be >= 1".into()));
        }
        Ok(())
    }
}

/// Where output containers go.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OutputSink {
    Memory,
    Directory(PathBuf),
}

/// One finished output container.
#[derive(Debug, Clone)]
pub struct OutputFile {
    pub tier: Tier,
    pub path: Option<PathBuf>,
    pub bytes: Option<Vec<u8>>,
}

impl OutputFile {
    pub fn data(&self) -> Result<Cow<'_, [u8]>> {
        match (&self.bytes, &self.path) {
            (Some(b), _) => Ok(Cow::Borrowed(b)),
            (None, Some(p)) => Ok(Cow::Owned(std::fs::read(p)?)),
            (None, None) => Err(Error::Usage("output file has neither bytes nor path".into())),
        }
    }
}

pub fn container_file_name(tier: Tier) -> String {
    format!("{}.{CONTAINER_EXT}", tier.label().to_ascii_lowercase())
}

enum SinkWriter {
    Memory(Vec<u8>),
    File(BufWriter<File>, PathBuf),
}

impl SinkWriter {
    fn open(sink: &OutputSink, tier: Tier) -> Result<Self> {
        match sink {
            OutputSink::Memory => Ok(SinkWriter::Memory(Vec::new())),
            OutputSink::Directory(dir) => {
                std::fs::create_dir_all(dir)?;
                let path = dir.join(container_file_name(tier));
                Ok(SinkWriter::File(BufWriter::new(File::create(&path)?), path))
            }
        }
    }

    fn into_output(self, tier: Tier) -> Result<OutputFile> {
        match self {
            SinkWriter::Memory(bytes) => Ok(OutputFile {
                tier,
                path: None,
                bytes: Some(bytes),
            }),
            SinkWriter::File(mut w, path) => {
                w.flush()?;
                Ok(OutputFile {
                    tier,
                    path: Some(path),
                    bytes: None,
                })
            }
        }
    }
}

impl Write for SinkWriter {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        match self {
            SinkWriter::Memory(v) => v.write(buf),
            SinkWriter::File(w, _) => w.write(buf),
        }
    }

    fn flush(&mut self) -> std::io::Result<()> {
        match self {
            SinkWriter::Memory(_) => Ok(()),
            SinkWriter::File(w, _) => w.flush(),
        }
    }
}

struct Producer {
    generator: Arc<EventGenerator>,
    products: Vec<(String, usize)>,
    cost: u64,
}

impl Module for Producer {
    fn process(&self, event: &EventPrincipal, _ctx: &ModuleContext<'_>) -> Result<()> {
        burn(self.cost);
        for (name, idx) in &self.products {
            event.put(name, self.generator.payload(event.id(), *idx))?;
        }
        Ok(())
    }
}

fn gather<'a>(event: &'a EventPrincipal, products: &'a [String]) -> Result<Vec<(&'a str, &'a [u8])>> {
    products
        .iter()
        .map(|p| Ok((p.as_str(), event.require(p)?)))
        .collect()
}

struct StandardState {
    store: ColumnStore,
    writer: ContainerWriter<SinkWriter>,
}

/// The classic one-at-a-time output module: per-column buffers flushed into
/// a single container writer.
struct StandardOutput {
    tier: Tier,
    products: Vec<String>,
    level: u32,
    state: Mutex<Option<StandardState>>,
    flush_log: Mutex<Vec<(f64, f64)>>,
    output: Mutex<Option<OutputFile>>,
}

impl StandardOutput {
    fn new(tier: Tier, products: Vec<String>, flush: FlushPolicy, level: u32, sink: &OutputSink) -> Result<Self> {
        let store = ColumnStore::new(&products, flush)?;
        let writer = ContainerWriter::new(SinkWriter::open(sink, tier)?)?;
        Ok(StandardOutput {
            tier,
            products,
            level,
            state: Mutex::new(Some(StandardState { store, writer })),
            flush_log: Mutex::new(Vec::new()),
            output: Mutex::new(None),
        })
    }
}

impl Module for StandardOutput {
    fn process(&self, event: &EventPrincipal, ctx: &ModuleContext<'_>) -> Result<()> {
        let products = gather(event, &self.products)?;
        let mut guard = self.state.lock();
        let st = guard
            .as_mut()
            .ok_or_else(|| Error::Lifecycle("output module already closed".into()))?;
        let cut = st.store.append(event.id(), products)?;
        if !cut.is_empty() {
            let t0 = ctx.elapsed_ms();
            for cb in ctx.imt.compress_all(cut, self.level)? {
                st.writer.append(&cb)?;
            }
            self.flush_log.lock().push((t0, ctx.elapsed_ms()));
        }
        Ok(())
    }

    fn end_job(&self, ctx: &ModuleContext<'_>) -> Result<()> {
        let mut st = self
            .state
            .lock()
            .take()
            .ok_or_else(|| Error::Lifecycle("output module closed twice".into()))?;
        let rest = st.store.flush_all();
        if !rest.is_empty() {
            let t0 = ctx.elapsed_ms();
            for cb in ctx.imt.compress_all(rest, self.level)? {
                st.writer.append(&cb)?;
            }
            self.flush_log.lock().push((t0, ctx.elapsed_ms()));
        }
        let sink = st.writer.finish(FileMeta {
            label: self.tier.label().to_string(),
            total_events: st.store.entries(),
        })?;
        *self.output.lock() = Some(sink.into_output(self.tier)?);
        Ok(())
    }
}

/// Parallel output module backed by a buffer merger.
struct MergerOutput {
    tier: Tier,
    products: Vec<String>,
    merger: BufferMerger<SinkWriter>,
    result: Mutex<Option<(MergeStats, OutputFile)>>,
}

impl Module for MergerOutput {
    fn process(&self, event: &EventPrincipal, ctx: &ModuleContext<'_>) -> Result<()> {
        let products = gather(event, &self.products)?;
        let mut buf = self.merger.acquire()?;
        match self.merger.write_event(&mut buf, event.id(), products, ctx.imt) {
            Ok(MergeDecision::Keep) => {
                self.merger.release(buf);
                Ok(())
            }
            Ok(MergeDecision::MergeDue) => self.merger.merge(buf, ctx.imt),
            Err(e) => {
                self.merger.release(buf);
                Err(e)
            }
        }
    }

    fn end_job(&self, ctx: &ModuleContext<'_>) -> Result<()> {
        let (stats, sink) = self.merger.finalize(ctx.imt)?;
        *self.result.lock() = Some((stats, sink.into_output(self.tier)?));
        Ok(())
    }
}

struct DummyOutput {
    products: Vec<String>,
}

impl Module for DummyOutput {
    fn process(&self, event: &EventPrincipal, _ctx: &ModuleContext<'_>) -> Result<()> {
        let mut n = 0usize;
        for p in &self.products {
            n += event.require(p)?.len();
        }
        std::hint::black_box(n);
        Ok(())
    }
}

enum OutputHandle {
    Standard(Arc<StandardOutput>),
    Merger(Arc<MergerOutput>),
    Dummy,
}

/// Producer DAG shared by every configuration: two reconstruction halves,
/// then AOD and MINIAOD makers, with 35/35/20/10 percent of the CPU budget.
fn producer_specs(profile: &WorkloadProfile) -> Vec<(ModuleSpec, Vec<String>)> {
    let reco = profile.product_names(Tier::Reco);
    let aod = profile.product_names(Tier::Aod);
    let mini = profile.product_names(Tier::MiniAod);
    let half = reco.len().div_ceil(2);
    let (tracking, calo) = reco.split_at(half);
    let w = profile.cpu_work_per_event;
    let first = |v: &[String]| v.first().cloned().into_iter().collect::<Vec<_>>();

    let mut aod_inputs = first(tracking);
    aod_inputs.extend(first(calo));
    vec![
        (ModuleSpec::producer("tracking", Vec::<String>::new(), tracking.to_vec(), w * 35 / 100), tracking.to_vec()),
        (ModuleSpec::producer("calo", Vec::<String>::new(), calo.to_vec(), w * 35 / 100), calo.to_vec()),
        (ModuleSpec::producer("aod_maker", aod_inputs, aod.clone(), w * 20 / 100), aod.clone()),
        (ModuleSpec::producer("mini_maker", first(&aod), mini.clone(), w * 10 / 100), mini),
    ]
}

pub fn output_module_name(tier: Tier) -> String {
    format!("out_{}", tier.label().to_ascii_lowercase())
}

/// Output module limit for `tier` under `config`.
pub fn output_limit(config: ProcessingConfig, settings: &HarnessSettings, tier: Tier) -> Option<usize> {
    match config.output_mode {
        OutputMode::SingleThreaded | OutputMode::SingleThreadedImt => Some(1),
        OutputMode::ParallelMergerImt => Some(settings.buffers_for(tier)),
        OutputMode::Dummy => None,
    }
}

/// Module specs for one run, producers first.
pub fn module_specs(
    scenario: Scenario,
    config: ProcessingConfig,
    profile: &WorkloadProfile,
    settings: &HarnessSettings,
) -> Vec<ModuleSpec> {
    let mut specs: Vec<ModuleSpec> = producer_specs(profile).into_iter().map(|(s, _)| s).collect();
    for &tier in scenario.tiers() {
        specs.push(ModuleSpec::output(
            &output_module_name(tier),
            profile.product_names(tier),
            output_limit(config, settings, tier),
        ));
    }
    specs
}

/// One line of a scaling table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub n_threads: usize,
    pub config: u8,
    pub scenario: String,
    pub wall_time_s: f64,
    pub events_per_s: f64,
    pub stall_fraction: f64,
    pub peak_buffer_bytes: u64,
    /// Set when the run failed; the numeric fields are then zero.
    pub error: Option<String>,
}

/// Everything a single run leaves behind.
#[derive(Debug)]
pub struct RunArtifacts {
    pub row: ScalingRow,
    pub report: RunReport,
    pub stall: StallReport,
    pub outputs: Vec<OutputFile>,
    pub merge_stats: Vec<(Tier, MergeStats)>,
    /// Flush windows `(start_ms, end_ms)` of the standard output modules.
    pub flush_log: Vec<(Tier, Vec<(f64, f64)>)>,
    pub verification: Option<VerifyReport>,
}

impl RunArtifacts {
    /// All flush windows across tiers, sorted by start.
    pub fn flush_windows(&self) -> Vec<(f64, f64)> {
        let mut all: Vec<(f64, f64)> = self.flush_log.iter().flat_map(|(_, w)| w.iter().copied()).collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0));
        all
    }

    pub fn output(&self, tier: Tier) -> Option<&OutputFile> {
        self.outputs.iter().find(|o| o.tier == tier)
    }

    /// Writes the stall graph, module summary and merge statistics into `dir`.
    pub fn write_to(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        emit_stall_graph(&self.stall, dir, &format!("{stem}_stall"))?;
        self.report
            .write_csv(BufWriter::new(File::create(dir.join(format!("{stem}_modules.csv")))?))?;
        if !self.merge_stats.is_empty() {
            let mut w = csv::Writer::from_path(dir.join(format!("{stem}_merges.csv")))?;
            w.write_record([
                "tier",
                "merges",
                "merge_due_signals",
                "merge_time_s",
                "events_merged",
                "peak_resident_bytes",
                "tail_events_per_buffer",
            ])?;
            for (tier, s) in &self.merge_stats {
                let tail: Vec<String> = s.tail_events_per_buffer.iter().map(u64::to_string).collect();
                w.write_record([
                    tier.label().to_string(),
                    s.merges.to_string(),
                    s.merge_due_signals.to_string(),
                    format!("{:.6}", s.merge_time_total.as_secs_f64()),
                    s.events_merged.to_string(),
                    s.peak_resident_bytes.to_string(),
                    tail.join(" "),
                ])?;
            }
            w.flush()?;
        }
        Ok(())
    }
}

/// Runs one `(scenario, config, n_threads)` point and verifies its output.
///
/// Fails with [`Error::Verification`] when a module exceeded its limit, an
/// `(event, module)` pair did not run exactly once, or an output file does
/// not hold exactly the events `0..events_total`.
pub fn run_config(
    scenario: Scenario,
    config: ProcessingConfig,
    profile: &WorkloadProfile,
    n_threads: usize,
    settings: &HarnessSettings,
    sink: &OutputSink,
) -> Result<RunArtifacts> {
    settings.validate()?;
    let generator = Arc::new(EventGenerator::new(profile)?);
    let specs = module_specs(scenario, config, profile, settings);
    let schedule = build_schedule(specs, &[])?;
    let options = RunOptions {
        n_streams: settings.n_streams.unwrap_or(n_threads),
        n_threads,
        imt: config.imt,
        isolation: settings.isolation,
        sample_period: settings.sample_period,
        log_provenance: settings.log_provenance,
    };
    let framework = Framework::new(schedule, options)?;

    let mut modules: Vec<Arc<dyn Module>> = Vec::new();
    for (spec, products) in producer_specs(profile) {
        let products = products
            .into_iter()
            .map(|p| {
                let idx = generator.product_index(&p).expect("product from this profile");
                (p, idx)
            })
            .collect();
        modules.push(Arc::new(Producer {
            generator: generator.clone(),
            products,
            cost: spec.cost,
        }));
    }
    let mut handles = Vec::new();
    for &tier in scenario.tiers() {
        let products = profile.product_names(tier);
        let handle = match config.output_mode {
            OutputMode::SingleThreaded | OutputMode::SingleThreadedImt => {
                let m = Arc::new(StandardOutput::new(tier, products, settings.flush, settings.level, sink)?);
                modules.push(m.clone());
                OutputHandle::Standard(m)
            }
            OutputMode::ParallelMergerImt => {
                let merger = BufferMerger::with_policy(
                    tier.label(),
                    &products,
                    settings.flush,
                    settings.merger_config(tier),
                    settings.level,
                    SinkWriter::open(sink, tier)?,
                    settings.selection,
                )?
                .with_occupancy(framework.occupancy().clone());
                let m = Arc::new(MergerOutput {
                    tier,
                    products,
                    merger,
                    result: Mutex::new(None),
                });
                modules.push(m.clone());
                OutputHandle::Merger(m)
            }
            OutputMode::Dummy => {
                modules.push(Arc::new(DummyOutput { products }));
                OutputHandle::Dummy
            }
        };
        handles.push((tier, handle));
    }

    let report = framework.run(Arc::new(IdSource(profile.events_total)), modules)?;
    report.check_limits()?;
    report.check_completeness(profile.events_total)?;

    let mut outputs = Vec::new();
    let mut merge_stats = Vec::new();
    let mut flush_log = Vec::new();
    for (tier, handle) in handles {
        match handle {
            OutputHandle::Standard(m) => {
                let out = m.output.lock().take().expect("end_job ran");
                outputs.push(out);
                flush_log.push((tier, std::mem::take(&mut *m.flush_log.lock())));
            }
            OutputHandle::Merger(m) => {
                let (stats, out) = m.result.lock().take().expect("end_job ran");
                if stats.exclusivity_violations > 0 {
                    return Err(Error::Verification(format!(
                        "{tier}: {} interleaved merges observed",
                        stats.exclusivity_violations
                    )));
                }
                outputs.push(out);
                merge_stats.push((tier, stats));
            }
            OutputHandle::Dummy => {}
        }
    }

    let verification = if settings.verify && config.writes_output() {
        let v = verify_outputs(&outputs, profile.events_total)?;
        if !v.is_ok() {
            return Err(Error::Verification(v.diff()));
        }
        Some(v)
    } else {
        None
    };

    let stall = report.stall_report();
    let wall = report.wall_time.as_secs_f64();
    let row = ScalingRow {
        n_threads,
        config: config.id,
        scenario: scenario.label().to_string(),
        wall_time_s: wall,
        events_per_s: if wall > 0.0 {
            profile.events_total as f64 / wall
        } else {
            0.0
        },
        stall_fraction: stall.stall_fraction,
        peak_buffer_bytes: merge_stats.iter().map(|(_, s)| s.peak_resident_bytes as u64).sum(),
        error: None,
    };
    Ok(RunArtifacts {
        row,
        report,
        stall,
        outputs,
        merge_stats,
        flush_log,
        verification,
    })
}

/// Work units [`burn`] gets through per second on this host (best of three).
pub fn burn_rate() -> f64 {
    let units = 2_000;
    (0..3)
        .map(|_| {
            let t = Instant::now();
            burn(units);
            units as f64 / t.elapsed().as_secs_f64().max(1e-9)
        })
        .fold(0.0, f64::max)
}

/// Single-threaded serialize-and-compress time per event for `scenario`,
/// measured on the first `sample_events` events of `profile`.
pub fn measure_output_cost(
    scenario: Scenario,
    profile: &WorkloadProfile,
    settings: &HarnessSettings,
    sample_events: u64,
) -> Result<Duration> {
    let generator = EventGenerator::new(profile)?;
    let sample_events = sample_events.max(1);
    let mut total = Duration::ZERO;
    for &tier in scenario.tiers() {
        let idx = generator.tier_products(tier);
        let names: Vec<String> = idx.iter().map(|&i| generator.product_name(i).to_string()).collect();
        let payloads: Vec<Vec<Vec<u8>>> = (0..sample_events)
            .map(|id| idx.iter().map(|&i| generator.payload(id, i)).collect())
            .collect();
        let mut store = ColumnStore::new(&names, settings.flush)?;
        let t = Instant::now();
        let mut baskets = Vec::new();
        for (id, event) in payloads.iter().enumerate() {
            let products = names.iter().map(String::as_str).zip(event.iter().map(Vec::as_slice));
            baskets.extend(store.append(id as u64, products)?);
        }
        baskets.extend(store.flush_all());
        Imt::disabled().compress_all(baskets, settings.level)?;
        total += t.elapsed();
    }
    Ok(total / sample_events as u32)
}

/// CPU work per event such that processing takes about `factor` times the
/// single-threaded output cost.
pub fn calibrate_cpu_work(
    scenario: Scenario,
    profile: &WorkloadProfile,
    settings: &HarnessSettings,
    factor: f64,
) -> Result<u64> {
    let cost = measure_output_cost(scenario, profile, settings, 16)?;
    Ok((cost.as_secs_f64() * factor * burn_rate()).round().max(1.0) as u64)
}

/// Copy of `profile` with `cpu_work_per_event` calibrated when it is zero.
pub fn prepare_profile(
    scenario: Scenario,
    profile: &WorkloadProfile,
    settings: &HarnessSettings,
) -> Result<WorkloadProfile> {
    let mut p = profile.clone();
    if p.cpu_work_per_event == 0 {
        p.cpu_work_per_event = calibrate_cpu_work(scenario, profile, settings, 4.0)?;
        log::info!("calibrated cpu_work_per_event = {}", p.cpu_work_per_event);
    }
    Ok(p)
}

/// Runs every `(config, n_threads)` point in order. A failing point is
/// recorded in its row and the sweep carries on.
pub fn sweep(
    scenario: Scenario,
    configs: &[ProcessingConfig],
    threads: &[usize],
    profile: &WorkloadProfile,
    settings: &HarnessSettings,
    out_dir: Option<&Path>,
) -> Result<Vec<ScalingRow>> {
    let mut rows = Vec::new();
    for &n in threads {
        for &config in configs {
            let stem = format!("c{}_t{n}", config.id);
            let sink = match out_dir {
                Some(d) => OutputSink::Directory(d.join(&stem)),
                None => OutputSink::Memory,
            };
            let row = match run_config(scenario, config, profile, n, settings, &sink) {
                Ok(art) => {
                    if let Some(d) = out_dir {
                        art.write_to(&d.join(&stem), "run")?;
                    }
                    log::info!(
                        "config {} threads {n}: {:.3} s, {:.2} ev/s, stall {:.3}",
                        config.id,
                        art.row.wall_time_s,
                        art.row.events_per_s,
                        art.row.stall_fraction
                    );
                    art.row
                }
                Err(e) => {
                    log::warn!("config {} threads {n} failed: {e}", config.id);
                    ScalingRow {
                        n_threads: n,
                        config: config.id,
                        scenario: scenario.label().to_string(),
                        wall_time_s: 0.0,
                        events_per_s: 0.0,
                        stall_fraction: 0.0,
                        peak_buffer_bytes: 0,
                        error: Some(e.to_string()),
                    }
                }
            };
            rows.push(row);
        }
    }
    if let Some(d) = out_dir {
        write_scaling_csv(&rows, File::create(d.join("scaling.csv"))?)?;
        write_scaling_svg(&rows, File::create(d.join("scaling.svg"))?)?;
    }
    Ok(rows)
}

pub fn write_scaling_csv<W: Write>(rows: &[ScalingRow], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scaling_csv<R: std::io::Read>(source: R) -> Result<Vec<ScalingRow>> {
    csv::Reader::from_reader(source)
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

const CHART_W: f64 = 800.0;
const CHART_H: f64 = 500.0;
const CHART_MARGIN: f64 = 60.0;
const CURVE_COLORS: [&str; 4] = ["#1565c0", "#2e7d32", "#c62828", "#6a1b9a"];

/// Throughput versus threads, one polyline per config. Failed rows are skipped.
pub fn write_scaling_svg<W: Write>(rows: &[ScalingRow], mut sink: W) -> Result<()> {
    let ok: Vec<&ScalingRow> = rows.iter().filter(|r| r.error.is_none()).collect();
    let max_threads = ok.iter().map(|r| r.n_threads).max().unwrap_or(1).max(1) as f64;
    let max_rate = ok.iter().map(|r| r.events_per_s).fold(0.0, f64::max).max(1e-9) * 1.1;
    let (pw, ph) = (CHART_W - 2.0 * CHART_MARGIN, CHART_H - 2.0 * CHART_MARGIN);
    let x = |t: f64| CHART_MARGIN + t / max_threads * pw;
    let y = |v: f64| CHART_H - CHART_MARGIN - v / max_rate * ph;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {CHART_W} {CHART_H}" width="{CHART_W}" height="{CHART_H}">"#
    );
    let _ = writeln!(svg, r##"<rect width="{CHART_W}" height="{CHART_H}" fill="#fff"/>"##);
    let (x0, y0) = (CHART_MARGIN, CHART_H - CHART_MARGIN);
    let _ = writeln!(
        svg,
        r##"<path d="M{x0},{CHART_MARGIN} V{y0} H{}" stroke="#000" fill="none"/>"##,
        CHART_W - CHART_MARGIN
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-size="14" font-family="sans-serif" text-anchor="middle">threads</text>"#,
        CHART_W / 2.0,
        CHART_H - 15.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="15" y="{}" font-size="14" font-family="sans-serif" transform="rotate(-90 15 {})" text-anchor="middle">events/s</text>"#,
        CHART_H / 2.0,
        CHART_H / 2.0
    );
    let mut threads: Vec<usize> = ok.iter().map(|r| r.n_threads).collect();
    threads.sort_unstable();
    threads.dedup();
    for t in &threads {
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{}" font-size="11" font-family="sans-serif" text-anchor="middle">{t}</text>"#,
            x(*t as f64),
            y0 + 16.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{:.1}" font-size="11" font-family="sans-serif" text-anchor="end">{:.1}</text>"#,
        x0 - 4.0,
        y(max_rate / 1.1) + 4.0,
        max_rate / 1.1
    );

    let mut configs: Vec<u8> = ok.iter().map(|r| r.config).collect();
    configs.sort_unstable();
    configs.dedup();
    for (k, c) in configs.iter().enumerate() {
        let color = CURVE_COLORS[k % CURVE_COLORS.len()];
        let mut pts: Vec<(f64, f64)> = ok
            .iter()
            .filter(|r| r.config == *c)
            .map(|r| (r.n_threads as f64, r.events_per_s))
            .collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let line: Vec<String> = pts.iter().map(|&(t, v)| format!("{:.2},{:.2}", x(t), y(v))).collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            line.join(" ")
        );
        for &(t, v) in &pts {
            let _ = writeln!(svg, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, x(t), y(v));
        }
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="12" font-family="sans-serif" fill="{color}">config {c}</text>"#,
            CHART_W - CHART_MARGIN - 70.0,
            CHART_MARGIN + 16.0 * (k as f64 + 1.0)
        );
    }
    svg.push_str("</svg>\n");
    sink.write_all(svg.as_bytes())?;
    Ok(())
}

/// Verification outcome for one container.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FileVerdict {
    pub label: String,
    pub baskets_checked: usize,
    pub events_found: u64,
    pub missing: Vec<u64>,
    pub duplicates: Vec<u64>,
    /// Ids at or beyond the expected count.
    pub unexpected: Vec<u64>,
    pub column_errors: Vec<String>,
}

impl FileVerdict {
    pub fn is_ok(&self) -> bool {
        self.missing.is_empty()
            && self.duplicates.is_empty()
            && self.unexpected.is_empty()
            && self.column_errors.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VerifyReport {
    pub files: Vec<FileVerdict>,
}

impl VerifyReport {
    pub fn is_ok(&self) -> bool {
        self.files.iter().all(FileVerdict::is_ok)
    }

    /// Human-readable list of every problem found.
    pub fn diff(&self) -> String {
        let mut out = String::new();
        for f in self.files.iter().filter(|f| !f.is_ok()) {
            let _ = writeln!(out, "{}:", f.label);
            if !f.missing.is_empty() {
                let _ = writeln!(out, "  missing event ids: {}", id_list(&f.missing));
            }
            if !f.duplicates.is_empty() {
                let _ = writeln!(out, "  duplicate event ids: {}", id_list(&f.duplicates));
            }
            if !f.unexpected.is_empty() {
                let _ = writeln!(out, "  unexpected event ids: {}", id_list(&f.unexpected));
            }
            for e in &f.column_errors {
                let _ = writeln!(out, "  {e}");
            }
        }
        out
    }
}

fn id_list(ids: &[u64]) -> String {
    const SHOWN: usize = 20;
    let head: Vec<String> = ids.iter().take(SHOWN).map(u64::to_string).collect();
    if ids.len() > SHOWN {
        format!("{} ... ({} total)", head.join(", "), ids.len())
    } else {
        head.join(", ")
    }
}

/// Checks one container: every basket decompresses and passes its checksum,
/// every column covers entries `0..total_events` without gaps, and the event
/// ids are exactly `0..expected`.
pub fn verify_container(label: &str, bytes: &[u8], expected: u64) -> FileVerdict {
    let mut v = FileVerdict {
        label: label.to_string(),
        ..FileVerdict::default()
    };
    let (baskets, trailer) = match read_container(bytes) {
        Ok(x) => x,
        Err(e) => {
            v.column_errors.push(format!("container unreadable: {e}"));
            return v;
        }
    };
    let total = trailer.meta.total_events;
    for col in &trailer.columns {
        let mut spans: Vec<(u64, u64)> = col
            .baskets
            .iter()
            .map(|b| (b.first_entry, b.first_entry + u64::from(b.entry_count)))
            .collect();
        spans.sort_unstable();
        let mut next = 0;
        for (a, b) in spans {
            if a != next {
                v.column_errors
                    .push(format!("column `{}` has a gap or overlap at entry {next} (next basket starts at {a})", col.name));
            }
            next = b;
        }
        if next != total {
            let covered: u64 = col.baskets.iter().map(|b| u64::from(b.entry_count)).sum();
            v.column_errors
                .push(format!("column `{}` covers {covered} of {total} entries", col.name));
        }
    }
    if total > 0 && trailer.column(EVENT_ID_COLUMN).is_none() {
        v.column_errors.push(format!("column `{EVENT_ID_COLUMN}` is absent"));
    }

    let mut counts = vec![0u32; expected as usize];
    for cb in &baskets {
        v.baskets_checked += 1;
        let basket = match decompress_basket(cb) {
            Ok(b) => b,
            Err(e) => {
                v.column_errors.push(format!("column `{}`: {e}", cb.header.column));
                continue;
            }
        };
        if &*basket.column != EVENT_ID_COLUMN {
            continue;
        }
        for entry in basket.entries() {
            let Ok(raw) = <[u8; 8]>::try_from(entry) else {
                v.column_errors
                    .push(format!("column `{EVENT_ID_COLUMN}` holds a {}-byte entry", entry.len()));
                continue;
            };
            let id = u64::from_le_bytes(raw);
            v.events_found += 1;
            match counts.get_mut(id as usize) {
                Some(c) => *c += 1,
                None => v.unexpected.push(id),
            }
        }
    }
    for (id, &c) in counts.iter().enumerate() {
        match c {
            0 => v.missing.push(id as u64),
            1 => {}
            _ => v.duplicates.push(id as u64),
        }
    }
    v.unexpected.sort_unstable();
    v
}

pub fn verify_outputs(files: &[OutputFile], expected: u64) -> Result<VerifyReport> {
    let mut report = VerifyReport::default();
    for f in files {
        let data = f.data()?;
        let label = match &f.path {
            Some(p) => p.display().to_string(),
            None => f.tier.label().to_string(),
        };
        report.files.push(verify_container(&label, &data, expected));
    }
    Ok(report)
}

/// Verifies every container file in `dir`.
pub fn verify_dir(dir: &Path, expected: u64) -> Result<VerifyReport> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == CONTAINER_EXT))
        .collect();
    paths.sort();
    let mut report = VerifyReport::default();
    for p in paths {
        let bytes = std::fs::read(&p)?;
        report.files.push(verify_container(&p.display().to_string(), &bytes, expected));
    }
    Ok(report)
}

/// Offset of the first differing byte, or `None` when identical.
pub fn byte_compare(a: &[u8], b: &[u8]) -> Option<usize> {
    match a.iter().zip(b).position(|(x, y)| x != y) {
        Some(i) => Some(i),
        None if a.len() != b.len() => Some(a.len().min(b.len())),
        None => None,
    }
}
