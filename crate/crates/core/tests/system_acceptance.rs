//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Thread-count-dependent criteria run at `max_host_threads(8)`, which
//! oversubscribes hosts with fewer than eight cores.

mod common;

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use parasink_core::codec::{compress_basket, Basket};
use parasink_core::harness::{byte_compare, prepare_profile, OutputMode};
use parasink_core::merger::QueueItem;
use parasink_core::stall::flush_gap_correlation;
use parasink_core::{
    compress_all, max_host_threads, run_config, CompressionJob, Executor, FlushPolicy, HarnessSettings, MergeQueue,
    OutputSink, ProcessingConfig, RunArtifacts, ScalingRow, Scenario, SelectionPolicy, Tier, WorkloadProfile,
    MAX_LEVEL,
};

use common::{isolation_trial, small_profile};

const COMPLETENESS_RUNS: usize = 200;
const COMPLETENESS_BUDGET: Duration = Duration::from_secs(600);
const BYTE_EQUIV_SEEDS: u64 = 20;
const IMT_JOBS: usize = 1000;
const ISOLATION_TRIALS: u64 = 100;
const REDUCTION_RATIO: f64 = 0.75;
const RECO_RUN_BUDGET: Duration = Duration::from_secs(120);
const ORDER_MARGIN: f64 = 0.05;
const LOW_THREAD_SPREAD: f64 = 0.10;
const FLUSH_CORRELATION: f64 = 0.5;
const RECO_EVENTS: u64 = 200;
const RECO_EVENTS_LOW_THREADS: u64 = 100;
const PAPER_LIMIT_THREADS: usize = 16;

struct Outcome {
    id: u8,
    name: &'static str,
    pass: bool,
    detail: String,
}

/// Checks every run of this target against its own module limits.
#[derive(Default)]
struct LimitLedger {
    runs: usize,
    violations: Vec<String>,
}

impl LimitLedger {
    fn record(&mut self, art: &RunArtifacts) {
        self.runs += 1;
        let r = &art.report;
        for (m, name) in r.module_names.iter().enumerate() {
            let seen = r.max_overlap(m);
            if let Some(limit) = r.limits[m].filter(|&l| seen > l) {
                self.violations.push(format!(
                    "{name} reached {seen} > {limit} (config {}, {} threads)",
                    art.row.config, art.row.n_threads
                ));
            }
        }
    }
}

fn criterion_1(threads: usize, ledger: &mut LimitLedger) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0001);
    let started = Instant::now();
    let mut failures = Vec::new();
    for run in 0..COMPLETENESS_RUNS {
        let config = ProcessingConfig::from_id(rng.gen_range(1..=3)).unwrap();
        let n_threads = rng.gen_range(1..=threads);
        let events = rng.gen_range(0..=60);
        let profile = small_profile(events, rng.gen());
        let mut settings = HarnessSettings {
            flush: FlushPolicy {
                basket_target_bytes: rng.gen_range(256..=8192),
                flush_every_n_events: if rng.gen_bool(0.5) { Some(rng.gen_range(1..=16)) } else { None },
            },
            level: rng.gen_range(0..=MAX_LEVEL),
            merge_threshold_bytes: rng.gen_range(1024..=64 * 1024),
            merge_threshold_events: if rng.gen_bool(0.5) { Some(rng.gen_range(1..=20)) } else { None },
            selection: if rng.gen_bool(0.8) { SelectionPolicy::FullestFirst } else { SelectionPolicy::RoundRobin },
            sample_period: None,
            ..HarnessSettings::default()
        };
        for tier in Tier::ALL {
            settings.set_buffers(tier, rng.gen_range(1..=8));
        }
        match run_config(Scenario::RecoAodMini, config, &profile, n_threads, &settings, &OutputSink::Memory) {
            Ok(art) => {
                ledger.record(&art);
                let v = art.verification.expect("output configs are verified");
                let ok = v.files.len() == 3 && v.is_ok() && v.files.iter().all(|f| f.events_found == events);
                if !ok {
                    failures.push(format!("run {run}: {}", v.diff()));
                }
            }
            Err(e) => failures.push(format!("run {run} (config {}, {n_threads} threads): {e}", config.id)),
        }
    }
    let elapsed = started.elapsed();
    Outcome {
        id: 1,
        name: "completeness property",
        pass: failures.is_empty() && elapsed < COMPLETENESS_BUDGET,
        detail: format!(
            "{COMPLETENESS_RUNS} runs, {} failures, {:.1} s (budget {} s){}",
            failures.len(),
            elapsed.as_secs_f64(),
            COMPLETENESS_BUDGET.as_secs(),
            failures.first().map(|f| format!("; first: {f}")).unwrap_or_default()
        ),
    }
}

fn criterion_2(ledger: &mut LimitLedger) -> Outcome {
    let mut mismatches = Vec::new();
    let mut merges = 0;
    for seed in 0..BYTE_EQUIV_SEEDS {
        let profile = small_profile(90, seed);
        let mut s = HarnessSettings {
            flush: FlushPolicy {
                basket_target_bytes: 4096,
                flush_every_n_events: Some(10),
            },
            merge_threshold_bytes: u64::MAX,
            merge_threshold_events: Some(20),
            n_streams: Some(1),
            sample_period: None,
            ..HarnessSettings::default()
        };
        for tier in Tier::ALL {
            s.set_buffers(tier, 1);
        }
        let standard = ProcessingConfig::from_id(1).unwrap();
        let merger = ProcessingConfig::from_id(3).unwrap();
        let a = run_config(Scenario::RecoAodMini, standard, &profile, 4, &s, &OutputSink::Memory);
        let b = run_config(Scenario::RecoAodMini, merger, &profile, 4, &s, &OutputSink::Memory);
        let (a, b) = match (a, b) {
            (Ok(a), Ok(b)) => (a, b),
            (a, b) => {
                mismatches.push(format!("seed {seed}: run failed: {:?} / {:?}", a.err(), b.err()));
                continue;
            }
        };
        ledger.record(&a);
        ledger.record(&b);
        merges += b.merge_stats.iter().map(|(_, s)| s.merges).sum::<u64>();
        for tier in Tier::ALL {
            let x = a.output(tier).unwrap().data().unwrap().into_owned();
            let y = b.output(tier).unwrap().data().unwrap().into_owned();
            if let Some(off) = byte_compare(&x, &y) {
                mismatches.push(format!("seed {seed} {tier}: first difference at byte {off}"));
            }
        }
    }
    Outcome {
        id: 2,
        name: "byte-equivalence oracle",
        pass: mismatches.is_empty(),
        detail: format!(
            "{BYTE_EQUIV_SEEDS} seeds x 3 tiers, {} mismatches, {merges} merges exercised{}",
            mismatches.len(),
            mismatches.first().map(|m| format!("; first: {m}")).unwrap_or_default()
        ),
    }
}

fn criterion_3(threads: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0003);
    let pools: Vec<_> = (1..=threads).map(Executor::new).collect();
    let mut bad = 0;
    for job in 0..IMT_JOBS {
        let n = rng.gen_range(0..24);
        let level = rng.gen_range(0..=MAX_LEVEL);
        let baskets: Vec<Basket> = (0..n)
            .map(|i| {
                let len = rng.gen_range(0..4096);
                let c = rng.gen_range(0.0..=1.0);
                let raw: Vec<u8> = (0..len)
                    .map(|j| if (j as f64) < len as f64 * c { (j % 17) as u8 } else { rng.gen() })
                    .collect();
                Basket::single(&format!("col{i}"), job as u64, raw)
            })
            .collect();
        let expect: Vec<_> = baskets.iter().map(|b| compress_basket(b, level).unwrap()).collect();
        let pool = &pools[job % pools.len()];
        let got = compress_all(
            CompressionJob {
                baskets,
                level,
                isolation: rng.gen(),
            },
            pool,
        );
        if got.ok().as_ref() != Some(&expect) {
            bad += 1;
        }
    }
    Outcome {
        id: 3,
        name: "IMT result equivalence",
        pass: bad == 0,
        detail: format!("{IMT_JOBS} jobs over pool sizes 1..={threads}, {bad} mismatches"),
    }
}

fn criterion_4() -> Outcome {
    let isolated: u64 = (0..ISOLATION_TRIALS).map(|s| isolation_trial(true, s).foreign()).sum();
    let open_hits = (0..ISOLATION_TRIALS)
        .filter(|&s| isolation_trial(false, s).foreign() > 0)
        .count();
    Outcome {
        id: 4,
        name: "isolation contract",
        pass: isolated == 0 && open_hits >= 1,
        detail: format!(
            "isolation on: {isolated} foreign executions in {ISOLATION_TRIALS} trials; \
             isolation off: {open_hits}/{ISOLATION_TRIALS} trials with a foreign execution"
        ),
    }
}

#[derive(Debug, Clone)]
struct ModelBuf(usize, u64);

impl QueueItem for ModelBuf {
    fn id(&self) -> usize {
        self.0
    }
    fn events_stored(&self) -> u64 {
        self.1
    }
}

#[derive(Clone, Copy, Debug)]
enum Step {
    Acquire,
    /// Release the k-th checked-out buffer after writing one event.
    Write(usize),
    /// Release the k-th checked-out buffer after a merge.
    Merge(usize),
}

fn criterion_5() -> Outcome {
    const BUFFERS: usize = 3;
    const STEPS: usize = 6;
    let alphabet: Vec<Step> = std::iter::once(Step::Acquire)
        .chain((0..BUFFERS).map(Step::Write))
        .chain((0..BUFFERS).map(Step::Merge))
        .collect();
    let mut sequences = 0u64;
    let mut pops = 0u64;
    let mut violations = Vec::new();
    for start in 0..27u64 {
        let initial: Vec<u64> = (0..BUFFERS as u32).map(|i| start / 3u64.pow(i) % 3).collect();
        let mut idx = [0usize; STEPS];
        'seq: loop {
            let seq: Vec<Step> = idx.iter().map(|&i| alphabet[i]).collect();
            // skip sequences that release buffers nobody holds
            let q = MergeQueue::new(
                initial.iter().enumerate().map(|(i, &e)| ModelBuf(i, e)).collect(),
                SelectionPolicy::FullestFirst,
            );
            let mut model: Vec<(u64, bool)> = initial.iter().map(|&e| (e, false)).collect();
            let mut held: Vec<ModelBuf> = Vec::new();
            let mut valid = true;
            for step in &seq {
                match *step {
                    Step::Acquire => {
                        let expect = model
                            .iter()
                            .enumerate()
                            .filter(|(_, (_, out))| !out)
                            .max_by(|a, b| a.1 .0.cmp(&b.1 .0).then(b.0.cmp(&a.0)))
                            .map(|(i, _)| i);
                        let got = q.try_acquire().unwrap();
                        pops += 1;
                        if got.as_ref().map(|b| b.0) != expect {
                            violations.push(format!("start {initial:?} seq {seq:?}: got {got:?}, expected {expect:?}"));
                        }
                        if let Some(b) = got {
                            model[b.0].1 = true;
                            held.push(b);
                        }
                    }
                    Step::Write(k) | Step::Merge(k) => {
                        if k >= held.len() {
                            valid = false;
                            break;
                        }
                        let mut b = held.remove(k);
                        b.1 = if matches!(step, Step::Write(_)) { b.1 + 1 } else { 0 };
                        model[b.0] = (b.1, false);
                        q.release(b);
                    }
                }
            }
            if valid {
                sequences += 1;
            }
            // next sequence
            for pos in (0..STEPS).rev() {
                idx[pos] += 1;
                if idx[pos] < alphabet.len() {
                    continue 'seq;
                }
                idx[pos] = 0;
            }
            break;
        }
    }
    Outcome {
        id: 5,
        name: "fullest-first model",
        pass: violations.is_empty() && sequences > 0,
        detail: format!(
            "{sequences} valid interleavings of {BUFFERS} buffers x {STEPS} steps from 27 start states, \
             {pops} pops checked, {} violations{}",
            violations.len(),
            violations.first().map(|v| format!("; first: {v}")).unwrap_or_default()
        ),
    }
}

fn row_line(r: &ScalingRow) -> String {
    format!(
        "config {} @ {} threads: {:.2} s, {:.2} ev/s, stall {:.3}",
        r.config, r.n_threads, r.wall_time_s, r.events_per_s, r.stall_fraction
    )
}

fn main() {
    let threads = max_host_threads(8);
    let cores = max_host_threads(1);
    println!("acceptance: max host threads = {threads} (available parallelism {cores})");
    let mut ledger = LimitLedger::default();
    let mut outcomes = Vec::new();

    let report = |o: &Outcome| {
        println!(
            "criterion {} [{}]: {} - {}",
            o.id,
            o.name,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    };

    let o = criterion_1(threads, &mut ledger);
    report(&o);
    outcomes.push(o);
    let o = criterion_2(&mut ledger);
    report(&o);
    outcomes.push(o);
    let o = criterion_3(threads);
    report(&o);
    outcomes.push(o);
    let o = criterion_4();
    report(&o);
    outcomes.push(o);
    let o = criterion_5();
    report(&o);
    outcomes.push(o);

    // Criteria 6-8 share one calibrated reco-analogue profile.
    let settings = HarnessSettings::default();
    let base = WorkloadProfile::reco_analogue(RECO_EVENTS, 2024);
    let profile = prepare_profile(Scenario::RecoAodMini, &base, &settings).expect("calibration");
    println!("  reco-analogue: {RECO_EVENTS} events, cpu_work_per_event = {}", profile.cpu_work_per_event);
    let mut high: BTreeMap<u8, RunArtifacts> = BTreeMap::new();
    let mut run_errors = Vec::new();
    for config in ProcessingConfig::all() {
        match run_config(Scenario::RecoAodMini, config, &profile, threads, &settings, &OutputSink::Memory) {
            Ok(mut art) => {
                println!("  {}", row_line(&art.row));
                ledger.record(&art);
                // keep the flush log and report, drop the container bytes
                art.outputs.clear();
                high.insert(config.id, art);
            }
            Err(e) => run_errors.push(format!("config {}: {e}", config.id)),
        }
    }
    let mut low_profile = profile.clone();
    low_profile.events_total = RECO_EVENTS_LOW_THREADS;
    let mut low: BTreeMap<u8, ScalingRow> = BTreeMap::new();
    for id in [1, 2, 3] {
        let config = ProcessingConfig::from_id(id).unwrap();
        match run_config(Scenario::RecoAodMini, config, &low_profile, 2, &settings, &OutputSink::Memory) {
            Ok(art) => {
                println!("  {}", row_line(&art.row));
                ledger.record(&art);
                low.insert(id, art.row);
            }
            Err(e) => run_errors.push(format!("config {id} @ 2 threads: {e}")),
        }
    }

    let wall = |id: u8| high.get(&id).map(|a| a.row.wall_time_s);
    let rate = |id: u8| high.get(&id).map(|a| a.row.events_per_s);

    let o = match (wall(1), wall(3)) {
        (Some(w1), Some(w3)) => {
            let ratio = w3 / w1;
            let slowest = high.values().map(|a| a.row.wall_time_s).fold(0.0, f64::max);
            Outcome {
                id: 6,
                name: "one-third-reduction analogue",
                pass: ratio <= REDUCTION_RATIO && threads >= 8 && slowest <= RECO_RUN_BUDGET.as_secs_f64(),
                detail: format!(
                    "config 3 / config 1 wall time = {w3:.2} s / {w1:.2} s = {ratio:.3} (need <= {REDUCTION_RATIO}) \
                     at {threads} threads on {cores} core(s); slowest run {slowest:.1} s (budget {} s)",
                    RECO_RUN_BUDGET.as_secs()
                ),
            }
        }
        _ => Outcome {
            id: 6,
            name: "one-third-reduction analogue",
            pass: false,
            detail: format!("runs failed: {run_errors:?}"),
        },
    };
    report(&o);
    outcomes.push(o);

    let o = match (rate(1), rate(2), rate(3), rate(4)) {
        (Some(r1), Some(r2), Some(r3), Some(r4)) => {
            let m = 1.0 - ORDER_MARGIN;
            let ordered = r4 >= m * r3 && r3 >= m * r2 && r2 >= m * r1;
            let lows: Vec<f64> = low.values().map(|r| r.events_per_s).collect();
            let (lo, hi) = lows.iter().fold((f64::MAX, 0.0f64), |(a, b), &x| (a.min(x), b.max(x)));
            let spread = if lows.len() == 3 { (hi - lo) / hi } else { f64::INFINITY };
            Outcome {
                id: 7,
                name: "scaling shape",
                pass: ordered && spread <= LOW_THREAD_SPREAD,
                detail: format!(
                    "{threads} threads ev/s: dummy {r4:.2}, c3 {r3:.2}, c2 {r2:.2}, c1 {r1:.2} \
                     (ordered within {:.0}%: {ordered}); 2 threads c1-c3 spread {:.1}% (need <= {:.0}%)",
                    ORDER_MARGIN * 100.0,
                    spread * 100.0,
                    LOW_THREAD_SPREAD * 100.0
                ),
            }
        }
        _ => Outcome {
            id: 7,
            name: "scaling shape",
            pass: false,
            detail: format!("runs failed: {run_errors:?}"),
        },
    };
    report(&o);
    outcomes.push(o);

    let o = match (high.get(&1), high.get(&3)) {
        (Some(c1), Some(c3)) => {
            let windows = c1.flush_windows();
            let corr = flush_gap_correlation(&c1.stall, &windows);
            let pass = c3.stall.stall_fraction < c1.stall.stall_fraction && corr.is_some_and(|c| c > FLUSH_CORRELATION);
            Outcome {
                id: 8,
                name: "stall-fraction reduction",
                pass,
                detail: format!(
                    "stall c3 {:.3} vs c1 {:.3}; c1 gap/flush correlation {} over {} samples and {} flushes (need > {FLUSH_CORRELATION})",
                    c3.stall.stall_fraction,
                    c1.stall.stall_fraction,
                    corr.map_or("undefined".to_string(), |c| format!("{c:.3}")),
                    c1.stall.samples.len(),
                    windows.len()
                ),
            }
        }
        _ => Outcome {
            id: 8,
            name: "stall-fraction reduction",
            pass: false,
            detail: format!("runs failed: {run_errors:?}"),
        },
    };
    report(&o);
    outcomes.push(o);

    // The paper's limits {6,6,3} with the merger at 16 threads.
    let mut paper_profile = profile.clone();
    paper_profile.events_total = RECO_EVENTS_LOW_THREADS;
    let merger = ProcessingConfig::from_id(3).unwrap();
    assert_eq!(merger.output_mode, OutputMode::ParallelMergerImt);
    let paper_threads = PAPER_LIMIT_THREADS.max(threads);
    let paper = run_config(Scenario::RecoAodMini, merger, &paper_profile, paper_threads, &settings, &OutputSink::Memory);
    let paper_detail = match &paper {
        Ok(art) => {
            ledger.record(art);
            let ov: Vec<String> = ["out_reco", "out_aod", "out_miniaod"]
                .iter()
                .map(|n| {
                    let m = art.report.module_names.iter().position(|x| x == n).unwrap();
                    format!("{n} {}/{}", art.report.max_overlap(m), art.report.limits[m].unwrap())
                })
                .collect();
            format!("{{6,6,3}} run at {paper_threads} threads: {}", ov.join(", "))
        }
        Err(e) => format!("{{6,6,3}} run failed: {e}"),
    };
    let violations = &ledger.violations;
    let o = Outcome {
        id: 9,
        name: "concurrency-limit safety",
        pass: paper.is_ok() && violations.is_empty() && run_errors.is_empty(),
        detail: format!(
            "{} runs checked, {} violations; {paper_detail}{}",
            ledger.runs,
            violations.len(),
            violations.first().map(|v| format!("; first: {v}")).unwrap_or_default()
        ),
    };
    report(&o);
    outcomes.push(o);

    let failed: Vec<u8> = outcomes.iter().filter(|o| !o.pass).map(|o| o.id).collect();
    println!(
        "acceptance: {} of {} criteria passed{}",
        outcomes.len() - failed.len(),
        outcomes.len(),
        if failed.is_empty() { String::new() } else { format!("; failed: {failed:?}") }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
