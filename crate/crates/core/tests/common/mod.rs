#![allow(dead_code)]

use std::sync::Arc;

use parasink_core::codec::Basket;
use parasink_core::event_model::{ProductSchema, Tier, WorkloadProfile};
use parasink_core::executor::ROOT_SCOPE;
use parasink_core::scheduler::{burn, EventPrincipal, IdSource, Module, ModuleContext};
use parasink_core::{build_schedule, Framework, ModuleSpec, RunOptions, RunReport};

/// A three-tier profile small enough for hundreds of runs.
pub fn small_profile(events: u64, seed: u64) -> WorkloadProfile {
    let mut schemas = Vec::new();
    for (tier, prefix, n, mean) in [(Tier::Reco, "r", 6, 400), (Tier::Aod, "a", 4, 160), (Tier::MiniAod, "m", 3, 48)] {
        for i in 0..n {
            schemas.push(ProductSchema::new(format!("{prefix}{i}"), tier, mean, 0.5, 0.6));
        }
    }
    WorkloadProfile {
        schemas,
        events_total: events,
        seed,
        cpu_work_per_event: 40,
    }
}

pub struct IsolationTrial {
    pub imt_foreign: u64,
    pub nested_foreign: usize,
    pub report: RunReport,
}

impl IsolationTrial {
    pub fn foreign(&self) -> u64 {
        self.imt_foreign + self.nested_foreign as u64
    }
}

/// Producers feed an output module that compresses through IMT on the shared
/// pool. Before each job the output module injects a long foreign task into
/// the global queue; the trial counts foreign tasks the output thread ran
/// while waiting for its own job.
pub fn isolation_trial(isolation: bool, seed: u64) -> IsolationTrial {
    let specs = vec![
        ModuleSpec::producer("producer", Vec::<String>::new(), ["x"], 0),
        ModuleSpec::output("out", ["x"], Some(1)),
    ];
    let schedule = build_schedule(specs, &[]).unwrap();
    let options = RunOptions {
        n_streams: 2,
        n_threads: 4,
        imt: true,
        isolation,
        sample_period: None,
        log_provenance: true,
    };
    let fw = Framework::new(schedule, options).unwrap();
    let producer: Arc<dyn Module> = Arc::new(move |ev: &EventPrincipal, _: &ModuleContext<'_>| {
        burn(50 + (ev.id() * 37 + seed) % 100);
        ev.put("x", ev.id().to_le_bytes().to_vec())
    });
    let foreign: Arc<str> = Arc::from("foreign");
    let out: Arc<dyn Module> = Arc::new(move |ev: &EventPrincipal, ctx: &ModuleContext<'_>| {
        ctx.executor.inject(ROOT_SCOPE, &foreign, || {
            burn(3000);
        });
        let baskets: Vec<Basket> = (0..8u64)
            .map(|i| {
                let mut x = ev.id() * 1000 + i + seed;
                let raw: Vec<u8> = (0..32 * 1024)
                    .map(|_| {
                        x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                        (x >> 59) as u8
                    })
                    .collect();
                Basket::single(&format!("c{i}"), ev.id(), raw)
            })
            .collect();
        ctx.imt.compress_all(baskets, 6).map(|_| ())
    });
    let report = fw.run(Arc::new(IdSource(6)), vec![producer, out]).unwrap();
    let out_idx = 1;
    IsolationTrial {
        imt_foreign: report.imt_foreign_executions,
        nested_foreign: report.foreign_nested_in(out_idx),
        report,
    }
}
