//! Parallel columnar event output.
//!
//! Events flow through a small dependency-driven scheduler into output
//! modules that serialize products column-wise into compressed baskets and
//! write them to a self-describing container. Compression can fan out over
//! the scheduler's thread pool, and a buffer merger lets several events be
//! written concurrently into in-memory files that are merged into one output.

pub mod codec;
pub mod config;
pub mod container;
pub mod error;
pub mod event_model;
pub mod executor;
pub mod harness;
pub mod imt;
pub mod merger;
pub mod scheduler;
pub mod stall;

pub use codec::{
    compress_basket, decompress_basket, Basket, BasketHeader, Codec, ColumnStore, CompressedBasket, Deflate,
    FlushPolicy, EVENT_ID_COLUMN, MAX_LEVEL,
};
pub use config::{load_config, parse_config, ConfigFile};
pub use container::{read_container, write_container, ContainerWriter, FileMeta, Trailer};
pub use error::{Error, Result};
pub use event_model::{
    generate_events, Event, EventGenerator, Product, ProductSchema, SizeDistribution, Tier, WorkloadProfile,
};
pub use executor::Executor;
pub use harness::{
    run_config, sweep, verify_dir, verify_outputs, HarnessSettings, OutputSink, ProcessingConfig, RunArtifacts,
    ScalingRow, Scenario, VerifyReport,
};
pub use imt::{compress_all, CompressionJob, Imt};
pub use merger::{BufferMerger, MergeQueue, MergeStats, MergerConfig, MemoryFileBuffer, SelectionPolicy};
pub use scheduler::{build_schedule, Framework, Module, ModuleSpec, RunOptions, RunReport, Schedule};
pub use stall::{StallMonitor, StallReport};

/// Thread count used for "maximum host threads" experiments: the host's
/// available parallelism, but never fewer than `floor`.
pub fn max_host_threads(floor: usize) -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .max(floor)
}
