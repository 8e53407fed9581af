use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use parasink_core::config::apply_seed_env;
use parasink_core::harness::prepare_profile;
use parasink_core::{
    build_schedule, load_config, parse_config, run_config, sweep, verify_dir, ConfigFile, Error, OutputSink,
    ProcessingConfig, Scenario,
};

const EXIT_VERIFY: u8 = 2;
const EXIT_CONFIG: u8 = 3;

/// Parallel columnar event output: runs, sweeps and verification.
#[derive(Parser, Debug)]
#[command(name = "parasink", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one processing configuration and write its artifacts.
    Run {
        #[command(flatten)]
        common: Common,
        /// 1 single-threaded, 2 with IMT, 3 parallel merger, 4 dummy
        #[arg(long)]
        config: u8,
        #[arg(long)]
        threads: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run configurations over a list of thread counts.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
        configs: Vec<u8>,
        #[arg(long, value_delimiter = ',', required = true)]
        threads: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check every container in a directory for completeness.
    Verify {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        expect: u64,
    },
}

#[derive(Args, Debug)]
struct Common {
    #[arg(long, default_value = "reco-aod-mini")]
    scenario: Scenario,
    /// Configuration file; defaults to the reco-analogue preset.
    #[arg(long)]
    profile: Option<PathBuf>,
    /// Overrides `events_total` from the profile.
    #[arg(long)]
    events: Option<u64>,
}

fn load(common: &Common) -> parasink_core::Result<ConfigFile> {
    let mut cfg = match &common.profile {
        Some(p) => load_config(p)?,
        None => parse_config("preset = reco-analogue")?,
    };
    if let Some(n) = common.events {
        cfg.profile.events_total = n;
    }
    apply_seed_env(&mut cfg.profile)?;
    if let Some(modules) = &cfg.modules {
        // The harness drives its own tier graph; an explicit graph is only checked.
        let schedule = build_schedule(modules.clone(), &[])?;
        log::info!("module graph ok: {}", schedule.names().join(" -> "));
    }
    let profile = prepare_profile(common.scenario, &cfg.profile, &cfg.settings)?;
    Ok(ConfigFile { profile, ..cfg })
}

fn exit_for(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Verification(_)) => EXIT_VERIFY,
        Some(Error::Config(_) | Error::InvalidProfile { .. } | Error::Usage(_)) => EXIT_CONFIG,
        _ => 1,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run {
            common,
            config,
            threads,
            out,
        } => {
            let cfg = load(&common)?;
            let config = ProcessingConfig::from_id(config)?;
            if threads == 0 {
                return Err(Error::Usage("--threads must be at least 1".into()).into());
            }
            let art = run_config(
                common.scenario,
                config,
                &cfg.profile,
                threads,
                &cfg.settings,
                &OutputSink::Directory(out.clone()),
            )?;
            art.write_to(&out, "run").with_context(|| format!("writing artifacts to {}", out.display()))?;
            let r = &art.row;
            println!(
                "config {} {} threads {}: {:.3} s, {:.2} events/s, stall {:.3}, peak buffer {} B",
                r.config, r.scenario, r.n_threads, r.wall_time_s, r.events_per_s, r.stall_fraction, r.peak_buffer_bytes
            );
            Ok(())
        }
        Command::Sweep {
            common,
            configs,
            threads,
            out,
        } => {
            let cfg = load(&common)?;
            let configs = configs
                .into_iter()
                .map(ProcessingConfig::from_id)
                .collect::<parasink_core::Result<Vec<_>>>()?;
            if threads.contains(&0) {
                return Err(Error::Usage("thread counts must be at least 1".into()).into());
            }
            std::fs::create_dir_all(&out)?;
            let rows = sweep(common.scenario, &configs, &threads, &cfg.profile, &cfg.settings, Some(&out))?;
            println!("threads,config,events_per_s,stall_fraction");
            let mut failed = 0;
            for r in &rows {
                match &r.error {
                    None => println!("{},{},{:.3},{:.3}", r.n_threads, r.config, r.events_per_s, r.stall_fraction),
                    Some(e) => {
                        failed += 1;
                        println!("{},{},failed: {e}", r.n_threads, r.config);
                    }
                }
            }
            println!("wrote {}", out.join("scaling.csv").display());
            if failed > 0 {
                return Err(Error::Verification(format!("{failed} of {} sweep points failed", rows.len())).into());
            }
            Ok(())
        }
        Command::Verify { dir, expect } => verify(&dir, expect),
    }
}

fn verify(dir: &Path, expect: u64) -> anyhow::Result<()> {
    let report = verify_dir(dir, expect)?;
    for f in &report.files {
        println!(
            "{}: {} baskets, {} events{}",
            f.label,
            f.baskets_checked,
            f.events_found,
            if f.is_ok() { "" } else { " MISMATCH" }
        );
    }
    if !report.is_ok() {
        return Err(Error::Verification(report.diff()).into());
    }
    println!("ok: {} file(s), {expect} events each", report.files.len());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_for(&e))
        }
    }
}
