//! Flat `key = value` configuration files.
//!
//! ```text
//! # workload
//! events_total = 200
//! seed = 42
//! cpu_work_per_event = 0          # 0: calibrate against the output cost
//! preset = reco-analogue          # optional starting schema set
//! schemas[0].name = hits
//! schemas[0].tier = RECO
//! schemas[0].mean_bytes = 2048
//! schemas[0].dispersion = 0.5
//! schemas[0].compressibility = 0.7
//! schemas[0].count = 10           # expands to hits_000 .. hits_009
//!
//! # output
//! flush.basket_target_bytes = 65536
//! flush.every_n_events = 25       # or `none`
//! codec.level = 6
//! limit.RECO = 6                  # merger buffers = output concurrency
//! merger.threshold_bytes = 16777216
//! merger.threshold_events = none
//! merger.selection = fullest-first
//! monitor.sample_period_ms = 50
//!
//! # optional explicit module graph
//! modules[0].name = maker
//! modules[0].kind = producer
//! modules[0].consumes =
//! modules[0].produces = hits_000, hits_001
//! modules[0].limit = unlimited
//! modules[0].cost = 100
//! ```
//!
//! Explicit `schemas[..]` replace the preset's schemas. Indices must be
//! dense from zero.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;
use std::time::Duration;

use crate::error::{Error, Result};
use crate::event_model::{ProductSchema, Tier, WorkloadProfile};
use crate::harness::HarnessSettings;
use crate::merger::SelectionPolicy;
use crate::scheduler::{ModuleKind, ModuleSpec};

/// Environment variable that overrides the profile seed.
pub const SEED_ENV: &str = "PARASINK_SEED";

const DEFAULT_EVENTS: u64 = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigFile {
    pub profile: WorkloadProfile,
    pub settings: HarnessSettings,
    /// Present when the file declares `modules[..]` entries.
    pub modules: Option<Vec<ModuleSpec>>,
}

pub fn load_config(path: &Path) -> Result<ConfigFile> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

/// Applies `PARASINK_SEED` when it is set.
pub fn apply_seed_env(profile: &mut WorkloadProfile) -> Result<()> {
    apply_seed_override(profile, std::env::var(SEED_ENV).ok().as_deref())
}

pub fn apply_seed_override(profile: &mut WorkloadProfile, value: Option<&str>) -> Result<()> {
    if let Some(v) = value {
        profile.seed = v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}=`{v}` is not an unsigned 64-bit integer")))?;
    }
    Ok(())
}

struct Entry<'a> {
    line: usize,
    key: &'a str,
    value: &'a str,
}

impl Entry<'_> {
    fn err(&self, reason: impl std::fmt::Display) -> Error {
        Error::Config(format!("line {}: `{}`: {reason}", self.line, self.key))
    }

    fn parse<T: FromStr>(&self) -> Result<T> {
        self.value
            .parse()
            .map_err(|_| self.err(format!("cannot parse `{}`", self.value)))
    }

    fn optional<T: FromStr>(&self) -> Result<Option<T>> {
        if self.value.eq_ignore_ascii_case("none") || self.value.eq_ignore_ascii_case("unlimited") {
            Ok(None)
        } else {
            self.parse().map(Some)
        }
    }

    fn list(&self) -> Vec<String> {
        self.value
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect()
    }
}

#[derive(Default)]
struct SchemaDraft {
    name: Option<String>,
    tier: Option<Tier>,
    mean_bytes: Option<u64>,
    dispersion: Option<f64>,
    compressibility: Option<f64>,
    count: Option<usize>,
}

#[derive(Default)]
struct ModuleDraft {
    name: Option<String>,
    kind: Option<ModuleKind>,
    consumes: Vec<String>,
    produces: Vec<String>,
    limit: Option<usize>,
    cost: u64,
}

/// Splits `prefix[<i>].<field>`.
fn indexed<'a>(key: &'a str, prefix: &str) -> Option<(&'a str, &'a str)> {
    let rest = key.strip_prefix(prefix)?.strip_prefix('[')?;
    let (idx, field) = rest.split_once("].")?;
    Some((idx, field))
}

pub fn parse_config(text: &str) -> Result<ConfigFile> {
    let mut settings = HarnessSettings::default();
    let mut events_total = DEFAULT_EVENTS;
    let mut seed = 0;
    let mut cpu_work = 0;
    let mut preset: Option<WorkloadProfile> = None;
    let mut schemas: BTreeMap<usize, SchemaDraft> = BTreeMap::new();
    let mut modules: BTreeMap<usize, ModuleDraft> = BTreeMap::new();

    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        let e = Entry {
            line: n + 1,
            key: key.trim(),
            value: value.trim(),
        };

        if let Some((idx, field)) = indexed(e.key, "schemas") {
            let i: usize = idx.parse().map_err(|_| e.err("bad index"))?;
            let d = schemas.entry(i).or_default();
            match field {
                "name" => d.name = Some(e.value.to_string()),
                "tier" => d.tier = Some(e.value.parse().map_err(|err| e.err(err))?),
                "mean_bytes" => d.mean_bytes = Some(e.parse()?),
                "dispersion" => d.dispersion = Some(e.parse()?),
                "compressibility" => d.compressibility = Some(e.parse()?),
                "count" => d.count = Some(e.parse()?),
                _ => return Err(e.err("unknown schema field")),
            }
            continue;
        }
        if let Some((idx, field)) = indexed(e.key, "modules") {
            let i: usize = idx.parse().map_err(|_| e.err("bad index"))?;
            let d = modules.entry(i).or_default();
            match field {
                "name" => d.name = Some(e.value.to_string()),
                "kind" => {
                    d.kind = Some(match e.value {
                        "producer" => ModuleKind::Producer,
                        "output" => ModuleKind::Output,
                        _ => return Err(e.err("expected `producer` or `output`")),
                    })
                }
                "consumes" => d.consumes = e.list(),
                "produces" => d.produces = e.list(),
                "limit" => d.limit = e.optional()?,
                "cost" => d.cost = e.parse()?,
                _ => return Err(e.err("unknown module field")),
            }
            continue;
        }
        if let Some(tier) = e.key.strip_prefix("limit.") {
            let tier: Tier = tier.parse().map_err(|err| e.err(err))?;
            settings.set_buffers(tier, e.parse()?);
            continue;
        }
        match e.key {
            "events_total" => events_total = e.parse()?,
            "seed" => seed = e.parse()?,
            "cpu_work_per_event" => cpu_work = e.parse()?,
            "preset" => match e.value {
                "reco-analogue" => preset = Some(WorkloadProfile::reco_analogue(0, 0)),
                _ => return Err(e.err("unknown preset (expected reco-analogue)")),
            },
            "flush.basket_target_bytes" => settings.flush.basket_target_bytes = e.parse()?,
            "flush.every_n_events" => settings.flush.flush_every_n_events = e.optional()?,
            "codec.level" => settings.level = e.parse()?,
            "merger.threshold_bytes" => settings.merge_threshold_bytes = e.parse()?,
            "merger.threshold_events" => settings.merge_threshold_events = e.optional()?,
            "merger.selection" => {
                settings.selection = match e.value {
                    "fullest-first" => SelectionPolicy::FullestFirst,
                    "round-robin" => SelectionPolicy::RoundRobin,
                    _ => return Err(e.err("expected `fullest-first` or `round-robin`")),
                }
            }
            "monitor.sample_period_ms" => {
                settings.sample_period = e.optional::<u64>()?.map(Duration::from_millis)
            }
            _ => return Err(e.err("unknown key")),
        }
    }

    let schema_list = if schemas.is_empty() {
        preset
            .map(|p| p.schemas)
            .ok_or_else(|| Error::invalid_profile("schemas", "no schemas[..] entries and no preset"))?
    } else {
        build_schemas(schemas)?
    };
    let profile = WorkloadProfile {
        schemas: schema_list,
        events_total,
        seed,
        cpu_work_per_event: cpu_work,
    };
    profile.validate()?;
    settings.validate()?;

    let modules = if modules.is_empty() {
        None
    } else {
        Some(build_modules(modules)?)
    };
    Ok(ConfigFile {
        profile,
        settings,
        modules,
    })
}

fn dense<T>(map: &BTreeMap<usize, T>, what: &str) -> Result<()> {
    for (expect, &got) in map.keys().enumerate() {
        if got != expect {
            return Err(Error::Config(format!("{what}[{expect}] is missing (found {what}[{got}])")));
        }
    }
    Ok(())
}

fn build_schemas(drafts: BTreeMap<usize, SchemaDraft>) -> Result<Vec<ProductSchema>> {
    dense(&drafts, "schemas")?;
    let mut out = Vec::new();
    for (i, d) in drafts {
        let need = |f: &str| Error::invalid_profile(format!("schemas[{i}].{f}"), "missing");
        let name = d.name.ok_or_else(|| need("name"))?;
        let tier = d.tier.ok_or_else(|| need("tier"))?;
        let mean = d.mean_bytes.ok_or_else(|| need("mean_bytes"))?;
        let dispersion = d.dispersion.unwrap_or(0.0);
        let c = d.compressibility.ok_or_else(|| need("compressibility"))?;
        match d.count {
            None => out.push(ProductSchema::new(name, tier, mean, dispersion, c)),
            Some(0) => return Err(Error::invalid_profile(format!("schemas[{i}].count"), "must be >= 1")),
            Some(n) => {
                for k in 0..n {
                    out.push(ProductSchema::new(format!("{name}_{k:03}"), tier, mean, dispersion, c));
                }
            }
        }
    }
    Ok(out)
}

fn build_modules(drafts: BTreeMap<usize, ModuleDraft>) -> Result<Vec<ModuleSpec>> {
    dense(&drafts, "modules")?;
    drafts
        .into_iter()
        .map(|(i, d)| {
            let name = d
                .name
                .ok_or_else(|| Error::Config(format!("modules[{i}].name is missing")))?;
            let kind = d
                .kind
                .ok_or_else(|| Error::Config(format!("modules[{i}].kind is missing")))?;
            Ok(ModuleSpec {
                name,
                consumes: d.consumes.into_iter().collect(),
                produces: d.produces.into_iter().collect(),
                kind,
                concurrency_limit: d.limit,
                cost: d.cost,
            })
        })
        .collect()
}
