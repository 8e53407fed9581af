//! Events, data products and synthetic workload generation.
//!
//! A [`WorkloadProfile`] describes a set of product schemas. [`EventGenerator`]
//! turns it into a deterministic stream of [`Event`]s whose payload bytes
//! depend only on `(seed, event_id, product name)`.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};

use crate::error::{Error, Result};

/// Length of the repeating low-entropy pattern.
pub const PATTERN_LEN: usize = 64;

/// Payload lengths are truncated to `[1, MAX_SIZE_FACTOR * mean_bytes]`.
pub const MAX_SIZE_FACTOR: u64 = 16;

/// Output tier a product belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tier {
    Reco,
    Aod,
    MiniAod,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::Reco, Tier::Aod, Tier::MiniAod];

    pub fn label(self) -> &'static str {
        match self {
            Tier::Reco => "RECO",
            Tier::Aod => "AOD",
            Tier::MiniAod => "MINIAOD",
        }
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Tier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "RECO" => Ok(Tier::Reco),
            "AOD" => Ok(Tier::Aod),
            "MINIAOD" => Ok(Tier::MiniAod),
            other => Err(Error::invalid_profile(
                "tier",
                format!("unknown tier `{other}` (expected RECO, AOD or MINIAOD)"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SizeDistribution {
    pub mean_bytes: u64,
    /// Log-normal shape parameter (sigma). Zero gives constant-size payloads.
    pub dispersion: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProductSchema {
    pub name: String,
    pub tier: Tier,
    pub size: SizeDistribution,
    /// Fraction of each payload drawn from the repeating pattern.
    pub compressibility: f64,
}

impl ProductSchema {
    pub fn new(
        name: impl Into<String>,
        tier: Tier,
        mean_bytes: u64,
        dispersion: f64,
        compressibility: f64,
    ) -> Self {
        ProductSchema {
            name: name.into(),
            tier,
            size: SizeDistribution {
                mean_bytes,
                dispersion,
            },
            compressibility,
        }
    }

    fn validate(&self, index: usize) -> Result<()> {
        let field = |f: &str| format!("schemas[{index}].{f}");
        if self.name.is_empty() {
            return Err(Error::invalid_profile(field("name"), "must not be empty"));
        }
        if self.size.mean_bytes < 1 {
            return Err(Error::invalid_profile(field("mean_bytes"), "must be >= 1"));
        }
        if !self.size.dispersion.is_finite() || self.size.dispersion < 0.0 {
            return Err(Error::invalid_profile(
                field("dispersion"),
                "must be a finite non-negative number",
            ));
        }
        if !(0.0..=1.0).contains(&self.compressibility) {
            return Err(Error::invalid_profile(
                field("compressibility"),
                "must lie in [0, 1]",
            ));
        }
        Ok(())
    }
}

/// One named data product of an event.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Product {
    pub name: Arc<str>,
    pub bytes: Vec<u8>,
}

/// A unit of work: an id plus one payload per product, in schema order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    pub id: u64,
    pub products: Vec<Product>,
}

impl Event {
    pub fn get(&self, name: &str) -> Option<&[u8]> {
        self.products
            .iter()
            .find(|p| &*p.name == name)
            .map(|p| p.bytes.as_slice())
    }

    /// `(name, bytes)` pairs, the shape the column store consumes.
    pub fn product_refs(&self) -> impl Iterator<Item = (&str, &[u8])> {
        self.products.iter().map(|p| (&*p.name, p.bytes.as_slice()))
    }

    pub fn payload_bytes(&self) -> usize {
        self.products.iter().map(|p| p.bytes.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadProfile {
    pub schemas: Vec<ProductSchema>,
    pub events_total: u64,
    pub seed: u64,
    /// Simulated processing cost per event, in work units (see `scheduler::burn`).
    pub cpu_work_per_event: u64,
}

impl WorkloadProfile {
    pub fn validate(&self) -> Result<()> {
        if self.schemas.is_empty() {
            return Err(Error::invalid_profile("schemas", "at least one schema required"));
        }
        let mut seen = HashSet::new();
        for (i, s) in self.schemas.iter().enumerate() {
            s.validate(i)?;
            if !seen.insert(s.name.as_str()) {
                return Err(Error::invalid_profile(
                    format!("schemas[{i}].name"),
                    format!("duplicate product name `{}`", s.name),
                ));
            }
        }
        Ok(())
    }

    pub fn schemas_of(&self, tier: Tier) -> impl Iterator<Item = &ProductSchema> {
        self.schemas.iter().filter(move |s| s.tier == tier)
    }

    pub fn product_names(&self, tier: Tier) -> Vec<String> {
        self.schemas_of(tier).map(|s| s.name.clone()).collect()
    }

    /// Desk-scale analogue of a reconstruction job writing RECO, AOD and
    /// MINIAOD: 400 x 2 KiB, 200 x 1 KiB and 50 x 512 B products.
    ///
    /// `cpu_work_per_event` is left at zero; the harness calibrates it.
    pub fn reco_analogue(events_total: u64, seed: u64) -> Self {
        let mut schemas = Vec::with_capacity(650);
        let tiers = [
            (Tier::Reco, "reco", 400, 2048),
            (Tier::Aod, "aod", 200, 1024),
            (Tier::MiniAod, "mini", 50, 512),
        ];
        for (tier, prefix, count, mean) in tiers {
            for i in 0..count {
                schemas.push(ProductSchema::new(
                    format!("{prefix}_{i:03}"),
                    tier,
                    mean,
                    0.5,
                    0.7,
                ));
            }
        }
        WorkloadProfile {
            schemas,
            events_total,
            seed,
            cpu_work_per_event: 0,
        }
    }
}

/// Immutable, thread-shareable payload generator for one profile.
#[derive(Debug)]
pub struct EventGenerator {
    seed: u64,
    events_total: u64,
    products: Vec<ProductGen>,
}

#[derive(Debug)]
struct ProductGen {
    name: Arc<str>,
    tier: Tier,
    name_hash: u64,
    mean_bytes: u64,
    size: Option<LogNormal<f64>>,
    compressibility: f64,
    pattern: [u8; PATTERN_LEN],
}

impl EventGenerator {
    pub fn new(profile: &WorkloadProfile) -> Result<Self> {
        profile.validate()?;
        let products = profile
            .schemas
            .iter()
            .map(|s| {
                let name_hash = fnv1a(s.name.as_bytes());
                let sigma = s.size.dispersion;
                // Log-normal mean is exp(mu + sigma^2 / 2).
                let size = if sigma > 0.0 {
                    let mu = (s.size.mean_bytes as f64).ln() - sigma * sigma / 2.0;
                    Some(LogNormal::new(mu, sigma).map_err(|e| {
                        Error::invalid_profile("dispersion", e.to_string())
                    })?)
                } else {
                    None
                };
                let mut pattern = [0u8; PATTERN_LEN];
                ChaCha8Rng::seed_from_u64(profile.seed ^ name_hash.rotate_left(17))
                    .fill_bytes(&mut pattern);
                Ok(ProductGen {
                    name: Arc::from(s.name.as_str()),
                    tier: s.tier,
                    name_hash,
                    mean_bytes: s.size.mean_bytes,
                    size,
                    compressibility: s.compressibility,
                    pattern,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EventGenerator {
            seed: profile.seed,
            events_total: profile.events_total,
            products,
        })
    }

    pub fn events_total(&self) -> u64 {
        self.events_total
    }

    pub fn product_count(&self) -> usize {
        self.products.len()
    }

    pub fn product_name(&self, index: usize) -> &Arc<str> {
        &self.products[index].name
    }

    pub fn product_index(&self, name: &str) -> Option<usize> {
        self.products.iter().position(|p| &*p.name == name)
    }

    /// Indices of the products belonging to `tier`, in schema order.
    pub fn tier_products(&self, tier: Tier) -> Vec<usize> {
        (0..self.products.len())
            .filter(|&i| self.products[i].tier == tier)
            .collect()
    }

    /// Deterministic payload for one product of one event.
    pub fn payload(&self, event_id: u64, product: usize) -> Vec<u8> {
        let p = &self.products[product];
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, event_id, p.name_hash));
        let len = match &p.size {
            Some(dist) => {
                let x: f64 = dist.sample(&mut rng);
                (x.round() as u64).clamp(1, MAX_SIZE_FACTOR * p.mean_bytes)
            }
            None => p.mean_bytes,
        } as usize;
        let low = ((len as f64) * p.compressibility).round() as usize;
        let mut bytes = vec![0u8; len];
        let phase = rng.gen_range(0..PATTERN_LEN);
        for (i, b) in bytes[..low].iter_mut().enumerate() {
            *b = p.pattern[(i + phase) % PATTERN_LEN];
        }
        rng.fill_bytes(&mut bytes[low..]);
        bytes
    }

    pub fn event(&self, event_id: u64) -> Event {
        Event {
            id: event_id,
            products: (0..self.products.len())
                .map(|i| Product {
                    name: self.products[i].name.clone(),
                    bytes: self.payload(event_id, i),
                })
                .collect(),
        }
    }

    /// The ordered event stream `0..events_total`.
    pub fn events(&self) -> impl Iterator<Item = Event> + '_ {
        (0..self.events_total).map(move |id| self.event(id))
    }
}

/// Validates `profile` and yields its events in id order.
pub fn generate_events(profile: &WorkloadProfile) -> Result<impl Iterator<Item = Event>> {
    let generator = EventGenerator::new(profile)?;
    Ok((0..generator.events_total).map(move |id| generator.event(id)))
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

// splitmix64 finalizer over the three inputs
fn mix(seed: u64, event_id: u64, name_hash: u64) -> u64 {
    let mut z = seed
        .wrapping_add(event_id.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(name_hash.rotate_left(29));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
