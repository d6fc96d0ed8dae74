//! JSON forms of profiles, schedules and run statistics.

use std::collections::BTreeMap;

use anyhow::{anyhow, bail, ensure, Result};
use serde::{Deserialize, Serialize};
use smoothdit_core::{CacheSchedule, Divergence, ErrorProfile, LayerId, RunStats, SamplerConfig, Strategy};

use crate::fsio::sha256_hex;

pub const TOOL_VERSION: &str = concat!("smoothdit ", env!("CARGO_PKG_VERSION"));
pub const SCHEDULE_VERSION: u32 = 1;

/// Where an artifact came from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool_version: String,
    /// Input path to sha256 of its bytes.
    #[serde(default)]
    pub inputs: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_checksum: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampler: Option<SamplerJson>,
    /// `seed:stream:index` for every random input used.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub seeds: Vec<String>,
}

impl Provenance {
    pub fn new() -> Self {
        Self {
            tool_version: TOOL_VERSION.into(),
            ..Self::default()
        }
    }

    pub fn input(mut self, path: impl Into<String>, bytes: &[u8]) -> Self {
        self.inputs.insert(path.into(), sha256_hex(bytes));
        self
    }
}

/// Serializes a [`Strategy`] by name.
pub mod strategy_name {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};
    use smoothdit_core::Strategy;

    pub fn serialize<S: Serializer>(s: &Strategy, ser: S) -> Result<S::Ok, S::Error> {
        ser.serialize_str(s.as_str())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<Strategy, D::Error> {
        String::deserialize(de)?.parse().map_err(D::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerJson {
    pub nfe: usize,
    pub cfg_strength: f32,
    pub sway_coeff: f32,
    pub seed: u64,
}

impl From<&SamplerConfig> for SamplerJson {
    fn from(s: &SamplerConfig) -> Self {
        Self {
            nfe: s.nfe,
            cfg_strength: s.cfg_strength,
            sway_coeff: s.sway_coeff,
            seed: s.seed,
        }
    }
}

impl From<SamplerJson> for SamplerConfig {
    fn from(s: SamplerJson) -> Self {
        Self {
            nfe: s.nfe,
            cfg_strength: s.cfg_strength,
            sway_coeff: s.sway_coeff,
            seed: s.seed,
        }
    }
}

fn layer_ids(keys: impl Iterator<Item = String>) -> Result<(usize, Vec<(LayerId, String)>)> {
    let mut ids = Vec::new();
    for k in keys {
        let id = LayerId::parse_key(&k).ok_or_else(|| anyhow!("bad layer key {k:?}"))?;
        ids.push((id, k));
    }
    let depth = ids.len() / 2;
    ensure!(depth > 0, "no layers");
    let mut seen = vec![false; 2 * depth];
    for (id, k) in &ids {
        ensure!(id.block < depth, "layer {k} outside depth {depth}");
        ensure!(!seen[id.index()], "duplicate layer {k}");
        seen[id.index()] = true;
    }
    ensure!(ids.len() == 2 * depth, "odd number of layer entries");
    ids.sort_by_key(|(id, _)| id.index());
    Ok((depth, ids))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileFile {
    pub nfe: usize,
    pub sample_count: usize,
    pub errors: BTreeMap<String, Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl ProfileFile {
    pub fn new(profile: &ErrorProfile, provenance: Option<Provenance>) -> Self {
        Self {
            nfe: profile.nfe,
            sample_count: profile.sample_count,
            errors: LayerId::all(profile.depth())
                .map(|id| (id.key(), profile.layer(id).to_vec()))
                .collect(),
            provenance,
        }
    }

    pub fn profile(&self) -> Result<ErrorProfile> {
        let (_, ids) = layer_ids(self.errors.keys().cloned())?;
        let profile = ErrorProfile {
            nfe: self.nfe,
            sample_count: self.sample_count,
            errors: ids.iter().map(|(_, k)| self.errors[k].clone()).collect(),
        };
        profile.validate()?;
        Ok(profile)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleFile {
    pub version: u32,
    pub nfe: usize,
    pub alpha: f64,
    pub strategy: String,
    pub max_consecutive: usize,
    /// 1 = cached, 0 = computed.
    pub masks: BTreeMap<String, Vec<u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl ScheduleFile {
    pub fn new(s: &CacheSchedule, provenance: Option<Provenance>) -> Self {
        Self {
            version: SCHEDULE_VERSION,
            nfe: s.nfe,
            alpha: s.alpha,
            strategy: s.strategy.as_str().into(),
            max_consecutive: s.max_consecutive,
            masks: LayerId::all(s.depth())
                .map(|id| (id.key(), s.mask(id).iter().map(|&c| c as u8).collect()))
                .collect(),
            provenance,
        }
    }

    pub fn schedule(&self) -> Result<CacheSchedule> {
        ensure!(self.version == SCHEDULE_VERSION, "unsupported schedule version {}", self.version);
        let strategy: Strategy = self.strategy.parse().map_err(|e| anyhow!("{e}"))?;
        let (_, ids) = layer_ids(self.masks.keys().cloned())?;
        let mut masks = Vec::with_capacity(ids.len());
        for (_, k) in &ids {
            let m = &self.masks[k];
            ensure!(m.len() == self.nfe, "mask {k} has {} entries, nfe is {}", m.len(), self.nfe);
            masks.push(
                m.iter()
                    .map(|&v| match v {
                        0 => Ok(false),
                        1 => Ok(true),
                        _ => bail!("mask {k} holds {v}, expected 0 or 1"),
                    })
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        let s = CacheSchedule {
            nfe: self.nfe,
            alpha: self.alpha,
            strategy,
            max_consecutive: self.max_consecutive,
            masks,
        };
        s.validate()?;
        Ok(s)
    }
}

/// sha256 of the compact JSON of the schedule itself, without provenance,
/// so the value does not depend on formatting or on who produced it.
pub fn schedule_fingerprint(s: &CacheSchedule) -> String {
    let bytes = serde_json::to_vec(&ScheduleFile::new(s, None)).expect("schedule serializes");
    sha256_hex(&bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DivergenceJson {
    pub rel_l2: f64,
    pub rel_l1: f64,
    pub max_abs: f64,
}

impl From<Divergence> for DivergenceJson {
    fn from(d: Divergence) -> Self {
        Self {
            rel_l2: d.rel_l2,
            rel_l1: d.rel_l1,
            max_abs: d.max_abs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsFile {
    pub nfe: usize,
    pub compute_steps_per_layer: BTreeMap<String, usize>,
    pub cached_steps_per_layer: BTreeMap<String, usize>,
    pub sublayer_computes: usize,
    pub cache_hits: usize,
    pub wall_ms: f64,
    pub seed: u64,
    pub cfg_strength: f32,
    pub sway_coeff: f32,
    pub guidance_form: String,
    pub schedule_fingerprint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub divergence_vs_uncached: Option<DivergenceJson>,
    pub provenance: Provenance,
}

impl StatsFile {
    pub fn new(stats: &RunStats, provenance: Provenance) -> Self {
        let per_layer = |v: &[usize]| {
            v.iter()
                .enumerate()
                .map(|(i, &c)| (LayerId::from_index(i).key(), c))
                .collect()
        };
        Self {
            nfe: stats.nfe,
            compute_steps_per_layer: per_layer(&stats.compute_steps_per_layer),
            cached_steps_per_layer: per_layer(&stats.cached_steps_per_layer),
            sublayer_computes: stats.sublayer_computes,
            cache_hits: stats.cache_hits,
            wall_ms: stats.wall_ms,
            seed: stats.seed,
            cfg_strength: stats.cfg_strength,
            sway_coeff: stats.sway_coeff,
            guidance_form: stats.guidance_form.into(),
            schedule_fingerprint: stats.schedule_fingerprint.clone(),
            divergence_vs_uncached: None,
            provenance,
        }
    }
}
