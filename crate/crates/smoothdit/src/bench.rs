//! Threshold sweeps and the cached-versus-fewer-steps comparison.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use anyhow::{anyhow, bail, ensure, Result};
use serde::{Deserialize, Serialize};
use smoothdit_core::schedule::{alpha_for_cached_fraction, schedule_stats};
use smoothdit_core::{apply_strategy, divergence, CacheSchedule, Dit, ErrorProfile, SamplerConfig, Strategy, Tensor};

use crate::formats::{schedule_fingerprint, DivergenceJson};
use crate::runs::{interleaved_wall_ms, outputs, Input};

pub const DIVERGENCE_NOTE: &str =
    "divergence = output-space distance to the uncached run at the same nfe; a proxy, not a perceptual quality measure";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Threshold {
    Alpha(f64),
    /// Pick the threshold whose schedule caches closest to this fraction.
    CachedFraction(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub nfe_list: Vec<usize>,
    pub thresholds: Vec<Threshold>,
    #[serde(with = "crate::formats::strategy_name")]
    pub strategy: Strategy,
    pub max_consecutive: usize,
    pub cfg_strength: f32,
    pub sway_coeff: f32,
    pub eval_seed: u64,
    pub eval_count: usize,
    /// Timed runs per arm after warm-up.
    pub timing_runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub nfe: usize,
    pub label: String,
    pub alpha: Option<f64>,
    pub cached_fraction: f64,
    pub compute_fraction: f64,
    pub mean_wall_ms: f64,
    pub speedup: f64,
    pub divergence: DivergenceJson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub header: BTreeMap<String, String>,
    pub rows: Vec<SweepRow>,
}

fn sampler(nfe: usize, cfg_strength: f32, sway_coeff: f32, seed: u64) -> SamplerConfig {
    SamplerConfig {
        nfe,
        cfg_strength,
        sway_coeff,
        seed,
    }
}

/// Mean of each divergence component over samples.
fn mean_divergence(outputs: &[Tensor], refs: &[Tensor]) -> Result<DivergenceJson> {
    let mut acc = DivergenceJson {
        rel_l2: 0.0,
        rel_l1: 0.0,
        max_abs: 0.0,
    };
    for (x, r) in outputs.iter().zip(refs) {
        let d = divergence(x, r)?;
        acc.rel_l2 += d.rel_l2;
        acc.rel_l1 += d.rel_l1;
        acc.max_abs += d.max_abs;
    }
    let n = outputs.len() as f64;
    acc.rel_l2 /= n;
    acc.rel_l1 /= n;
    acc.max_abs /= n;
    Ok(acc)
}

fn finals(runs: Vec<(Tensor, smoothdit_core::RunStats)>) -> Vec<Tensor> {
    runs.into_iter().map(|(x, _)| x).collect()
}

pub fn resolve_schedule(
    profile: &ErrorProfile,
    threshold: Threshold,
    max_consecutive: usize,
    strategy: Strategy,
) -> Result<CacheSchedule> {
    let alpha = match threshold {
        Threshold::Alpha(a) => a,
        Threshold::CachedFraction(f) => alpha_for_cached_fraction(profile, f, max_consecutive, strategy)?,
    };
    Ok(apply_strategy(profile, alpha, max_consecutive, strategy)?)
}

pub fn bench_sweep(
    model: &Dit,
    eval: &[Input],
    profiles: &BTreeMap<usize, ErrorProfile>,
    config: &SweepConfig,
) -> Result<SweepReport> {
    ensure!(!eval.is_empty(), "bench needs at least one evaluation sample");
    let mut rows = Vec::new();
    for &nfe in &config.nfe_list {
        let profile = profiles
            .get(&nfe)
            .ok_or_else(|| anyhow!("no calibration profile for nfe {nfe}; run `calibrate --nfe {nfe}` first"))?;
        ensure!(profile.nfe == nfe, "profile given for nfe {nfe} was calibrated at nfe {}", profile.nfe);
        let s = sampler(nfe, config.cfg_strength, config.sway_coeff, config.eval_seed);
        let schedules = config
            .thresholds
            .iter()
            .map(|&t| resolve_schedule(profile, t, config.max_consecutive, config.strategy).map(|s| (t, s)))
            .collect::<Result<Vec<_>>>()?;
        let refs = finals(outputs(model, eval, &s, None)?);
        let mut arms: Vec<(SamplerConfig, Option<&CacheSchedule>)> = vec![(s, None)];
        arms.extend(schedules.iter().map(|(_, sch)| (s, Some(sch))));
        let wall = interleaved_wall_ms(model, eval, &arms, config.timing_runs)?;
        rows.push(SweepRow {
            nfe,
            label: "baseline".into(),
            alpha: None,
            cached_fraction: 0.0,
            compute_fraction: 1.0,
            mean_wall_ms: wall[0],
            speedup: 1.0,
            divergence: mean_divergence(&refs, &refs)?,
        });
        for ((threshold, sch), &ms) in schedules.iter().zip(&wall[1..]) {
            let st = schedule_stats(sch);
            let label = match threshold {
                Threshold::Alpha(a) => format!("alpha={a}"),
                Threshold::CachedFraction(f) => format!("target={f}"),
            };
            rows.push(SweepRow {
                nfe,
                label,
                alpha: Some(sch.alpha),
                cached_fraction: st.cached_fraction(),
                compute_fraction: st.compute_fraction,
                mean_wall_ms: ms,
                speedup: wall[0] / ms,
                divergence: mean_divergence(&finals(outputs(model, eval, &s, Some(sch))?), &refs)?,
            });
        }
    }
    sort_rows(&mut rows);
    let mut header = BTreeMap::new();
    header.insert("config".into(), serde_json::to_string(config)?);
    header.insert("note".into(), DIVERGENCE_NOTE.into());
    Ok(SweepReport { header, rows })
}

/// By nfe descending, then cached fraction ascending, then threshold.
pub fn sort_rows(rows: &mut [SweepRow]) {
    rows.sort_by(|a, b| {
        b.nfe
            .cmp(&a.nfe)
            .then(a.cached_fraction.total_cmp(&b.cached_fraction))
            .then(a.alpha.unwrap_or(-1.0).total_cmp(&b.alpha.unwrap_or(-1.0)))
            .then(a.label.cmp(&b.label))
    });
}

fn header_lines(header: &BTreeMap<String, String>) -> String {
    header.iter().map(|(k, v)| format!("# {k}: {v}\n")).collect()
}

impl SweepReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "nfe",
            "label",
            "alpha",
            "cached_fraction",
            "compute_fraction",
            "mean_wall_ms",
            "speedup",
            "div_rel_l2",
            "div_rel_l1",
            "div_max_abs",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.nfe.to_string(),
                r.label.clone(),
                r.alpha.map(|a| a.to_string()).unwrap_or_default(),
                r.cached_fraction.to_string(),
                r.compute_fraction.to_string(),
                r.mean_wall_ms.to_string(),
                r.speedup.to_string(),
                r.divergence.rel_l2.to_string(),
                r.divergence.rel_l1.to_string(),
                r.divergence.max_abs.to_string(),
            ])?;
        }
        let body = String::from_utf8(w.into_inner().map_err(|e| anyhow!("{e}"))?)?;
        Ok(header_lines(&self.header) + &body)
    }

    pub fn to_table(&self) -> String {
        let mut out = header_lines(&self.header);
        let _ = writeln!(
            out,
            "{:>4}  {:<18} {:>10} {:>7} {:>7} {:>10} {:>7} {:>10} {:>10}",
            "nfe", "label", "alpha", "cached", "compute", "wall_ms", "speedup", "rel_l2", "max_abs"
        );
        for r in &self.rows {
            let alpha = r.alpha.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into());
            let _ = writeln!(
                out,
                "{:>4}  {:<18} {:>10} {:>7.3} {:>7.3} {:>10.3} {:>7.2} {:>10.3e} {:>10.3e}",
                r.nfe,
                r.label,
                alpha,
                r.cached_fraction,
                r.compute_fraction,
                r.mean_wall_ms,
                r.speedup,
                r.divergence.rel_l2,
                r.divergence.max_abs
            );
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareArm {
    pub label: String,
    pub nfe: usize,
    pub cached_steps_per_layer: usize,
    pub compute_steps_per_layer: Vec<usize>,
    pub sublayer_computes: usize,
    pub mean_wall_ms: f64,
    pub divergence: DivergenceJson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub header: BTreeMap<String, String>,
    pub nfe: usize,
    pub cached_count: usize,
    pub schedule_fingerprint: String,
    pub cached: CompareArm,
    pub reduced: CompareArm,
    /// Both arms computed the same sublayers the same number of times.
    pub compute_parity: bool,
    /// Cached wall time over reduced wall time.
    pub wall_ratio: f64,
}

/// Runs `schedule` at its nfe against an uncached run with the cached steps
/// removed, both measured against the uncached run at the full nfe.
pub fn compare_cache_vs_reduced(
    model: &Dit,
    eval: &[Input],
    cfg_strength: f32,
    sway_coeff: f32,
    eval_seed: u64,
    schedule: &CacheSchedule,
    timing_runs: usize,
) -> Result<CompareReport> {
    ensure!(!eval.is_empty(), "compare needs at least one evaluation sample");
    let nfe = schedule.nfe;
    let Some(c) = schedule.uniform_cached_steps() else {
        let st = schedule_stats(schedule);
        bail!(
            "schedule caches a different number of steps per layer ({:?}); the comparison needs one count for every layer",
            st.cached_per_layer
        );
    };
    ensure!(c < nfe, "schedule caches every step");
    let full = sampler(nfe, cfg_strength, sway_coeff, eval_seed);
    let reduced = sampler(nfe - c, cfg_strength, sway_coeff, eval_seed);
    let refs = finals(outputs(model, eval, &full, None)?);
    let a = outputs(model, eval, &full, Some(schedule))?;
    let b = outputs(model, eval, &reduced, None)?;
    let wall = interleaved_wall_ms(model, eval, &[(full, Some(schedule)), (reduced, None)], timing_runs)?;
    let arm = |label: &str, runs: Vec<(Tensor, smoothdit_core::RunStats)>, ms: f64| -> Result<CompareArm> {
        let stats = runs[0].1.clone();
        Ok(CompareArm {
            label: label.into(),
            nfe: stats.nfe,
            cached_steps_per_layer: stats.cached_steps_per_layer.iter().copied().max().unwrap_or(0),
            compute_steps_per_layer: stats.compute_steps_per_layer,
            sublayer_computes: stats.sublayer_computes,
            mean_wall_ms: ms,
            divergence: mean_divergence(&finals(runs), &refs)?,
        })
    };
    let cached = arm("cached", a, wall[0])?;
    let reduced = arm("reduced-nfe", b, wall[1])?;
    let compute_parity = cached.compute_steps_per_layer == reduced.compute_steps_per_layer
        && cached.sublayer_computes == reduced.sublayer_computes;
    let mut header = BTreeMap::new();
    header.insert("strategy".into(), schedule.strategy.to_string());
    header.insert("alpha".into(), schedule.alpha.to_string());
    header.insert("max_consecutive".into(), schedule.max_consecutive.to_string());
    header.insert("cfg_strength".into(), cfg_strength.to_string());
    header.insert("sway_coeff".into(), sway_coeff.to_string());
    header.insert("eval_seed".into(), eval_seed.to_string());
    header.insert("eval_count".into(), eval.len().to_string());
    header.insert("timing_runs".into(), timing_runs.to_string());
    header.insert("note".into(), DIVERGENCE_NOTE.into());
    Ok(CompareReport {
        header,
        nfe,
        cached_count: c,
        schedule_fingerprint: schedule_fingerprint(schedule),
        wall_ratio: cached.mean_wall_ms / reduced.mean_wall_ms,
        cached,
        reduced,
        compute_parity,
    })
}

impl CompareReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "arm",
            "nfe",
            "cached_steps_per_layer",
            "compute_steps_per_layer",
            "sublayer_computes",
            "mean_wall_ms",
            "div_rel_l2",
            "div_rel_l1",
            "div_max_abs",
        ])?;
        for a in [&self.cached, &self.reduced] {
            let per_layer = a.compute_steps_per_layer.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(";");
            w.write_record([
                a.label.clone(),
                a.nfe.to_string(),
                a.cached_steps_per_layer.to_string(),
                per_layer,
                a.sublayer_computes.to_string(),
                a.mean_wall_ms.to_string(),
                a.divergence.rel_l2.to_string(),
                a.divergence.rel_l1.to_string(),
                a.divergence.max_abs.to_string(),
            ])?;
        }
        let body = String::from_utf8(w.into_inner().map_err(|e| anyhow!("{e}"))?)?;
        Ok(header_lines(&self.header) + &body)
    }

    pub fn to_table(&self) -> String {
        let mut out = header_lines(&self.header);
        let _ = writeln!(
            out,
            "nfe {} with {} cached steps per layer vs nfe {} uncached; reference: uncached nfe {}",
            self.nfe, self.cached_count, self.reduced.nfe, self.nfe
        );
        let _ = writeln!(
            out,
            "{:<12} {:>4} {:>14} {:>10} {:>10} {:>10} {:>10}",
            "arm", "nfe", "compute/layer", "computes", "wall_ms", "rel_l2", "max_abs"
        );
        for a in [&self.cached, &self.reduced] {
            let _ = writeln!(
                out,
                "{:<12} {:>4} {:>14} {:>10} {:>10.3} {:>10.3e} {:>10.3e}",
                a.label,
                a.nfe,
                a.compute_steps_per_layer.first().copied().unwrap_or(0),
                a.sublayer_computes,
                a.mean_wall_ms,
                a.divergence.rel_l2,
                a.divergence.max_abs
            );
        }
        let _ = writeln!(
            out,
            "compute parity: {}   wall ratio cached/reduced: {:.3}",
            if self.compute_parity { "yes" } else { "NO" },
            self.wall_ratio
        );
        out
    }
}
