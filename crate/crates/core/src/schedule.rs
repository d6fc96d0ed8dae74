//! Calibration error profiles and the cache schedules derived from them.
//!
//! Indexing convention: `errors[j]` is the relative change of a layer's
//! output between steps `j` and `j + 1`, and gates caching of step `j + 1`.
//! Step 0 has no predecessor and is always computed.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{LayerId, LayerKind};
use crate::tensor::Tensor;

pub const DEFAULT_MAX_CONSECUTIVE: usize = 3;

/// How per-layer masks are derived from the error profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    /// Every layer thresholds its own error curve.
    Independent,
    /// Attention layers use their own curves; FFN layers always compute.
    AttnOnly,
    /// FFN layers use their own curves; attention layers always compute.
    FfnOnly,
    /// Each block's attention mask is applied to both of its sublayers.
    UnifiedAttnBase,
    /// Each block's FFN mask is applied to both of its sublayers.
    UnifiedFfnBase,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Independent,
        Strategy::AttnOnly,
        Strategy::FfnOnly,
        Strategy::UnifiedAttnBase,
        Strategy::UnifiedFfnBase,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Independent => "independent",
            Strategy::AttnOnly => "attn-only",
            Strategy::FfnOnly => "ffn-only",
            Strategy::UnifiedAttnBase => "unified-attn",
            Strategy::UnifiedFfnBase => "unified-ffn",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}")))
    }
}

/// Averaged consecutive-step relative errors for every sublayer.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorProfile {
    pub nfe: usize,
    pub sample_count: usize,
    /// Indexed by [`LayerId::index`]; each entry has `nfe - 1` values.
    pub errors: Vec<Vec<f64>>,
}

impl ErrorProfile {
    pub fn depth(&self) -> usize {
        self.errors.len() / 2
    }

    pub fn layer(&self, id: LayerId) -> &[f64] {
        &self.errors[id.index()]
    }

    pub fn validate(&self) -> Result<()> {
        if self.nfe < 2 {
            return Err(Error::InvalidProfile(format!(
                "nfe {} leaves no step transitions",
                self.nfe
            )));
        }
        if self.errors.is_empty() || !self.errors.len().is_multiple_of(2) {
            return Err(Error::InvalidProfile(format!(
                "expected 2 × depth layers, got {}",
                self.errors.len()
            )));
        }
        for (i, row) in self.errors.iter().enumerate() {
            let id = LayerId::from_index(i);
            if row.len() != self.nfe - 1 {
                return Err(Error::InvalidProfile(format!(
                    "layer {id} has {} transitions, expected {}",
                    row.len(),
                    self.nfe - 1
                )));
            }
            if let Some(v) = row.iter().find(|v| !v.is_finite() || **v < 0.0) {
                return Err(Error::InvalidProfile(format!("layer {id} has invalid error {v}")));
            }
        }
        if self.sample_count == 0 {
            return Err(Error::InvalidProfile("sample_count is 0".into()));
        }
        Ok(())
    }

    /// Replaces every block's curve with the mean curve of its layer kind,
    /// so all blocks end up with the same schedule.
    pub fn pooled_by_kind(&self) -> ErrorProfile {
        let depth = self.depth();
        let mut errors = self.errors.clone();
        for kind in [LayerKind::Attn, LayerKind::Ffn] {
            let mut mean = vec![0.0f64; self.nfe - 1];
            for b in 0..depth {
                for (m, v) in mean.iter_mut().zip(self.layer(LayerId::new(b, kind))) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= depth as f64);
            for b in 0..depth {
                errors[LayerId::new(b, kind).index()] = mean.clone();
            }
        }
        ErrorProfile {
            nfe: self.nfe,
            sample_count: self.sample_count,
            errors,
        }
    }
}

/// `Σ|curr − prev| / Σ|prev|`, accumulated in `f64`.
pub fn l1_relative_error(curr: &Tensor, prev: &Tensor) -> Result<f64> {
    if curr.shape() != prev.shape() {
        return Err(crate::error::TensorError::ShapeMismatch {
            op: "l1_relative_error",
            lhs: curr.shape().clone(),
            rhs: prev.shape().clone(),
        }
        .into());
    }
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for (&c, &p) in curr.data().iter().zip(prev.data()) {
        num += (c as f64 - p as f64).abs();
        den += (p as f64).abs();
    }
    if den < 1e-12 {
        return Err(Error::DegenerateDenominator { norm: den });
    }
    Ok(num / den)
}

/// Thresholds one layer's error curve into a mask of length
/// `errors.len() + 1` (`true` = reuse the cached output).
///
/// Step `j + 1` is a candidate when `errors[j] < alpha`. Candidates are
/// accepted left to right; after `max_consecutive` cached steps in a row the
/// next step is forced to compute.
pub fn build_layer_mask(errors: &[f64], alpha: f64, max_consecutive: usize) -> Result<Vec<bool>> {
    if errors.is_empty() {
        return Err(Error::InvalidProfile("empty error sequence".into()));
    }
    if alpha.is_nan() || alpha <= 0.0 {
        return Err(Error::Domain {
            name: "alpha",
            value: alpha,
            range: "(0, ∞)",
        });
    }
    if max_consecutive == 0 {
        return Err(Error::Config("max_consecutive must be at least 1".into()));
    }
    let mut mask = vec![false; errors.len() + 1];
    let mut run = 0;
    for (j, &e) in errors.iter().enumerate() {
        if e < alpha && run < max_consecutive {
            mask[j + 1] = true;
            run += 1;
        } else {
            run = 0;
        }
    }
    Ok(mask)
}

/// Per-layer compute/cache plan over the sampler's steps.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheSchedule {
    pub nfe: usize,
    pub alpha: f64,
    pub strategy: Strategy,
    pub max_consecutive: usize,
    /// Indexed by [`LayerId::index`]; `true` = cached at that step.
    pub masks: Vec<Vec<bool>>,
}

impl CacheSchedule {
    /// Every layer computes at every step.
    pub fn all_compute(nfe: usize, depth: usize) -> Self {
        Self {
            nfe,
            alpha: 0.0,
            strategy: Strategy::UnifiedAttnBase,
            max_consecutive: DEFAULT_MAX_CONSECUTIVE,
            masks: vec![vec![false; nfe]; 2 * depth],
        }
    }

    pub fn depth(&self) -> usize {
        self.masks.len() / 2
    }

    pub fn is_cached(&self, layer: LayerId, step: usize) -> bool {
        self.masks[layer.index()][step]
    }

    pub fn mask(&self, layer: LayerId) -> &[bool] {
        &self.masks[layer.index()]
    }

    pub fn cached_steps(&self, layer: LayerId) -> usize {
        self.mask(layer).iter().filter(|&&c| c).count()
    }

    pub fn validate(&self) -> Result<()> {
        if self.nfe == 0 {
            return Err(Error::InvalidSchedule("nfe is 0".into()));
        }
        if self.masks.is_empty() || !self.masks.len().is_multiple_of(2) {
            return Err(Error::InvalidSchedule(format!(
                "expected 2 × depth masks, got {}",
                self.masks.len()
            )));
        }
        if self.max_consecutive == 0 {
            return Err(Error::InvalidSchedule("max_consecutive is 0".into()));
        }
        for (i, mask) in self.masks.iter().enumerate() {
            let id = LayerId::from_index(i);
            if mask.len() != self.nfe {
                return Err(Error::InvalidSchedule(format!(
                    "mask {id} has length {}, expected {}",
                    mask.len(),
                    self.nfe
                )));
            }
            if mask[0] {
                return Err(Error::InvalidSchedule(format!("mask {id} caches step 0")));
            }
            if longest_run(mask) > self.max_consecutive {
                return Err(Error::InvalidSchedule(format!(
                    "mask {id} caches more than {} consecutive steps",
                    self.max_consecutive
                )));
            }
        }
        let tied = matches!(self.strategy, Strategy::UnifiedAttnBase | Strategy::UnifiedFfnBase);
        if tied {
            for b in 0..self.depth() {
                if self.mask(LayerId::new(b, LayerKind::Attn)) != self.mask(LayerId::new(b, LayerKind::Ffn)) {
                    return Err(Error::InvalidSchedule(format!(
                        "{} schedule has differing masks in block {b}",
                        self.strategy
                    )));
                }
            }
        }
        Ok(())
    }

    /// Cached-step count shared by every layer, if there is one.
    pub fn uniform_cached_steps(&self) -> Option<usize> {
        let first = self.cached_steps(LayerId::from_index(0));
        LayerId::all(self.depth())
            .all(|id| self.cached_steps(id) == first)
            .then_some(first)
    }
}

/// Length of the longest run of consecutive cached steps.
pub fn longest_run(mask: &[bool]) -> usize {
    let mut best = 0;
    let mut run = 0;
    for &c in mask {
        run = if c { run + 1 } else { 0 };
        best = best.max(run);
    }
    best
}

pub fn apply_strategy(
    profile: &ErrorProfile,
    alpha: f64,
    max_consecutive: usize,
    strategy: Strategy,
) -> Result<CacheSchedule> {
    profile.validate()?;
    let depth = profile.depth();
    let own = |id: LayerId| build_layer_mask(profile.layer(id), alpha, max_consecutive);
    let compute = vec![false; profile.nfe];
    let mut masks = Vec::with_capacity(2 * depth);
    for b in 0..depth {
        let attn = LayerId::new(b, LayerKind::Attn);
        let ffn = LayerId::new(b, LayerKind::Ffn);
        let (a, f) = match strategy {
            Strategy::Independent => (own(attn)?, own(ffn)?),
            Strategy::AttnOnly => (own(attn)?, compute.clone()),
            Strategy::FfnOnly => (compute.clone(), own(ffn)?),
            Strategy::UnifiedAttnBase => {
                let m = own(attn)?;
                (m.clone(), m)
            }
            Strategy::UnifiedFfnBase => {
                let m = own(ffn)?;
                (m.clone(), m)
            }
        };
        masks.push(a);
        masks.push(f);
    }
    Ok(CacheSchedule {
        nfe: profile.nfe,
        alpha,
        strategy,
        max_consecutive,
        masks,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleStats {
    pub cached_per_layer: Vec<usize>,
    pub compute_per_layer: Vec<usize>,
    /// Computed (layer, step) pairs over all pairs.
    pub compute_fraction: f64,
}

impl ScheduleStats {
    pub fn cached_fraction(&self) -> f64 {
        1.0 - self.compute_fraction
    }
}

pub fn schedule_stats(schedule: &CacheSchedule) -> ScheduleStats {
    let cached: Vec<usize> = LayerId::all(schedule.depth())
        .map(|id| schedule.cached_steps(id))
        .collect();
    let compute: Vec<usize> = cached.iter().map(|c| schedule.nfe - c).collect();
    let total = (schedule.nfe * cached.len()) as f64;
    ScheduleStats {
        compute_fraction: compute.iter().sum::<usize>() as f64 / total,
        cached_per_layer: cached,
        compute_per_layer: compute,
    }
}

/// Thresholds that separate the distinct error values of the layers the
/// strategy reads, in increasing order.
fn candidate_alphas(profile: &ErrorProfile) -> Vec<f64> {
    let mut values: Vec<f64> = profile.errors.iter().flatten().copied().collect();
    values.sort_by(f64::total_cmp);
    values.dedup();
    let mut out = Vec::with_capacity(values.len() + 1);
    match values.first() {
        Some(&v) if v > 0.0 => out.push(v / 2.0),
        _ => {}
    }
    for pair in values.windows(2) {
        out.push(0.5 * (pair[0] + pair[1]));
    }
    if let Some(&last) = values.last() {
        out.push(last * 1.5 + 1e-9);
    }
    out
}

/// The threshold whose schedule caches the fraction of (layer, step) pairs
/// closest to `target`. Ties go to the smaller threshold.
pub fn alpha_for_cached_fraction(
    profile: &ErrorProfile,
    target: f64,
    max_consecutive: usize,
    strategy: Strategy,
) -> Result<f64> {
    profile.validate()?;
    if !(0.0..=1.0).contains(&target) {
        return Err(Error::Domain {
            name: "target fraction",
            value: target,
            range: "[0, 1]",
        });
    }
    let mut best: Option<(f64, f64)> = None;
    for alpha in candidate_alphas(profile) {
        let s = apply_strategy(profile, alpha, max_consecutive, strategy)?;
        let gap = (schedule_stats(&s).cached_fraction() - target).abs();
        if best.is_none_or(|(g, _)| gap < g) {
            best = Some((gap, alpha));
        }
    }
    best.map(|(_, a)| a)
        .ok_or_else(|| Error::InvalidProfile("profile has no error values".into()))
}

/// The smallest threshold at which every layer caches exactly `count` steps.
pub fn alpha_for_cached_count(
    profile: &ErrorProfile,
    count: usize,
    max_consecutive: usize,
    strategy: Strategy,
) -> Result<f64> {
    profile.validate()?;
    for alpha in candidate_alphas(profile) {
        let s = apply_strategy(profile, alpha, max_consecutive, strategy)?;
        if s.uniform_cached_steps() == Some(count) {
            return Ok(alpha);
        }
    }
    Err(Error::InvalidProfile(format!(
        "no threshold gives exactly {count} cached steps on every layer with strategy {strategy}"
    )))
}
