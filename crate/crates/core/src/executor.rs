use crate::error::{Error, Result, TensorError};
use crate::model::Dit;
use crate::sampler::{euler_integrate, Clock, RunStats, SamplerConfig};
use crate::schedule::CacheSchedule;
use crate::tensor::Tensor;

/// Sampling under a cache schedule.
pub fn cached_infer(
    model: &Dit,
    noise: &Tensor,
    cond: &Tensor,
    config: &SamplerConfig,
    schedule: &CacheSchedule,
    clock: &dyn Clock,
) -> Result<(Tensor, RunStats)> {
    euler_integrate(model, noise, cond, config, Some(schedule), clock)
}

/// Output-space distance between a cached result and its uncached reference.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Divergence {
    pub rel_l2: f64,
    pub rel_l1: f64,
    pub max_abs: f64,
}

pub fn divergence(x_cached: &Tensor, x_ref: &Tensor) -> Result<Divergence> {
    if x_cached.shape() != x_ref.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "divergence",
            lhs: x_cached.shape().clone(),
            rhs: x_ref.shape().clone(),
        }
        .into());
    }
    let (mut d1, mut d2, mut r1, mut r2, mut max) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in x_cached.data().iter().zip(x_ref.data()) {
        let d = (a as f64 - b as f64).abs();
        let r = (b as f64).abs();
        d1 += d;
        d2 += d * d;
        r1 += r;
        r2 += r * r;
        max = max.max(d);
    }
    if r1 < 1e-12 {
        return Err(Error::DegenerateDenominator { norm: r1 });
    }
    Ok(Divergence {
        rel_l2: libm::sqrt(d2) / libm::sqrt(r2),
        rel_l1: d1 / r1,
        max_abs: max,
    })
}
