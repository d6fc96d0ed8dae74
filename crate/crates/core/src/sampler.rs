//! Euler integration of the flow-matching ODE over a sway-warped time grid,
//! with classifier-free guidance.

use alloc::string::String;
use alloc::vec::Vec;

use crate::cache::ScheduledCache;
use crate::error::{Error, Result};
use crate::model::{Branch, Dit, SublayerHook};
use crate::rng::{Purpose, Rng};
use crate::schedule::CacheSchedule;
use crate::tensor::Tensor;

/// Guidance combination used by [`cfg_velocity`], recorded in run stats.
pub const GUIDANCE_FORM: &str = "w*v_cond + (1-w)*v_uncond";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub nfe: usize,
    pub cfg_strength: f32,
    pub sway_coeff: f32,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            nfe: 32,
            cfg_strength: 2.0,
            sway_coeff: -1.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nfe == 0 {
            return Err(Error::Config("nfe must be at least 1".into()));
        }
        if !self.cfg_strength.is_finite() {
            return Err(Error::Domain {
                name: "cfg_strength",
                value: self.cfg_strength as f64,
                range: "finite values",
            });
        }
        if !(-1.0..=1.0).contains(&self.sway_coeff) {
            return Err(Error::Domain {
                name: "sway_coeff",
                value: self.sway_coeff as f64,
                range: "[-1, 1]",
            });
        }
        Ok(())
    }

    /// Gaussian starting point for sample `index` of this run.
    pub fn initial_noise(&self, shape: &[usize], index: u32) -> Tensor {
        Rng::substream(self.seed, Purpose::Noise, index).normal_tensor(shape, 1.0)
    }
}

/// `nfe + 1` times from 0 to 1: `t = u + s·(cos(πu/2) − 1 + u)` on the
/// uniform grid `u = i / nfe`.
pub fn sway_timesteps(nfe: usize, s: f32) -> Result<Vec<f64>> {
    if nfe == 0 {
        return Err(Error::Config("nfe must be at least 1".into()));
    }
    if !(-1.0..=1.0).contains(&s) {
        return Err(Error::Domain {
            name: "sway_coeff",
            value: s as f64,
            range: "[-1, 1]",
        });
    }
    let s = s as f64;
    Ok((0..=nfe)
        .map(|i| {
            if i == nfe {
                return 1.0;
            }
            let u = i as f64 / nfe as f64;
            u + s * (libm::cos(core::f64::consts::FRAC_PI_2 * u) - 1.0 + u)
        })
        .collect())
}

/// Guided velocity, evaluated as `w·v_cond + (1 − w)·v_uncond` so that
/// `w = 1` and `w = 0` return the respective branch exactly.
pub fn cfg_velocity(v_cond: &Tensor, v_uncond: &Tensor, w: f32) -> Result<Tensor> {
    Ok(v_cond.scale(w)?.axpy(1.0 - w, v_uncond)?)
}

/// Milliseconds since an arbitrary origin. The core crate has no clock of
/// its own; callers with `std` supply one.
pub trait Clock {
    fn now_ms(&self) -> f64;
}

/// Always reads 0.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoClock;

impl Clock for NoClock {
    fn now_ms(&self) -> f64 {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunStats {
    pub nfe: usize,
    /// Per layer (indexed by `LayerId::index`), steps at which it was computed.
    pub compute_steps_per_layer: Vec<usize>,
    pub cached_steps_per_layer: Vec<usize>,
    /// Sublayer evaluations over both guidance branches.
    pub sublayer_computes: usize,
    pub cache_hits: usize,
    /// Integration loop only.
    pub wall_ms: f64,
    pub seed: u64,
    pub cfg_strength: f32,
    pub sway_coeff: f32,
    pub guidance_form: &'static str,
    /// Set by callers that can hash the serialized schedule.
    pub schedule_fingerprint: Option<String>,
}

/// Runs the sampler with an arbitrary hook. Both guidance branches see the
/// same step index, so a schedule caches or computes a step for both.
pub fn euler_integrate_with_hook(
    model: &Dit,
    x0: &Tensor,
    cond: &Tensor,
    config: &SamplerConfig,
    hook: &mut dyn SublayerHook,
) -> Result<Tensor> {
    config.validate()?;
    let grid = sway_timesteps(config.nfe, config.sway_coeff)?;
    let mut x = x0.clone();
    for (i, pair) in grid.windows(2).enumerate() {
        let t = pair[0] as f32;
        let dt = (pair[1] - pair[0]) as f32;
        let v_cond = model.forward(&x, t, cond, Branch::Cond, i, hook)?;
        let v_uncond = model.forward(&x, t, cond, Branch::Uncond, i, hook)?;
        let v = cfg_velocity(&v_cond, &v_uncond, config.cfg_strength)?;
        x = x.axpy(dt, &v)?;
    }
    Ok(x)
}

/// Integrates from `x0` at t = 0 to t = 1, reusing sublayer outputs where
/// `schedule` says so. `None` computes everything.
pub fn euler_integrate(
    model: &Dit,
    x0: &Tensor,
    cond: &Tensor,
    config: &SamplerConfig,
    schedule: Option<&CacheSchedule>,
    clock: &dyn Clock,
) -> Result<(Tensor, RunStats)> {
    let depth = model.config.depth;
    if let Some(s) = schedule {
        if s.nfe != config.nfe {
            return Err(Error::NfeMismatch {
                schedule: s.nfe,
                sampler: config.nfe,
            });
        }
        if s.depth() != depth {
            return Err(Error::InvalidSchedule(alloc::format!(
                "schedule covers {} blocks, model has {depth}",
                s.depth()
            )));
        }
        s.validate()?;
    }
    let mut cache = ScheduledCache::new(schedule, depth);
    let start = clock.now_ms();
    let x = euler_integrate_with_hook(model, x0, cond, config, &mut cache)?;
    let wall_ms = clock.now_ms() - start;
    let state = &cache.state;
    let branches = Branch::BOTH.len();
    let stats = RunStats {
        nfe: config.nfe,
        compute_steps_per_layer: state.computes_per_layer().iter().map(|c| c / branches).collect(),
        cached_steps_per_layer: state.hits_per_layer().iter().map(|c| c / branches).collect(),
        sublayer_computes: state.computes(),
        cache_hits: state.hits(),
        wall_ms,
        seed: config.seed,
        cfg_strength: config.cfg_strength,
        sway_coeff: config.sway_coeff,
        guidance_form: GUIDANCE_FORM,
        schedule_fingerprint: None,
    };
    Ok((x, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn sway_grid_examples() {
        let g = sway_timesteps(4, 0.0).unwrap();
        assert_eq!(g, alloc::vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        for s in [-1.0, -0.3, 0.5, 1.0] {
            let g = sway_timesteps(7, s).unwrap();
            assert_eq!(g[0], 0.0);
            assert_eq!(g[7], 1.0);
        }
        let g = sway_timesteps(2, -1.0).unwrap();
        let want = 1.0 - core::f64::consts::SQRT_2 / 2.0;
        assert!((g[1] - want).abs() < 1e-12, "{}", g[1]);
        assert!(sway_timesteps(4, 1.5).is_err());
        assert!(sway_timesteps(0, 0.0).is_err());
    }

    #[test]
    fn cfg_examples() {
        let t = |v: &[f32]| Tensor::from_vec(&[v.len()], v.to_vec()).unwrap();
        let c = t(&[0.3, -1.7, 2.9]);
        let u = t(&[1.1, 0.4, -0.2]);
        assert_eq!(cfg_velocity(&c, &u, 1.0).unwrap(), c);
        assert_eq!(cfg_velocity(&c, &u, 0.0).unwrap(), u);
        assert_eq!(cfg_velocity(&t(&[2.0]), &t(&[1.0]), 2.0).unwrap().data(), &[3.0]);
        assert!(cfg_velocity(&c, &t(&[1.0]), 2.0).is_err());
    }

    #[test]
    fn single_step_spans_unit_interval() {
        let cfg = ModelConfig {
            depth: 1,
            width: 8,
            heads: 2,
            ffn_mult: 2,
            seq_len: 4,
            in_dim: 2,
        };
        let model = Dit::init(cfg, 1).unwrap();
        let sampler = SamplerConfig { nfe: 1, ..SamplerConfig::default() };
        let x0 = sampler.initial_noise(&cfg.sample_shape(), 0);
        let cond = Rng::new(4).normal_tensor(&cfg.sample_shape(), 1.0);
        let (x1, stats) = euler_integrate(&model, &x0, &cond, &sampler, None, &NoClock).unwrap();
        let vc = model.forward_plain(&x0, 0.0, &cond, Branch::Cond).unwrap();
        let vu = model.forward_plain(&x0, 0.0, &cond, Branch::Uncond).unwrap();
        let want = x0.axpy(1.0, &cfg_velocity(&vc, &vu, 2.0).unwrap()).unwrap();
        assert_eq!(x1, want);
        assert_eq!(stats.sublayer_computes, 4);
        assert_eq!(stats.cache_hits, 0);
    }

    #[test]
    fn config_validation() {
        assert!(SamplerConfig::default().validate().is_ok());
        assert!(SamplerConfig { nfe: 0, ..Default::default() }.validate().is_err());
        assert!(SamplerConfig { sway_coeff: -1.5, ..Default::default() }.validate().is_err());
    }
}
