//! Uncached calibration runs reduced to an [`ErrorProfile`].

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{Branch, Dit, LayerId, SublayerHook};
use crate::sampler::{euler_integrate_with_hook, SamplerConfig};
use crate::schedule::{l1_relative_error, ErrorProfile};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaptureBranch {
    Cond,
    Uncond,
    /// Errors of both branches, averaged.
    Both,
}

impl CaptureBranch {
    fn includes(self, branch: Branch) -> bool {
        match self {
            CaptureBranch::Cond => branch == Branch::Cond,
            CaptureBranch::Uncond => branch == Branch::Uncond,
            CaptureBranch::Both => true,
        }
    }

    fn branch_count(self) -> usize {
        match self {
            CaptureBranch::Both => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationConfig {
    pub sample_count: usize,
    pub sampler: SamplerConfig,
    pub capture_branch: CaptureBranch,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            sample_count: 10,
            sampler: SamplerConfig::default(),
            capture_branch: CaptureBranch::Cond,
        }
    }
}

/// Computes every sublayer and keeps only the previous step's output of each
/// captured `(layer, branch)`, folding each new output into the running
/// transition errors.
struct ErrorTap {
    capture: CaptureBranch,
    sample: usize,
    prev: Vec<Option<Tensor>>,
    /// `[layer][transition]`, summed over captured branches.
    sums: Vec<Vec<f64>>,
}

impl ErrorTap {
    fn new(depth: usize, nfe: usize, capture: CaptureBranch, sample: usize) -> Self {
        Self {
            capture,
            sample,
            prev: vec![None; 4 * depth],
            sums: vec![vec![0.0; nfe - 1]; 2 * depth],
        }
    }
}

impl SublayerHook for ErrorTap {
    fn reuse(&mut self, _: usize, _: LayerId, _: Branch) -> Result<Option<&Tensor>> {
        Ok(None)
    }

    fn computed(&mut self, step: usize, layer: LayerId, branch: Branch, output: &Tensor) -> Result<()> {
        if !self.capture.includes(branch) {
            return Ok(());
        }
        let slot = 2 * layer.index() + branch as usize;
        if step > 0 {
            let prev = self.prev[slot].as_ref().expect("every step computes every layer");
            let e = l1_relative_error(output, prev).map_err(|e| match e {
                Error::DegenerateDenominator { .. } => Error::DegenerateCalibration {
                    sample: self.sample,
                    layer,
                    step,
                },
                other => other,
            })?;
            self.sums[layer.index()][step - 1] += e;
        }
        self.prev[slot] = Some(output.clone());
        Ok(())
    }
}

/// Transition errors of one calibration sample, `[layer][transition]`,
/// already averaged over the captured branches. `sample` only labels errors.
pub fn sample_errors(
    model: &Dit,
    noise: &Tensor,
    cond: &Tensor,
    config: &CalibrationConfig,
    sample: usize,
) -> Result<Vec<Vec<f64>>> {
    if config.sampler.nfe < 2 {
        return Err(Error::Config("calibration needs nfe >= 2".into()));
    }
    let mut tap = ErrorTap::new(model.config.depth, config.sampler.nfe, config.capture_branch, sample);
    euler_integrate_with_hook(model, noise, cond, &config.sampler, &mut tap)?;
    let n = config.capture_branch.branch_count() as f64;
    let mut sums = tap.sums;
    for row in &mut sums {
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok(sums)
}

/// Averages per-sample errors. Each entry is summed in ascending order of
/// value, so the result does not depend on sample order.
pub fn reduce_sample_errors(nfe: usize, per_sample: &[Vec<Vec<f64>>]) -> Result<ErrorProfile> {
    let first = per_sample
        .first()
        .ok_or_else(|| Error::Config("calibration needs at least one sample".into()))?;
    let layers = first.len();
    let mut errors = vec![vec![0.0f64; nfe - 1]; layers];
    let mut column = Vec::with_capacity(per_sample.len());
    for (l, row) in errors.iter_mut().enumerate() {
        for (j, out) in row.iter_mut().enumerate() {
            column.clear();
            column.extend(per_sample.iter().map(|s| s[l][j]));
            column.sort_by(f64::total_cmp);
            *out = column.iter().sum::<f64>() / per_sample.len() as f64;
        }
    }
    let profile = ErrorProfile {
        nfe,
        sample_count: per_sample.len(),
        errors,
    };
    profile.validate()?;
    Ok(profile)
}

/// Runs every `(noise, cond)` sample uncached and averages the
/// consecutive-step relative errors of each sublayer's output.
pub fn calibrate(model: &Dit, samples: &[(Tensor, Tensor)], config: &CalibrationConfig) -> Result<ErrorProfile> {
    if samples.is_empty() {
        return Err(Error::Config("calibration needs at least one sample".into()));
    }
    let per_sample = samples
        .iter()
        .enumerate()
        .map(|(i, (noise, cond))| sample_errors(model, noise, cond, config, i))
        .collect::<Result<Vec<_>>>()?;
    reduce_sample_errors(config.sampler.nfe, &per_sample)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::rng::Rng;

    fn setup() -> (Dit, Vec<(Tensor, Tensor)>) {
        let cfg = ModelConfig {
            depth: 2,
            width: 8,
            heads: 2,
            ffn_mult: 2,
            seq_len: 6,
            in_dim: 3,
        };
        let model = Dit::init(cfg, 3).unwrap();
        let samples = (0..3)
            .map(|i| {
                let mut r = Rng::new(100 + i);
                (
                    r.normal_tensor(&cfg.sample_shape(), 1.0),
                    r.normal_tensor(&cfg.sample_shape(), 1.0),
                )
            })
            .collect();
        (model, samples)
    }

    fn config(nfe: usize) -> CalibrationConfig {
        CalibrationConfig {
            sample_count: 1,
            sampler: SamplerConfig { nfe, ..SamplerConfig::default() },
            capture_branch: CaptureBranch::Cond,
        }
    }

    #[test]
    fn two_step_profile_shape() {
        let (model, samples) = setup();
        let p = calibrate(&model, &samples[..1], &config(2)).unwrap();
        assert_eq!(p.errors.len(), 4);
        for row in &p.errors {
            assert_eq!(row.len(), 1);
            assert!(row[0] >= 0.0);
        }
        assert_eq!(p.sample_count, 1);
    }

    #[test]
    fn duplicated_sample_changes_nothing() {
        let (model, samples) = setup();
        let once = calibrate(&model, &samples[..1], &config(6)).unwrap();
        let twice = calibrate(&model, &[samples[0].clone(), samples[0].clone()], &config(6)).unwrap();
        assert_eq!(once.errors, twice.errors);
    }

    #[test]
    fn sample_order_does_not_matter() {
        let (model, samples) = setup();
        let a = calibrate(&model, &samples, &config(5)).unwrap();
        let reversed: Vec<_> = samples.iter().rev().cloned().collect();
        let b = calibrate(&model, &reversed, &config(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn both_branches_average() {
        let (model, samples) = setup();
        let mut cfg = config(4);
        let cond = calibrate(&model, &samples[..1], &cfg).unwrap();
        cfg.capture_branch = CaptureBranch::Uncond;
        let uncond = calibrate(&model, &samples[..1], &cfg).unwrap();
        cfg.capture_branch = CaptureBranch::Both;
        let both = calibrate(&model, &samples[..1], &cfg).unwrap();
        for l in 0..4 {
            for j in 0..3 {
                let want = (cond.errors[l][j] + uncond.errors[l][j]) / 2.0;
                assert!((both.errors[l][j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dead_layer_is_reported_with_context() {
        let (mut model, samples) = setup();
        // Zero gates make the block-0 attention output identically zero.
        model.blocks[0].modulation.w = Tensor::zeros(model.blocks[0].modulation.w.dims());
        model.blocks[0].modulation.b = Tensor::zeros(model.blocks[0].modulation.b.dims());
        let err = calibrate(&model, &samples[..1], &config(3)).unwrap_err();
        assert!(matches!(
            err,
            Error::DegenerateCalibration { sample: 0, step: 1, .. }
        ), "{err:?}");
    }

    #[test]
    fn rejects_empty_and_short_runs() {
        let (model, samples) = setup();
        assert!(calibrate(&model, &[], &config(4)).is_err());
        assert!(calibrate(&model, &samples, &config(1)).is_err());
    }
}
