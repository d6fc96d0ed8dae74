//! Input sets, parallel calibration and timed sampling.

use anyhow::Result;
use rayon::prelude::*;
use smoothdit_core::calibrate::{reduce_sample_errors, sample_errors};
use smoothdit_core::toy::{sample_inputs, SignalFamily};
use smoothdit_core::{
    euler_integrate, CacheSchedule, CalibrationConfig, Dit, ErrorProfile, Purpose, RunStats, SamplerConfig, Tensor,
};

use crate::clock::WallClock;

pub type Input = (Tensor, Tensor);

pub fn calibration_inputs(model: &Dit, seed: u64, count: usize) -> Vec<Input> {
    sample_inputs(seed, Purpose::Calibration, count, &model.config, &SignalFamily::default())
}

/// Evaluation inputs. Their stream is disjoint from training and
/// calibration for every seed.
pub fn eval_inputs(model: &Dit, seed: u64, count: usize) -> Vec<Input> {
    sample_inputs(seed, Purpose::Bench, count, &model.config, &SignalFamily::default())
}

pub fn seed_labels(seed: u64, stream: &str, count: usize) -> Vec<String> {
    (0..count).map(|i| format!("{seed}:{stream}:{i}")).collect()
}

/// Runs `f` on a pool of `threads` workers, or on the global pool.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        Some(n) => Ok(rayon::ThreadPoolBuilder::new().num_threads(n).build()?.install(f)),
        None => Ok(f()),
    }
}

/// Same result as [`smoothdit_core::calibrate`], with samples run in
/// parallel.
pub fn calibrate_parallel(model: &Dit, inputs: &[Input], config: &CalibrationConfig) -> Result<ErrorProfile> {
    let per_sample = inputs
        .par_iter()
        .enumerate()
        .map(|(i, (noise, cond))| sample_errors(model, noise, cond, config, i))
        .collect::<smoothdit_core::Result<Vec<_>>>()?;
    Ok(reduce_sample_errors(config.sampler.nfe, &per_sample)?)
}

pub fn timed_run(
    model: &Dit,
    input: &Input,
    sampler: &SamplerConfig,
    schedule: Option<&CacheSchedule>,
) -> Result<(Tensor, RunStats)> {
    Ok(euler_integrate(model, &input.0, &input.1, sampler, schedule, &WallClock::new())?)
}

/// Final states for every input, computed in parallel. Order follows `inputs`.
pub fn outputs(
    model: &Dit,
    inputs: &[Input],
    sampler: &SamplerConfig,
    schedule: Option<&CacheSchedule>,
) -> Result<Vec<(Tensor, RunStats)>> {
    inputs
        .par_iter()
        .map(|input| timed_run(model, input, sampler, schedule))
        .collect()
}

/// Mean integration-loop time per arm on the calling thread. Every arm is
/// run once as warm-up, then the arms take turns for `runs` rounds over
/// `inputs` so drift in machine load affects them alike.
pub fn interleaved_wall_ms(
    model: &Dit,
    inputs: &[Input],
    arms: &[(SamplerConfig, Option<&CacheSchedule>)],
    runs: usize,
) -> Result<Vec<f64>> {
    let mut totals = vec![0.0; arms.len()];
    for (sampler, schedule) in arms {
        timed_run(model, &inputs[0], sampler, *schedule)?;
    }
    for r in 0..runs {
        let input = &inputs[r % inputs.len()];
        for (total, (sampler, schedule)) in totals.iter_mut().zip(arms) {
            *total += timed_run(model, input, sampler, *schedule)?.1.wall_ms;
        }
    }
    Ok(totals.into_iter().map(|t| t / runs.max(1) as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use smoothdit_core::{calibrate, ModelConfig};

    #[test]
    fn parallel_calibration_equals_sequential() {
        let cfg = ModelConfig {
            depth: 2,
            width: 16,
            heads: 2,
            ffn_mult: 2,
            seq_len: 8,
            in_dim: 3,
        };
        let model = Dit::init(cfg, 2).unwrap();
        let inputs = calibration_inputs(&model, 3, 5);
        let config = CalibrationConfig {
            sampler: SamplerConfig { nfe: 6, ..Default::default() },
            ..Default::default()
        };
        let seq = calibrate(&model, &inputs, &config).unwrap();
        let par = with_threads(Some(3), || calibrate_parallel(&model, &inputs, &config)).unwrap().unwrap();
        assert_eq!(seq, par);
    }

    #[test]
    fn eval_and_calibration_sets_differ() {
        let model = Dit::init(ModelConfig::default(), 0).unwrap();
        let a = calibration_inputs(&model, 1, 2);
        let b = eval_inputs(&model, 1, 2);
        assert_ne!(a[0].1, b[0].1);
        assert_eq!(eval_inputs(&model, 1, 1)[0], b[0]);
    }
}
