//! Synthetic sinusoid data and flow-matching training, so the backbone has
//! real denoising dynamics to calibrate against.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::grad::{example_loss, loss_and_grad, mse, CfmExample};
use crate::model::{Branch, Dit, ModelConfig};
use crate::rng::{Purpose, Rng};
use crate::tensor::Tensor;

/// Parameters of the sinusoid family each channel is drawn from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignalFamily {
    pub min_components: u32,
    pub max_components: u32,
    pub amplitude: (f32, f32),
    /// Cycles over the whole sequence.
    pub frequency: (f32, f32),
}

impl Default for SignalFamily {
    fn default() -> Self {
        Self {
            min_components: 1,
            max_components: 3,
            amplitude: (0.5, 1.5),
            frequency: (0.5, 2.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Component {
    pub amplitude: f32,
    pub frequency: f32,
    pub phase: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToySample {
    pub x1: Tensor,
    /// `x1` with the second half of the sequence zeroed.
    pub cond: Tensor,
    /// Generating components per channel.
    pub components: Vec<Vec<Component>>,
}

/// Draws one `seq_len × in_dim` sample: each channel is a sum of random
/// sinusoids over the sequence axis.
pub fn gen_sample(rng: &mut Rng, seq_len: usize, in_dim: usize, family: &SignalFamily) -> ToySample {
    let mut data = vec![0.0f32; seq_len * in_dim];
    let mut components = Vec::with_capacity(in_dim);
    for c in 0..in_dim {
        let k = rng.int_range(family.min_components, family.max_components);
        let comps: Vec<Component> = (0..k)
            .map(|_| Component {
                amplitude: rng.uniform_range(family.amplitude.0, family.amplitude.1),
                frequency: rng.uniform_range(family.frequency.0, family.frequency.1),
                phase: rng.uniform_range(0.0, core::f32::consts::TAU),
            })
            .collect();
        for s in 0..seq_len {
            let pos = s as f32 / seq_len as f32;
            data[s * in_dim + c] = comps
                .iter()
                .map(|p| p.amplitude * libm::sinf(core::f32::consts::TAU * p.frequency * pos + p.phase))
                .sum();
        }
        components.push(comps);
    }
    let mut cond = data.clone();
    cond[(seq_len / 2) * in_dim..].fill(0.0);
    ToySample {
        x1: Tensor::from_vec(&[seq_len, in_dim], data).expect("finite"),
        cond: Tensor::from_vec(&[seq_len, in_dim], cond).expect("finite"),
        components,
    }
}

/// Linear-path flow-matching example: `x_t = (1−t)·x0 + t·x1`, target `x1 − x0`.
pub fn cfm_example(x1: &Tensor, cond: &Tensor, branch: Branch, rng: &mut Rng) -> Result<CfmExample> {
    let t = rng.uniform();
    let x0 = rng.normal_tensor(x1.dims(), 1.0);
    Ok(CfmExample {
        x_t: x0.scale(1.0 - t)?.axpy(t, x1)?,
        t,
        cond: cond.clone(),
        branch,
        target: x1.sub(&x0)?,
    })
}

/// Flow-matching loss of one sample on the conditional branch.
pub fn cfm_loss(model: &Dit, x1: &Tensor, cond: &Tensor, rng: &mut Rng) -> Result<f64> {
    example_loss(model, &cfm_example(x1, cond, Branch::Cond, rng)?)
}

/// Loss of a model whose velocity output is identically zero.
pub fn zero_model_loss(x1: &Tensor, rng: &mut Rng) -> Result<f64> {
    let ex = cfm_example(x1, x1, Branch::Cond, rng)?;
    Ok(mse(&Tensor::zeros_like(&ex.target), &ex.target))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f32, beta2: f32, eps: f32 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyTaskConfig {
    pub train_steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub optimizer: Optimizer,
    /// Seed for data, noise and timestep draws. Model init uses its own seed.
    pub data_seed: u64,
    /// Fraction of training examples routed through the unconditional branch.
    pub cond_drop: f32,
    pub family: SignalFamily,
    pub heldout_size: usize,
    /// Held-out loss is evaluated every this many steps (and at the end).
    pub eval_every: usize,
}

impl Default for ToyTaskConfig {
    fn default() -> Self {
        Self {
            train_steps: 2000,
            batch: 4,
            lr: 2e-3,
            optimizer: Optimizer::adam(),
            data_seed: 1,
            cond_drop: 0.2,
            family: SignalFamily::default(),
            heldout_size: 32,
            eval_every: 100,
        }
    }
}

impl ToyTaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_steps == 0 || self.batch == 0 || self.heldout_size == 0 || self.eval_every == 0 {
            return Err(Error::Config(
                "train_steps, batch, heldout_size and eval_every must be at least 1".into(),
            ));
        }
        if self.lr.is_nan() || self.lr < 0.0 || !(0.0..=1.0).contains(&self.cond_drop) {
            return Err(Error::Config("lr must be >= 0 and cond_drop in [0, 1]".into()));
        }
        let f = &self.family;
        if f.min_components == 0 || f.min_components > f.max_components || f.amplitude.0 > f.amplitude.1 {
            return Err(Error::Config("invalid signal family".into()));
        }
        Ok(())
    }
}

/// Fixed held-out examples drawn from a sub-stream no training step touches.
pub fn heldout_set(model: &Dit, config: &ToyTaskConfig) -> Result<Vec<CfmExample>> {
    let mut rng = Rng::substream(config.data_seed, Purpose::Eval, 0);
    let [seq, dim] = model.config.sample_shape();
    (0..config.heldout_size)
        .map(|_| {
            let s = gen_sample(&mut rng, seq, dim, &config.family);
            cfm_example(&s.x1, &s.cond, Branch::Cond, &mut rng)
        })
        .collect()
}

/// `count` sampler inputs `(noise, cond)`. Sample `i` is drawn from the
/// `(seed, purpose, i)` sub-stream, so sets for different purposes never
/// overlap and a prefix of a larger set equals the smaller set.
pub fn sample_inputs(
    seed: u64,
    purpose: Purpose,
    count: usize,
    model: &ModelConfig,
    family: &SignalFamily,
) -> Vec<(Tensor, Tensor)> {
    let [seq, dim] = model.sample_shape();
    (0..count)
        .map(|i| {
            let mut rng = Rng::substream(seed, purpose, i as u32);
            let s = gen_sample(&mut rng, seq, dim, family);
            let noise = rng.normal_tensor(&[seq, dim], 1.0);
            (noise, s.cond)
        })
        .collect()
}

pub fn mean_loss(model: &Dit, examples: &[CfmExample]) -> Result<f64> {
    let mut total = 0.0;
    for ex in examples {
        total += example_loss(model, ex)?;
    }
    Ok(total / examples.len() as f64)
}

/// Training batch for `step`, from its own sub-stream.
pub fn training_batch(model: &Dit, config: &ToyTaskConfig, step: usize) -> Result<Vec<CfmExample>> {
    let mut rng = Rng::substream(config.data_seed, Purpose::Train, step as u32);
    let [seq, dim] = model.config.sample_shape();
    (0..config.batch)
        .map(|_| {
            let s = gen_sample(&mut rng, seq, dim, &config.family);
            let branch = if rng.uniform() < config.cond_drop { Branch::Uncond } else { Branch::Cond };
            cfm_example(&s.x1, &s.cond, branch, &mut rng)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossPoint {
    pub step: usize,
    pub train_loss: f64,
    /// Present on evaluation steps.
    pub heldout_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub model: Dit,
    pub curve: Vec<LossPoint>,
    pub initial_heldout: f64,
    pub final_heldout: f64,
}

/// Training stopped on a non-finite loss. `last_good` holds the weights from
/// before the failing update.
#[derive(Debug, Clone)]
pub struct Diverged {
    pub error: Error,
    pub last_good: Dit,
    pub curve: Vec<LossPoint>,
}

struct AdamState {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

fn apply_update(
    model: &mut Dit,
    grad: &Dit,
    config: &ToyTaskConfig,
    adam: &mut Option<AdamState>,
    step: usize,
) {
    let lr = config.lr;
    match config.optimizer {
        Optimizer::Sgd => {
            for (p, g) in model.tensors_mut().into_iter().zip(grad.tensors()) {
                for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
                    *w -= lr * d;
                }
            }
        }
        Optimizer::Adam { beta1, beta2, eps } => {
            let state = adam.get_or_insert_with(|| AdamState {
                m: grad.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
                v: grad.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
            });
            let k = (step + 1) as i32;
            let c1 = 1.0 - libm::powf(beta1, k as f32);
            let c2 = 1.0 - libm::powf(beta2, k as f32);
            for (((p, g), m), v) in model
                .tensors_mut()
                .into_iter()
                .zip(grad.tensors())
                .zip(&mut state.m)
                .zip(&mut state.v)
            {
                for (((w, &d), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                    *mi = beta1 * *mi + (1.0 - beta1) * d;
                    *vi = beta2 * *vi + (1.0 - beta2) * d * d;
                    *w -= lr * (*mi / c1) / (libm::sqrtf(*vi / c2) + eps);
                }
            }
        }
    }
}

fn all_finite(model: &Dit) -> bool {
    model.tensors().iter().all(|t| t.data().iter().all(|v| v.is_finite()))
}

/// Trains `model` in place of a copy and returns the result with its loss
/// curve. `progress` is called after every step.
pub fn train(
    model: &Dit,
    config: &ToyTaskConfig,
    mut progress: impl FnMut(&LossPoint),
) -> core::result::Result<Trained, Box<Diverged>> {
    let fail = |error: Error, model: &Dit, curve: &[LossPoint]| {
        Box::new(Diverged {
            error,
            last_good: model.clone(),
            curve: curve.to_vec(),
        })
    };
    if let Err(e) = config.validate() {
        return Err(fail(e, model, &[]));
    }
    let heldout = heldout_set(model, config).map_err(|e| fail(e, model, &[]))?;
    let initial_heldout = mean_loss(model, &heldout).map_err(|e| fail(e, model, &[]))?;
    let mut current = model.clone();
    let mut curve = Vec::with_capacity(config.train_steps);
    let mut adam = None;
    let mut final_heldout = initial_heldout;
    for step in 0..config.train_steps {
        let batch = training_batch(&current, config, step).map_err(|e| fail(e, &current, &curve))?;
        let (loss, grad) = match loss_and_grad(&current, &batch) {
            Ok(v) if v.0.is_finite() => v,
            Ok(_) | Err(Error::Tensor(_)) => {
                return Err(fail(Error::Diverged { step }, &current, &curve));
            }
            Err(e) => return Err(fail(e, &current, &curve)),
        };
        let mut next = current.clone();
        apply_update(&mut next, &grad, config, &mut adam, step);
        if !all_finite(&next) {
            return Err(fail(Error::Diverged { step }, &current, &curve));
        }
        current = next;
        let last = step + 1 == config.train_steps;
        let heldout_loss = if (step + 1) % config.eval_every == 0 || last {
            let l = mean_loss(&current, &heldout).map_err(|_| fail(Error::Diverged { step }, &current, &curve))?;
            final_heldout = l;
            Some(l)
        } else {
            None
        };
        let point = LossPoint {
            step,
            train_loss: loss,
            heldout_loss,
        };
        progress(&point);
        curve.push(point);
    }
    Ok(Trained {
        model: current,
        curve,
        initial_heldout,
        final_heldout,
    })
}
