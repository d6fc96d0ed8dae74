//! Diffusion-transformer inference with calibrated reuse of sublayer outputs
//! across denoising steps.
//!
//! A calibration pass measures how much each attention and FFN sublayer
//! output changes between consecutive sampler steps. Thresholding those
//! curves gives a [`CacheSchedule`]; during sampling a scheduled step adds the
//! stored output of the previous computation instead of running the sublayer.
//!
//! The crate is `no_std` (it needs `alloc`) and does no I/O. File formats,
//! timing and the command line live in the `smoothdit` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod cache;
pub mod calibrate;
pub mod dten;
pub mod error;
pub mod executor;
pub mod grad;
pub mod model;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod tensor;
pub mod toy;

pub use cache::{CacheState, ScheduledCache};
pub use calibrate::{calibrate, CalibrationConfig, CaptureBranch};
pub use error::{Error, Result, TensorError};
pub use executor::{cached_infer, divergence, Divergence};
pub use model::{Branch, ComputeAll, Dit, LayerId, LayerKind, ModelConfig, SublayerHook};
pub use rng::{Purpose, Rng};
pub use sampler::{cfg_velocity, euler_integrate, sway_timesteps, Clock, NoClock, RunStats, SamplerConfig};
pub use schedule::{
    apply_strategy, build_layer_mask, l1_relative_error, schedule_stats, CacheSchedule, ErrorProfile,
    ScheduleStats, Strategy,
};
pub use tensor::{Shape, Tensor};
