use alloc::string::String;

use crate::model::{Branch, LayerId};
use crate::tensor::Shape;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs} and {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },
    #[error("{op}: expected rank {expected}, got shape {shape}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        shape: Shape,
    },
    #[error("invalid shape {0}: dimensions must be positive")]
    InvalidShape(Shape),
    #[error("shape {shape} needs {} values, got {len}", shape.numel())]
    LengthMismatch { shape: Shape, len: usize },
    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{name} = {value} is outside {range}")]
    Domain {
        name: &'static str,
        value: f64,
        range: &'static str,
    },
    #[error("cache miss for block {} {} ({}) at step {step}: schedule marks it cached but it was never computed", layer.block, layer.kind, branch)]
    CacheMiss {
        layer: LayerId,
        branch: Branch,
        step: usize,
    },
    #[error("schedule covers {schedule} steps but the sampler runs {sampler}")]
    NfeMismatch { schedule: usize, sampler: usize },
    #[error("degenerate denominator: reference L1 norm {norm:e} is below 1e-12")]
    DegenerateDenominator { norm: f64 },
    #[error("calibration sample {sample}, block {} {}, step {step}: reference activation has zero norm", layer.block, layer.kind)]
    DegenerateCalibration {
        sample: usize,
        layer: LayerId,
        step: usize,
    },
    #[error("invalid error profile: {0}")]
    InvalidProfile(String),
    #[error("invalid cache schedule: {0}")]
    InvalidSchedule(String),
    #[error("training diverged at step {step} (loss is not finite)")]
    Diverged { step: usize },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
