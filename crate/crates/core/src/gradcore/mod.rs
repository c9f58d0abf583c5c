//! Minimal reverse-mode differentiation over a fixed op set, the toy
//! backbone/head it trains, the combined objective, SGD with momentum, and
//! the finite-difference oracle that certifies every analytic gradient.

mod check;
mod model;
mod objective;
mod optim;
mod tape;

pub use check::{finite_diff, gradcheck_component, max_rel_err, GradCheck, LossComponent, FD_EPS, GRAD_FLOOR};
pub use model::{build_scene, forward, ForwardOutput, ModelConfig, ParamNodes, RoiSpec, SceneNodes, ToyModel, IN_CHANNELS};
pub use objective::{build_total_loss, total_loss, BatchNodes, Hyper, LossBreakdown, LossNodes, ScenePair, TrainAttentionMode};
pub use optim::{train_step, SgdMomentum};
pub use tape::{NodeId, Tape, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GradError {
    #[error("box ({x0},{y0})..({x1},{y1}) invalid for {width}x{height} image")]
    BoxOutOfBounds {
        x0: usize,
        y0: usize,
        x1: usize,
        y1: usize,
        width: usize,
        height: usize,
    },
    #[error("image {width}x{height} too small for reflect padding")]
    ImageTooSmall { height: usize, width: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite loss {0}")]
    NonFiniteLoss(f64),
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("learning rate {0} must be positive")]
    BadLearningRate(f64),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("bad forward output: {0}")]
    BadForward(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
