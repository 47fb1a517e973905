//! Velocity-field learning: a time-conditioned convolutional network with a
//! hand-written backward pass, the flow-matching MSE objective, an
//! AdamW + EMA training loop with warmup/cosine learning rate, and the Euler
//! sampler that transports partial maps to completed ones.

mod net;
mod sample;
mod train;

pub use net::{silu, silu_prime, time_embedding, Conv2d, NetConfig, VelocityNet};
pub use sample::{euler_sample, VelocityModel};
pub use train::{
    fm_loss, fm_loss_parts, load_checkpoint, save_checkpoint, LrSchedule, TrainConfig, TrainState,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("time {0} outside [0, 1]")]
    TimeDomain(f64),
    #[error("euler steps must be >= 1")]
    BadSteps,
    #[error("non-finite gradient; step aborted")]
    NonFiniteGradient,
    #[error("non-finite state during sampling")]
    NonFiniteState,
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Floating-point scalar the network is generic over. Training runs in
/// `f32`; gradient checking instantiates the same code at `f64`.
pub trait Scalar:
    ndarray::LinalgScalar
    + num_traits::Float
    + num_traits::FromPrimitive
    + ndarray::ScalarOperand
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
}

impl<T> Scalar for T where
    T: ndarray::LinalgScalar
        + num_traits::Float
        + num_traits::FromPrimitive
        + ndarray::ScalarOperand
        + std::fmt::Debug
        + std::fmt::Display
        + Send
        + Sync
        + 'static
{
}

/// Shorthand for lossy f64 → T conversion.
pub(crate) fn scalar<T: Scalar>(v: f64) -> T {
    T::from_f64(v).expect("f64 convertible to scalar")
}
