//! Minimal differentiable numeric substrate.
//!
//! Everything the model needs lives here: a shape-tagged [`Tensor`], a
//! reverse-mode [`Tape`], GRU and attention layers, the Adam optimizer, the
//! deterministic [`Rng`], and the categorical utilities (masked softmax,
//! Gumbel-Softmax, KL, smoothed cross entropy).
//!
//! Numerics are generic over [`Scalar`]. Training and inference run in `f32`;
//! the same code instantiated at `f64` is used as a high-precision shadow when
//! checking gradients by finite differences.

mod adam;
mod functional;
mod gumbel;
mod layers;
mod params;
mod rng;
mod tape;
mod tensor;

pub mod gradcheck;

pub use adam::{clip_global_norm, AdamConfig, AdamState};
pub use functional::{
    argmax_masked, kl_categorical, scatter_copy, smoothed_cross_entropy, smoothed_target,
    softmax_masked, MASK_NEG,
};
pub use gumbel::{gumbel_softmax_sample, FixedNoise, GumbelNoise, GumbelSample, ZeroNoise};
pub use layers::{
    causal_mask, feed_forward, gru_cell_step, layer_norm, linear, multi_head_attention, sinusoidal_positions, FeedForwardParams,
    GruParams, LayerNormParams, MhaParams,
};
pub use params::{GradBuffer, ParamId, ParamStore};
pub use rng::Rng;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use std::fmt::Debug;
use std::iter::Sum;

/// Floating-point element type for tensors and tapes.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Sum + Send + Sync + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
