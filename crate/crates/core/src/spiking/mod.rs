//! Leaky integrate-and-fire dynamics and the spiking network built on them.
//!
//! Each neuron follows the discrete recurrence
//!
//! ```text
//! V[n] = β·(V[n−1] − b·(‖W‖²+ε)·S[n−1]) + (1−β)·I[n]
//! S[n] = Θ(V[n]/(‖W‖²+ε) − b)
//! ```
//!
//! where `I[n]` is the layer's convolution of its input spikes, `β` the leak,
//! `b` the normalized threshold and `‖W‖²` the squared norm of the layer's
//! weights. `β = exp(−Δt/τ_mem)` discretizes the continuous membrane
//! equation `τ_mem·dV/dt = −(V − V_rest) + I`. `Θ` is the Heaviside step with
//! `Θ(0) = 1`; training replaces its derivative by [`surrogate_grad`].

mod checkpoint;
mod dropout;
mod layer;
mod lif;
mod network;
mod readout;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use dropout::{dropout_per_timestep, dropout_vector, DropoutMask};
pub use layer::{ConvMode, ExecutionMode, LayerOutput, SpikingConvLayer};
pub use lif::{lazy_decay_advance, lif_step, lif_step_sparse, LifLayerState};
pub use network::{
    network_forward, Architecture, ForwardOutput, LayerSlots, LayerSpec, Network, NetworkOptions,
    ParamLayout,
};
pub use readout::ReadoutLayer;

pub(crate) use network::mean_rows;

/// Guard added to `‖W‖²` before it divides the potential.
pub const NORM_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LifParams {
    /// Leak factor `β`, trainable, kept in `[0, 1]`.
    pub beta: f64,
    /// Normalized threshold `b`, trainable, kept `≥ 0`.
    pub threshold: f64,
    /// Surrogate steepness `α`, fixed.
    pub alpha: f64,
}

impl Default for LifParams {
    fn default() -> Self {
        LifParams {
            beta: 0.7,
            threshold: 0.3,
            alpha: 3.0,
        }
    }
}

/// How a layer turns its normalized potential into an output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SpikeFn {
    /// Binary spikes.
    #[default]
    Heaviside,
    /// `sig_α`, the smooth stand-in used to check gradients numerically.
    Sigmoid,
}

/// `Θ(V/(‖W‖²+ε) − b)` with `Θ(0) = 1`.
#[inline]
pub fn heaviside_spike(potential: f64, wnorm2: f64, threshold: f64) -> bool {
    potential / (wnorm2 + NORM_EPSILON) - threshold >= 0.0
}

/// Logistic function with steepness `α`.
#[inline]
pub fn scaled_sigmoid(x: f64, alpha: f64) -> f64 {
    1.0 / (1.0 + (-alpha * x).exp())
}

/// Derivative of [`scaled_sigmoid`]: `α·sig_α(x)·sig_α(−x)`.
#[inline]
pub fn surrogate_grad(x: f64, alpha: f64) -> f64 {
    alpha * (scaled_sigmoid(x, alpha) * scaled_sigmoid(-x, alpha))
}

/// One potential update. `norm` already includes `ε`.
#[inline]
pub fn lif_potential(
    v_prev: f64,
    s_prev: f64,
    current: f64,
    beta: f64,
    threshold: f64,
    norm: f64,
) -> f64 {
    beta * (v_prev - threshold * norm * s_prev) + (1.0 - beta) * current
}

/// Output of a neuron for potential `v`. `norm` already includes `ε`.
#[inline]
pub fn spike_output(v: f64, norm: f64, params: &LifParams, spike_fn: SpikeFn) -> f64 {
    let u = v / norm - params.threshold;
    match spike_fn {
        SpikeFn::Heaviside => {
            if u >= 0.0 {
                1.0
            } else {
                0.0
            }
        }
        SpikeFn::Sigmoid => scaled_sigmoid(u, params.alpha),
    }
}
