//! Retrieval-augmented reinforcement learning core.
//!
//! Layers, from the bottom up:
//! - [`tensor`], [`tape`], [`optim`], [`loss`]: a small reverse-mode
//!   autodiff engine generic over the float type.
//! - [`nn`]: linear layers, GRU cells, attention, gated residual updates.
//! - [`summarizer`]: state encoder plus forward/backward trajectory
//!   summaries trained with auxiliary prediction losses.
//! - [`retrieval`]: the slot-based retrieval process that attends over a
//!   batch of summarised trajectories and bottlenecks what it returns.
//! - [`agent`]: the offline double-DQN agent and its retrieval-augmented
//!   variant.

pub mod agent;
pub mod batch;
pub mod error;
pub mod loss;
pub mod nn;
pub mod optim;
pub mod params;
pub mod retrieval;
pub mod scalar;
pub mod summarizer;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError};
pub use params::{ParamGroup, ParamId};
pub use scalar::Scalar;
pub use tape::Var;

/// Concrete `f64` aliases used by the agent and the experiment harness.
pub type Tensor = tensor::Tensor<f64>;
pub type Tape = tape::Tape<f64>;
pub type ParamStore = params::ParamStore<f64>;
pub type Gradients = tape::Gradients<f64>;
pub type AdamState = optim::AdamState<f64>;
pub use optim::AdamConfig;

/// Number of discrete actions in the environments this agent targets.
pub const NUM_ACTIONS: usize = 7;
