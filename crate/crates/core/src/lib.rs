//! Scalar-generic numeric core and collaborative multi-LoRA expert layers.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`); the `*64` and
//! `*32` aliases below pin the element type.

pub mod achievement;
pub mod checkpoint;
pub mod clorae;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod lora;
pub mod mim;
pub mod optim;
pub mod param;
pub mod rng;
pub mod routing;
pub mod scalar;
pub mod tensor;

pub use achievement::{multitask_step_loss, normalize_weights, raw_weight, AchievementTracker, TaskWeights};
pub use checkpoint::Checkpoint;
pub use clorae::{AdaptedLinear, CloraeConfig, CloraeLinear, GateMode, GateRouter, TaskExpertSet, TrainableCount, UniversalExpert};
pub use error::{CoreError, Result};
pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use graph::{AttentionSpec, Gradients, Graph, NodeId};
pub use lora::{lora_delta, ForwardCtx, Linear, LoraFactors, LoraLinear};
pub use mim::{mim_loss, ExpertPair, VidHead};
pub use optim::{Adam, AdamConfig, StepDecay};
pub use param::{ParamId, ParamStore, Parameter};
pub use routing::{default_layer_groups, routing_report, LayerGroup, RoutingReport, RoutingStats};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Graph64 = Graph<f64>;
pub type Graph32 = Graph<f32>;
pub type ParamStore64 = ParamStore<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type Adam64 = Adam<f64>;
pub type Adam32 = Adam<f32>;
