//! Multi-step coarse-to-fine extractive question answering.
//!
//! An actor-critic controller looks at the current context and the question
//! and either answers from the context, narrows it to its most relevant
//! sentences, or cuts out the span it would have answered with. Everything is
//! generic over the float type; the aliases below fix it.

pub mod agent;
pub mod bandit;
pub mod check;
pub mod config;
pub mod episode;
pub mod error;
pub mod metrics;
pub mod model;
pub mod subcontext;
pub mod text;
pub mod train;

pub use agent::{Agent, AgentOptions, NeuralAgent, OracleAgent, RandomAgent};
pub use config::{DecodeMode, ModelConfig, RewardMode, RunConfig};
pub use episode::{run_episode, Chooser, EpisodeConfig, EpisodeResult, Transition};
pub use error::{CfqaError, Result};
pub use metrics::{EpisodeSummary, RunMetrics};
pub use model::{ActionId, SpanPrediction};
pub use train::{evaluate, Evaluation, Session, UpdateLog};

pub use cfqa_tensor as tensor;

pub type ParamStore32 = cfqa_tensor::ParamStore<f32>;
pub type ParamStore64 = cfqa_tensor::ParamStore<f64>;
