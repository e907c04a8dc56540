//! Network components. Every function records onto a [`Graph`] and binds
//! its weights by name from the graph's parameter store.
//!
//! [`Graph`]: cfqa_tensor::Graph

pub mod answer;
pub mod encoder;
pub mod glove;
pub mod params;
pub mod policy;
pub mod selector;

pub use answer::{decode_span, SpanPrediction};
pub use encoder::Encoded;
pub use params::{init_params, param_shapes};
pub use policy::{ActionId, N_ACTIONS};
pub use selector::select_top_k;
