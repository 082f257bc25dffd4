//! From-scratch differentiable-array engine and a 3D volume-language model
//! built on it: volumetric patch embedding, a frozen transformer vision
//! encoder, a query-former bridge into a causal LM decoder with optional
//! LoRA adapters, and a dual contrastive + generation training objective,
//! plus a synthetic volumetric EHR dataset and a CLI harness.

pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod embed;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod text;
pub mod vision;
pub mod volume;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use params::{ParamEntry, ParamStore};
pub use tensor::{Dtype, Element, Tensor};
