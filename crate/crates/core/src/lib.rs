//! Keyword-aware relative spatio-temporal graph network for video question
//! answering, on top of a small reverse-mode autodiff engine.

pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod keyword;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use params::{Gradients, ParamStore};
pub use tape::{Pool, Tape, Var};
pub use tensor::Tensor;
