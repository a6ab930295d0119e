//! Laboratory for a one-layer attention model trained on synthetic
//! context/subject/relation prompts, where pretrained parametric knowledge
//! competes with in-context answers.
//!
//! Everything numeric is generic over [`scalar::Scalar`]; the aliases below
//! fix the scalar to `f64`, which all tolerances assume.

pub mod dataset;
pub mod dynamics;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod model;
pub mod pretrain;
pub mod scalar;
pub mod theory;
pub mod token_space;

pub use error::{Error, Result};

pub type Space = token_space::TokenSpace<f64>;
pub type State = model::ModelState<f64>;
pub type Pretrain = pretrain::Pretrained<f64>;
pub type Trace = dynamics::DynamicsTrace<f64>;
pub type Values = pretrain::ValueTable<f64>;
