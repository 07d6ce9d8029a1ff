pub mod baselines;
pub mod decision;
pub mod diffkit;
pub mod error;
pub mod floodsim;
pub mod graph;
pub mod pipeline;
pub mod rng;
pub mod selector;
pub mod stmodel;

pub use error::{Error, Result};
