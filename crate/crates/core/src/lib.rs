pub mod data;
pub mod design;
pub mod effects;
pub mod error;
pub mod family;
pub mod kernel;
pub mod inference;
pub mod linalg;
pub mod metalearn;
pub mod model;
pub mod persistence;
mod optim;
pub mod reml;
pub mod rng;
pub mod solver;
pub mod spec;

pub use error::{GkrlsError, Result};
