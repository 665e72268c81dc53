pub mod dynamics;
pub mod error;
pub mod inequalities;
pub mod measures;
pub mod rng;
pub mod scene;
pub mod stats;
pub mod subspace;

pub use error::{Error, Result};
