pub mod attack;
pub mod barycenter;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod ot;
pub mod synth;
pub mod train;

pub use error::{RaidError, Result};
