pub mod ablation;
pub mod bspg;
pub mod cli;
pub mod error;
pub mod eval;
pub mod fsd;
pub mod heads;
pub mod losses;
pub mod model;
pub mod numeric;
pub mod pipeline;
pub mod pssc;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
