pub mod cli;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod losses;
pub mod model;
pub mod networks;
pub mod par;
pub mod patterns;
pub mod rng;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
