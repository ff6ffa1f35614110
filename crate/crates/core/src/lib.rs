pub mod alignment;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod lora;
pub mod model;
pub mod numerics;
pub mod trainer;
pub mod util;

pub use error::{Error, Result};
