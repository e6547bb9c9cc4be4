pub mod contrastive;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod optim;
pub mod parallel;
pub mod run;
pub mod tensor;

pub use error::{Error, Result};
