pub mod data;
pub mod dgp;
pub mod diagnostics;
pub mod effects;
pub mod error;
pub mod inference;
pub mod mediation;
pub mod normal;
pub mod probit;
pub mod reweight;

pub use error::{Error, Result};
