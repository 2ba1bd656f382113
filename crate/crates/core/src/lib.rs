pub mod copula;
pub mod distributions;
pub mod dropout;
pub mod error;
pub mod estimation;
pub mod gmm;
pub mod marginal;
pub mod panel;
pub mod simulation;
pub mod temporal;

pub use error::{Error, Result};
