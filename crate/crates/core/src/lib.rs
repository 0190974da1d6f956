//! Precipitation-adaptive mixture-of-experts nowcasting at desk scale.

pub mod autodiff;
pub mod cli;
pub mod dacla;
pub mod engine;
pub mod error;
pub mod field_store;
pub mod objectives;
pub mod pa_moe;
pub mod tokenizer;
pub mod verification;

pub use error::{Error, Result};
