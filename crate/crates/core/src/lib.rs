pub mod cognition;
pub mod config;
pub mod corpus;
pub mod error;
pub mod evalkit;
pub mod fixtures;
pub mod fusion;
pub mod nn;
pub mod pipeline;
pub mod retriever;
pub mod text;
pub mod training;

pub use error::{Error, Result};
