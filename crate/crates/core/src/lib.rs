//! Chart question answering with a collaborative chain of tool agents,
//! prompt optimization by beam search, and instruction synthesis.

pub mod config;
pub mod domain;
pub mod engine;
pub mod error;
pub mod feedback;
pub mod gateway;
pub mod io;
pub mod metrics;
pub mod optimizer;
pub mod review;
pub mod synthesis;

pub use error::{Error, Result};

#[cfg(feature = "testkit")]
pub mod testkit;
