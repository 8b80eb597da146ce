//! Model store, CLI and HTTP service for bid landscapes and CPA bid recommendations.

pub mod cli;
pub mod pipeline;
pub mod service;
pub mod store;
