//! File formats, configuration and the end-to-end pipeline around
//! [`lrf_core`].

pub mod artifact;
pub mod config;
pub mod outputs;
pub mod pipeline;
pub mod store;

pub use lrf_core;
