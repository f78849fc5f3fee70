//! Command-line pipelines and the post-editing HTTP service.

pub mod cli;
pub mod predictors;
pub mod service;
pub mod store;
