//! Data model, formats, database engine, alignment, annotation checks,
//! metrics and example synthesis for multilingual task-oriented dialogue
//! datasets.

pub mod align;
pub mod check;
pub mod eval;
pub mod exec;
pub mod format;
pub mod kb;
pub mod metrics;
pub mod model;
pub mod norm;
pub mod synth;
pub mod value_map;

pub use exec::Execution;
pub use model::*;
