pub mod cli;
pub mod cmf;
pub mod config;
pub mod error;
pub mod io;
pub mod kv;
pub mod metrics;
pub mod oracle;
pub mod phantom;
pub mod prior_cmf;
pub mod render;
pub mod shape;
pub mod volume;

pub use error::{Error, Result};
