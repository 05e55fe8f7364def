pub mod alignment;
pub mod cf;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod layers;
pub mod lm;
pub mod pipeline;
pub mod scenarios;
pub mod stage2;
pub mod synth;
pub mod text;
pub mod train;

pub use error::{CoreError, Result};
