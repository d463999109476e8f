pub mod bucket;
pub mod checkpoint;
pub mod dit;
pub mod error;
pub mod nn;
pub mod numeric;
pub mod pipeline;
pub mod prompt;
pub mod rgba;
pub mod rope;
pub mod synth;
pub mod vae;

pub use error::{Error, ErrorCategory, Result};
