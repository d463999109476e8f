//! Array math with reverse-mode differentiation.
//!
//! Every other module builds on the types here; nothing outside this module
//! touches raw numeric kernels.

pub mod array;
pub mod gradcheck;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;

pub use array::{NdArray, Real};
pub use gradcheck::{check_gradients, check_gradients_sampled, GradCheckReport};
pub use optim::{AdamW, LrSchedule, OptimizerSettings};
pub use params::{Ctx, Init, ParamGrads, ParamId, ParamStore};
pub use rng::Rng;
pub use tape::{Gradients, Tape, Var};
