//! Dense `f64` tensors, reverse-mode differentiation, Adam and the
//! learning-rate schedule.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod params;
pub mod schedule;
pub mod tensor;

pub use adam::{adam_step, AdamState};
pub use graph::{Graph, Var};
pub use params::{Init, ParamId, ParamStore};
pub use schedule::{lr_at, LrSchedule};
pub use tensor::Tensor;
