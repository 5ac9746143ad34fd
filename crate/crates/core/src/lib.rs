pub mod crossmodal;
pub mod encoders;
pub mod error;
pub mod evalmetrics;
pub mod gradsuite;
pub mod losses;
pub mod numkernel;
pub mod patchlabel;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
