//! Data-carved selective inference.
//!
//! Selection rules run on a pilot fraction of the data; inference uses all
//! of it, conditioned on what was selected.

pub mod asymptotics;
pub mod error;
pub mod gauss;
pub mod inference;
pub mod mv;
pub mod selection;
pub mod seq;
pub mod sim;

pub use error::{CarveError, Result};
pub use inference::{ConfidenceInterval, PivotResult};
