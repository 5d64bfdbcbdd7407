//! Doubly robust estimation of intervention-specific means under conditional
//! parallel trends, with cross-fitting and stacked nuisance learners.

pub mod bench;
pub mod design;
pub mod error;
pub mod estimator;
pub mod exec;
pub mod folds;
pub mod learners;
pub mod nuisance;
pub mod panel;
pub mod simulate;

pub use error::{Error, Result};
pub use exec::Execution;
