//! Numerical checks of eigenfunction properties, each producing a
//! [`TheoremReport`].

pub mod report;
pub mod suite;
pub mod theorems;

pub use report::{Counterexample, TheoremReport, Verdict};
pub use suite::{run_all_checks, SuiteConfig};
pub use theorems::*;
