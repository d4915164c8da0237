//! Koopman operator analysis: benchmark systems, observable dictionaries,
//! EDMD and generator fits, eigenfunction property checks and lifted control
//! experiments.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

// Serde config struct whose `Default` is the shipped setting of each field.
macro_rules! defaults {
    ($name:ident { $($(#[$meta:meta])* $field:ident : $ty:ty = $value:expr),* $(,)? }) => {
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        #[serde(default, deny_unknown_fields)]
        pub struct $name {
            $($(#[$meta])* pub $field: $ty,)*
        }

        impl Default for $name {
            fn default() -> Self {
                Self { $($field: $value,)* }
            }
        }
    };
}

pub mod checks;
pub mod control;
pub mod dictionaries;
pub mod error;
pub mod koopman_fit;
pub mod linalg;
pub mod oracles;
pub mod rng;
pub mod setup;
pub mod systems;

pub use error::{KoopmanError, Result};
