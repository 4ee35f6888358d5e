//! Planning, estimation, control and soft-gripper mechanics for aerial
//! grasping of static and moving targets.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod bounds;
pub mod control;
pub mod error;
pub mod fem;
pub mod geometry;
pub mod harness;
pub mod registration;
pub mod sim;
pub mod smoother;
pub mod trajectory;

pub use error::{Error, Result};
