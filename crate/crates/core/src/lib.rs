//! Planning and schedule simulation for sharded transformer training.
//!
//! The crate models a network as a DAG of layer nodes ([`model_ir`]),
//! derives static costs from it ([`analysis`]), assigns partition specs on
//! a named device mesh ([`mesh`]), prices compute and collectives on an
//! accelerator profile ([`hw_cost`]), simulates per-device schedules for
//! pipeline, tensor and combined parallelism ([`simulator`]) and answers
//! capacity and strategy questions on top of that ([`planner`]).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod error;
pub mod exec;
pub mod hw_cost;
pub mod mesh;
pub mod model_ir;
pub mod planner;
pub mod simulator;

pub use error::{Error, Result};
pub use exec::Exec;
