//! Capacity search, pipeline versus tensor comparison and checkpoint
//! interval planning.

mod capacity;
mod checkpoint;
mod compare;

pub use capacity::{
    calibrate_hbm, capacity_table, default_heads, max_layers, memory_check, reference_rows, CapacityAssumptions,
    CapacityOptions, CapacityResult, CapacityRow, CapacityTable, MemoryCheck, ReferenceRow,
};
pub use checkpoint::{checkpoint_interval, checkpoint_overhead, CheckpointPlan};
pub use compare::{compare_parallelism, ComparisonReport, Outcome, PipelineChoice, TensorChoice, Winner};
