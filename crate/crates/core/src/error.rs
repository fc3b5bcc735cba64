use thiserror::Error;

/// Errors produced by the planner library.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration or model definition violates a documented invariant.
    #[error("invalid {what}: {reason}")]
    Validation { what: &'static str, reason: String },

    #[error("graph contains a cycle through nodes [{}]", .0.join(", "))]
    Cycle(Vec<String>),

    #[error("unknown node `{0}`")]
    UnknownNode(String),

    #[error("tensor axis {axis} has extent {extent}, not divisible by {divisor}")]
    NotDivisible { axis: usize, extent: u64, divisor: u64 },

    #[error("{heads} attention heads are not divisible by tensor parallelism of order {tp}")]
    HeadsNotDivisible { heads: u64, tp: u64 },

    #[error("conflicting sharding constraints on {tensor}: {first} vs {second}")]
    ConflictingConstraints { tensor: String, first: String, second: String },

    #[error("sharding assignment has no spec for {0}")]
    MissingSpec(String),

    #[error("partition spec parse error at byte {pos}: {reason}")]
    SpecParse { pos: usize, reason: String },

    #[error("device factorization mismatch: dp={dp} x tp={tp} x stages={stages} != {cores} cores")]
    Factorization { dp: usize, tp: usize, stages: usize, cores: usize },

    #[error("model does not fit: {0}")]
    DoesNotFit(String),

    #[error("super-compute speedup: observed {observed} exceeds compute ratio {ratio}")]
    SpeedupExceedsRatio { observed: f64, ratio: f64 },

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn validation(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Validation { what, reason: reason.into() }
    }

    /// Infeasible plans are distinguished from malformed input by the CLI.
    pub fn is_infeasible(&self) -> bool {
        matches!(
            self,
            Error::DoesNotFit(_)
                | Error::Factorization { .. }
                | Error::HeadsNotDivisible { .. }
                | Error::NotDivisible { .. }
                | Error::SpeedupExceedsRatio { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
