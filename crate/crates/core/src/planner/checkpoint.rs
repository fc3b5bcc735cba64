use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointPlan {
    /// Whole number of steps between checkpoints, in seconds.
    pub interval_s: f64,
    pub interval_steps: u64,
    /// Unrounded minimizer of the overhead function.
    pub optimal_interval_s: f64,
    pub step_time_s: f64,
    pub checkpoint_cost_s: f64,
    pub mtbf_s: f64,
    pub expected_overhead_fraction: f64,
    /// Zero checkpoint cost: checkpoint continuously at no overhead.
    pub degenerate: bool,
    pub warnings: Vec<String>,
}

/// Fraction of time spent writing checkpoints plus expected recomputation
/// after a failure.
pub fn checkpoint_overhead(interval_s: f64, cost_s: f64, mtbf_s: f64) -> f64 {
    cost_s / interval_s + interval_s / (2.0 * mtbf_s)
}

/// Checkpoint interval minimizing [`checkpoint_overhead`], rounded to the
/// nearest whole number of steps (at least one).
pub fn checkpoint_interval(step_time_s: f64, cost_s: f64, mtbf_s: f64) -> Result<CheckpointPlan> {
    let positive = |name: &str, v: f64| {
        if v > 0.0 && !v.is_nan() {
            Ok(())
        } else {
            Err(Error::validation("checkpoint", format!("{name} must be > 0, got {v}")))
        }
    };
    positive("step_time_s", step_time_s)?;
    positive("mtbf_s", mtbf_s)?;
    if !(cost_s >= 0.0 && cost_s.is_finite()) {
        return Err(Error::validation("checkpoint", format!("checkpoint_cost_s must be >= 0, got {cost_s}")));
    }
    let mut plan = CheckpointPlan {
        interval_s: 0.0,
        interval_steps: 0,
        optimal_interval_s: 0.0,
        step_time_s,
        checkpoint_cost_s: cost_s,
        mtbf_s,
        expected_overhead_fraction: 0.0,
        degenerate: cost_s == 0.0,
        warnings: Vec::new(),
    };
    if plan.degenerate {
        return Ok(plan);
    }
    let optimal = (2.0 * cost_s * mtbf_s).sqrt();
    let steps = ((optimal / step_time_s).round() as u64).max(1);
    plan.optimal_interval_s = optimal;
    plan.interval_steps = steps;
    plan.interval_s = steps as f64 * step_time_s;
    plan.expected_overhead_fraction = checkpoint_overhead(plan.interval_s, cost_s, mtbf_s);
    if cost_s >= mtbf_s {
        plan.warnings.push(format!(
            "checkpoint cost {cost_s} s is not below the mean time between failures {mtbf_s} s; the interval model does not apply"
        ));
    }
    if plan.expected_overhead_fraction >= 1.0 {
        plan.warnings.push(format!("expected overhead fraction {:.3} is not below 1", plan.expected_overhead_fraction));
    }
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_minute_checkpoints_daily_failures() {
        let p = checkpoint_interval(1.0, 60.0, 86400.0).unwrap();
        assert!((p.optimal_interval_s - 3219.94).abs() < 0.01);
        assert_eq!(p.interval_steps, 3220);
        assert!(p.warnings.is_empty());
        assert!(p.expected_overhead_fraction > 0.0 && p.expected_overhead_fraction < 0.04);
    }

    #[test]
    fn zero_cost_is_degenerate() {
        let p = checkpoint_interval(1.0, 0.0, 100.0).unwrap();
        assert!(p.degenerate);
        assert_eq!(p.expected_overhead_fraction, 0.0);
    }

    #[test]
    fn expensive_checkpoints_warn() {
        let p = checkpoint_interval(1.0, 200.0, 100.0).unwrap();
        assert!(!p.warnings.is_empty());
        assert!(checkpoint_interval(0.0, 1.0, 1.0).is_err());
        assert!(checkpoint_interval(1.0, -1.0, 1.0).is_err());
    }

    #[test]
    fn long_steps_round_to_one() {
        let p = checkpoint_interval(1000.0, 1.0, 100.0).unwrap();
        assert_eq!(p.interval_steps, 1);
        assert_eq!(p.interval_s, 1000.0);
    }
}
