use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::hw_cost::HardwareProfile;
use crate::model_ir::ModelGraph;
use crate::simulator::{simulate_combined, simulate_pipeline, StageAssignment};

const TIE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Winner {
    Tensor,
    Pipeline,
    Tie,
    /// Neither strategy is feasible on the slice.
    Neither,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineChoice {
    pub stages: usize,
    pub micro_batches: usize,
    pub step_time: f64,
    pub idle_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorChoice {
    pub dp: usize,
    pub tp: usize,
    pub step_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome<T> {
    Feasible(T),
    Infeasible { reason: String },
}

impl<T> Outcome<T> {
    pub fn feasible(&self) -> Option<&T> {
        match self {
            Outcome::Feasible(t) => Some(t),
            Outcome::Infeasible { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub slice_name: String,
    pub cores: u64,
    pub batch: u64,
    pub micro_batch_sweep: Vec<usize>,
    pub pipeline: Outcome<PipelineChoice>,
    pub tensor: Outcome<TensorChoice>,
    pub winner: Winner,
    /// `pipeline / tensor` step time when both are feasible.
    pub pipeline_over_tensor: Option<f64>,
}

fn divisors(n: u64) -> Vec<usize> {
    (1..=n).filter(|d| n.is_multiple_of(*d)).map(|d| d as usize).collect()
}

// Smallest step time, ties going to the earliest candidate.
fn best<T: Clone>(items: Vec<(f64, T)>) -> Option<T> {
    items
        .into_iter()
        .fold(None::<(f64, T)>, |acc, (t, x)| match acc {
            Some((bt, _)) if bt <= t => acc,
            _ => Some((t, x)),
        })
        .map(|(_, x)| x)
}

/// Best pipeline step over stage counts `1..=min(cores, nodes)` (one core
/// per stage, balanced stages) and the micro-batch sweep, against the best
/// data × tensor factorization of the slice's cores.
///
/// `micro_batches` defaults to every divisor of `batch`; entries that do
/// not divide it are dropped. `g` must be built for `batch`.
pub fn compare_parallelism(
    g: &ModelGraph,
    slice: &HardwareProfile,
    batch: u64,
    micro_batches: Option<&[usize]>,
    exec: Exec,
) -> Result<ComparisonReport> {
    slice.validate()?;
    g.validate()?;
    if g.batch_size() != batch {
        return Err(Error::validation(
            "comparison",
            format!("graph batch {} differs from requested batch {batch}", g.batch_size()),
        ));
    }
    let sweep: Vec<usize> = match micro_batches {
        Some(ms) => {
            let mut v: Vec<usize> = ms.iter().copied().filter(|&m| m > 0 && batch.is_multiple_of(m as u64)).collect();
            v.sort_unstable();
            v.dedup();
            v
        }
        None => divisors(batch),
    };
    let cores = slice.cores_per_slice as usize;
    let max_stages = cores.min(g.len());

    let pipeline = if sweep.is_empty() {
        Outcome::Infeasible { reason: format!("no micro-batch count in the sweep divides batch {batch}") }
    } else {
        let stage_sets: Vec<usize> = (1..=max_stages).collect();
        let assignments =
            exec.map(&stage_sets, |&p| StageAssignment::balanced(g, p)).into_iter().collect::<Result<Vec<_>>>()?;
        let points: Vec<(usize, usize)> =
            (0..assignments.len()).flat_map(|i| sweep.iter().map(move |&m| (i, m))).collect();
        let runs = exec.map(&points, |&(i, m)| {
            simulate_pipeline(g, &assignments[i], m, slice).map(|t| {
                let choice = PipelineChoice {
                    stages: i + 1,
                    micro_batches: m,
                    step_time: t.step_time,
                    idle_fraction: t.idle_fraction(),
                };
                (t.step_time, choice)
            })
        });
        match best(runs.into_iter().collect::<Result<Vec<_>>>()?) {
            Some(c) => Outcome::Feasible(c),
            None => Outcome::Infeasible { reason: "no stage count fits the slice".into() },
        }
    };

    let heads = g.attention_heads();
    let factors: Vec<(usize, usize)> = divisors(cores as u64)
        .into_iter()
        .map(|dp| (dp, cores / dp))
        .filter(|&(dp, tp)| batch.is_multiple_of(dp as u64) && heads.is_none_or(|h| h % tp as u64 == 0))
        .collect();
    let tensor = if factors.is_empty() {
        Outcome::Infeasible {
            reason: format!("no dp x tp = {cores} factorization divides batch {batch} and heads {heads:?}"),
        }
    } else {
        let runs = exec.map(&factors, |&(dp, tp)| {
            simulate_combined(g, dp, tp, None, batch, slice)
                .map(|t| (t.step_time, TensorChoice { dp, tp, step_time: t.step_time }))
        });
        Outcome::Feasible(best(runs.into_iter().collect::<Result<Vec<_>>>()?).expect("nonempty factor list"))
    };

    let (winner, ratio) = match (pipeline.feasible(), tensor.feasible()) {
        (Some(p), Some(t)) => {
            let w = if (p.step_time - t.step_time).abs() <= TIE_TOLERANCE * p.step_time.max(t.step_time) {
                Winner::Tie
            } else if t.step_time < p.step_time {
                Winner::Tensor
            } else {
                Winner::Pipeline
            };
            (w, Some(p.step_time / t.step_time))
        }
        (Some(_), None) => (Winner::Pipeline, None),
        (None, Some(_)) => (Winner::Tensor, None),
        (None, None) => (Winner::Neither, None),
    };
    Ok(ComparisonReport {
        slice_name: slice.name.clone(),
        cores: slice.cores_per_slice,
        batch,
        micro_batch_sweep: sweep,
        pipeline,
        tensor,
        winner,
        pipeline_over_tensor: ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_ir::{build_decoder_only, TransformerConfig};

    fn small(batch: u64) -> ModelGraph {
        build_decoder_only(&TransformerConfig::new(64, 4, 4).with_vocab(256).with_seq(32).with_batch(batch)).unwrap()
    }

    #[test]
    fn one_core_is_a_tie() {
        let g = small(4);
        let slice = HardwareProfile::builtin("v4-1").unwrap();
        let r = compare_parallelism(&g, &slice, 4, None, Exec::Sequential).unwrap();
        assert_eq!(r.winner, Winner::Tie);
        assert_eq!(r.micro_batch_sweep, vec![1, 2, 4]);
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let g = small(8);
        let slice = HardwareProfile::builtin("v4-4").unwrap();
        let a = compare_parallelism(&g, &slice, 8, None, Exec::Sequential).unwrap();
        let b = compare_parallelism(&g, &slice, 8, None, Exec::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn infeasible_is_reported() {
        let g = small(2);
        let slice = HardwareProfile::builtin("v4-8").unwrap();
        let r = compare_parallelism(&g, &slice, 2, Some(&[3]), Exec::Sequential).unwrap();
        assert!(matches!(r.pipeline, Outcome::Infeasible { .. }));
        assert!(r.tensor.feasible().is_some());
        assert_eq!(r.winner, Winner::Tensor);
        assert!(compare_parallelism(&g, &slice, 4, None, Exec::Sequential).is_err());
    }
}
