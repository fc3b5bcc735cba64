use super::engine::{Schedule, Task};
use super::{EventKind, StageAssignment, Timeline};
use crate::analysis::node_forward_flops;
use crate::error::{Error, Result};
use crate::hw_cost::{matmul_time, send_time, HardwareProfile};
use crate::model_ir::ModelGraph;

/// Per-micro-batch cost of one pipeline stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct StageCost {
    pub forward_s: f64,
    pub backward_s: f64,
    /// Transfer to the next stage (and the matching gradient back).
    pub send_s: f64,
}

/// Closed-form idle share of a balanced GPipe step.
pub fn gpipe_bubble_fraction(stages: usize, micro_batches: usize) -> f64 {
    (stages as f64 - 1.0) / (micro_batches as f64 + stages as f64 - 1.0)
}

/// Add a GPipe step to `sched`: every micro-batch's forward pass through
/// all stages, then the backward passes with the last stage first. Sends
/// block the sending group. Returns the last task of each stage.
pub(crate) fn gpipe(sched: &mut Schedule, costs: &[StageCost], groups: &[Vec<usize>], m: usize) -> Vec<usize> {
    let p = costs.len();
    let mut fwd_ready = vec![vec![0usize; m]; p];
    let mut fwd_done = vec![vec![0usize; m]; p];
    let mut last = vec![0usize; p];
    let task = |devices: &Vec<usize>, duration, deps, kind, label: String, j| Task {
        devices: devices.clone(),
        duration,
        deps,
        kind,
        label,
        micro_batch: Some(j),
    };
    for s in 0..p {
        for j in 0..m {
            let deps = if s == 0 { vec![] } else { vec![fwd_ready[s - 1][j]] };
            let f =
                sched.add(task(&groups[s], costs[s].forward_s, deps, EventKind::Forward, format!("F_{{{s},{j}}}"), j));
            fwd_done[s][j] = f;
            fwd_ready[s][j] = f;
            if s + 1 < p && costs[s].send_s > 0.0 {
                let label = format!("send_{{{s}->{},{j}}}", s + 1);
                fwd_ready[s][j] = sched.add(task(&groups[s], costs[s].send_s, vec![f], EventKind::SendRecv, label, j));
            }
        }
    }
    let mut bwd_ready = vec![vec![0usize; m]; p];
    for s in (0..p).rev() {
        for j in (0..m).rev() {
            let mut deps = vec![fwd_done[s][j]];
            if s + 1 < p {
                deps.push(bwd_ready[s + 1][j]);
            }
            let b = sched.add(task(
                &groups[s],
                costs[s].backward_s,
                deps,
                EventKind::Backward,
                format!("B_{{{s},{j}}}"),
                j,
            ));
            bwd_ready[s][j] = b;
            last[s] = b;
            if s > 0 && costs[s - 1].send_s > 0.0 {
                let label = format!("send_{{{s}->{},{j}}}", s - 1);
                let send = sched.add(task(&groups[s], costs[s - 1].send_s, vec![b], EventKind::SendRecv, label, j));
                bwd_ready[s][j] = send;
                last[s] = send;
            }
        }
    }
    last
}

/// Stage index per node and, per stage boundary, the activation bytes that
/// cross it.
pub(crate) fn boundary_bytes(g: &ModelGraph, stage_of: &[usize], stages: usize) -> Vec<f64> {
    let mut bytes = vec![0.0; stages];
    for e in g.edges() {
        let (a, b) = (stage_of[g.node_index(&e.src).unwrap()], stage_of[g.node_index(&e.dst).unwrap()]);
        for slot in bytes.iter_mut().take(b).skip(a) {
            *slot += e.shape.bytes() as f64;
        }
    }
    bytes
}

pub(crate) fn check_micro_batches(batch: u64, m: usize) -> Result<()> {
    if m == 0 || !batch.is_multiple_of(m as u64) {
        return Err(Error::validation("pipeline", format!("batch {batch} is not divisible into {m} micro-batches")));
    }
    Ok(())
}

/// GPipe step with one device per stage.
pub fn simulate_pipeline(g: &ModelGraph, stages: &StageAssignment, m: usize, p: &HardwareProfile) -> Result<Timeline> {
    check_micro_batches(g.batch_size(), m)?;
    let stage_of = stages.stage_of_nodes(g)?;
    let n = stages.len();
    let flops = node_forward_flops(g)?;
    let mut stage_flops = vec![0.0; n];
    for (i, f) in flops.iter().enumerate() {
        stage_flops[stage_of[i]] += f;
    }
    let crossing = boundary_bytes(g, &stage_of, n);
    let mf = m as f64;
    let costs: Vec<StageCost> = (0..n)
        .map(|s| {
            let forward_s = matmul_time(stage_flops[s] / mf, p);
            StageCost { forward_s, backward_s: 2.0 * forward_s, send_s: send_time(crossing[s] / mf, p) }
        })
        .collect();
    let groups: Vec<Vec<usize>> = (0..n).map(|s| stages.device_group(s, 1, 0)).collect();
    let mut sched = Schedule::new(n);
    gpipe(&mut sched, &costs, &groups, m);
    sched.run()
}
