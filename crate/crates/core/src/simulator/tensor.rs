use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::engine::{Schedule, Task};
use super::pipeline::{boundary_bytes, check_micro_batches, gpipe, StageCost};
use super::{EventKind, StageAssignment, Timeline};
use crate::analysis::{node_forward_flops, param_bytes};
use crate::error::{Error, Result};
use crate::hw_cost::{
    allreduce_time, collective_time, matmul_time, send_time, CostEstimate, CostItem, HardwareProfile,
};
use crate::mesh::{check_heads, megatron_specs, propagate, LogicalMesh, Phase, ShardingAssignment, Site};
use crate::model_ir::ModelGraph;

/// A pipeline layered on top of tensor parallelism.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelinePlan {
    pub stages: StageAssignment,
    pub micro_batches: usize,
}

#[derive(Debug, Clone)]
struct Step {
    label: String,
    kind: EventKind,
    /// `compute` or the collective kind.
    cost_kind: &'static str,
    seconds: f64,
}

#[derive(Debug, Clone, Default)]
struct NodeSteps {
    forward: Vec<Step>,
    backward: Vec<Step>,
}

// Per node, in topological order: forward compute, the node's forward
// collectives, then forward reshards on its outgoing edges. Backward runs
// the edge reshards first, then compute, then the node's backward
// collectives. Payloads and FLOPs scale linearly with `scale`.
fn node_steps(
    g: &ModelGraph,
    mesh: &LogicalMesh,
    asg: &ShardingAssignment,
    p: &HardwareProfile,
    scale: f64,
) -> Result<Vec<(usize, NodeSteps)>> {
    asg.check_total(g)?;
    let flops = node_forward_flops(g)?;
    let order = g.topological_order()?;
    let out_edges = g.out_edges();
    let devices = mesh.device_count() as f64;
    let mut by_site: BTreeMap<&Site, Vec<&crate::mesh::Collective>> = BTreeMap::new();
    for c in &asg.collectives {
        by_site.entry(&c.site).or_default().push(c);
    }
    let comm = |site: &Site, phase: Phase, name: &str, out: &mut Vec<Step>| {
        for c in by_site.get(site).into_iter().flatten().filter(|c| c.phase == phase) {
            let seconds = collective_time(c.kind, c.payload_bytes as f64 * scale, c.group_size(mesh), p);
            out.push(Step {
                label: format!("{}@{name}", c.kind.name()),
                kind: EventKind::Collective,
                cost_kind: c.kind.name(),
                seconds,
            });
        }
    };
    let mut steps = Vec::with_capacity(order.len());
    for (pos, id) in order.iter().enumerate() {
        let i = g.node_index(id).expect("node");
        let node_site = Site::Node(id.clone());
        let fwd = matmul_time(flops[i] * scale / devices, p);
        let mut s = NodeSteps::default();
        s.forward.push(Step {
            label: format!("F_{{{pos},{{j}}}}"),
            kind: EventKind::Forward,
            cost_kind: "compute",
            seconds: fwd,
        });
        comm(&node_site, Phase::Forward, id, &mut s.forward);
        for &e in &out_edges[i] {
            comm(&Site::Edge(e), Phase::Forward, &format!("edge{e}"), &mut s.forward);
        }
        for &e in &out_edges[i] {
            comm(&Site::Edge(e), Phase::Backward, &format!("edge{e}"), &mut s.backward);
        }
        s.backward.push(Step {
            label: format!("B_{{{pos},{{j}}}}"),
            kind: EventKind::Backward,
            cost_kind: "compute",
            seconds: 2.0 * fwd,
        });
        comm(&node_site, Phase::Backward, id, &mut s.backward);
        steps.push((i, s));
    }
    Ok(steps)
}

fn chain(sched: &mut Schedule, steps: &[(usize, NodeSteps)], devices: &[usize], after: Option<usize>) -> Option<usize> {
    let mut prev = after;
    let forward = steps.iter().flat_map(|(_, s)| &s.forward);
    let backward = steps.iter().rev().flat_map(|(_, s)| &s.backward);
    for step in forward.chain(backward) {
        prev = Some(sched.add(Task {
            devices: devices.to_vec(),
            duration: step.seconds,
            deps: prev.into_iter().collect(),
            kind: step.kind,
            label: step.label.clone(),
            micro_batch: None,
        }));
    }
    prev
}

/// SPMD step: every device runs every node's shard, with the assignment's
/// collectives between node computations.
pub fn simulate_tensor_parallel(
    g: &ModelGraph,
    mesh: &LogicalMesh,
    asg: &ShardingAssignment,
    p: &HardwareProfile,
) -> Result<Timeline> {
    let steps = node_steps(g, mesh, asg, p, 1.0)?;
    let devices: Vec<usize> = (0..mesh.device_count() as usize).collect();
    let mut sched = Schedule::new(devices.len());
    chain(&mut sched, &steps, &devices, None);
    sched.run()
}

/// Cost breakdown of the tensor-parallel step without building a timeline.
/// `total_s` equals the simulated step time.
pub fn tensor_parallel_cost(
    g: &ModelGraph,
    mesh: &LogicalMesh,
    asg: &ShardingAssignment,
    p: &HardwareProfile,
) -> Result<CostEstimate> {
    let steps = node_steps(g, mesh, asg, p, 1.0)?;
    let items = steps
        .iter()
        .flat_map(|(_, s)| s.forward.iter().chain(&s.backward))
        .map(|s| CostItem { site: s.label.replace("{j}", "*"), kind: s.cost_kind.to_string(), seconds: s.seconds })
        .collect();
    Ok(CostEstimate::from_items(items, false))
}

/// Data parallelism over `dp` replicas, each split `tp` ways with the
/// column/row layout and optionally pipelined. `batch` is the global batch;
/// each replica processes `batch / dp` samples, scaling the graph's own
/// batch linearly. Replicas synchronize gradients with one all-reduce of
/// their parameter shard at the end of the step.
pub fn simulate_combined(
    g: &ModelGraph,
    dp: usize,
    tp: usize,
    pipeline: Option<&PipelinePlan>,
    batch: u64,
    p: &HardwareProfile,
) -> Result<Timeline> {
    let stages = pipeline.map_or(1, |pp| pp.stages.len());
    let cores = p.cores_per_slice as usize;
    if dp == 0 || tp == 0 || dp * tp * stages != cores {
        return Err(Error::Factorization { dp, tp, stages, cores });
    }
    if !batch.is_multiple_of(dp as u64) {
        return Err(Error::validation("combined parallelism", format!("batch {batch} not divisible by dp {dp}")));
    }
    if let Some(heads) = g.attention_heads() {
        check_heads(heads, tp as u64)?;
    }
    let replica_batch = batch / dp as u64;
    let scale = replica_batch as f64 / g.batch_size() as f64;
    let mesh = LogicalMesh::data_model(1, tp as u64)?;
    let asg = propagate(g, &mesh, &megatron_specs(g, "data", "model"), &BTreeMap::new())?;
    let steps = node_steps(g, &mesh, &asg, p, scale)?;
    let mut sched = Schedule::new(cores);
    let per_replica = tp * stages;

    match pipeline {
        None => {
            let mut ends = Vec::new();
            for r in 0..dp {
                let devices: Vec<usize> = (r * per_replica..(r + 1) * per_replica).collect();
                ends.extend(chain(&mut sched, &steps, &devices, None));
            }
            if dp > 1 {
                let payload = param_bytes(g) as f64 / tp as f64;
                sched.add(grad_sync((0..cores).collect(), allreduce_time(payload, dp as u64, p), ends));
            }
        }
        Some(pp) => {
            let m = pp.micro_batches;
            check_micro_batches(replica_batch, m)?;
            let stage_of = pp.stages.stage_of_nodes(g)?;
            let mut costs = vec![StageCost { forward_s: 0.0, backward_s: 0.0, send_s: 0.0 }; stages];
            for (i, s) in &steps {
                let c = &mut costs[stage_of[*i]];
                c.forward_s += s.forward.iter().map(|x| x.seconds).sum::<f64>() / m as f64;
                c.backward_s += s.backward.iter().map(|x| x.seconds).sum::<f64>() / m as f64;
            }
            let crossing = boundary_bytes(g, &stage_of, stages);
            for (c, bytes) in costs.iter_mut().zip(crossing) {
                c.send_s = send_time(bytes * scale / m as f64, p);
            }
            let mut stage_params = vec![0u64; stages];
            for (i, node) in g.nodes().iter().enumerate() {
                stage_params[stage_of[i]] += node.param_bytes();
            }
            let mut ends = vec![Vec::new(); stages];
            for r in 0..dp {
                let groups: Vec<Vec<usize>> =
                    (0..stages).map(|s| pp.stages.device_group(s, tp, r * per_replica)).collect();
                for (s, last) in gpipe(&mut sched, &costs, &groups, m).into_iter().enumerate() {
                    ends[s].push(last);
                }
            }
            if dp > 1 {
                for (s, deps) in ends.into_iter().enumerate() {
                    let devices = (0..dp).flat_map(|r| pp.stages.device_group(s, tp, r * per_replica)).collect();
                    let payload = stage_params[s] as f64 / tp as f64;
                    sched.add(grad_sync(devices, allreduce_time(payload, dp as u64, p), deps));
                }
            }
        }
    }
    sched.run()
}

fn grad_sync(devices: Vec<usize>, duration: f64, deps: Vec<usize>) -> Task {
    Task { devices, duration, deps, kind: EventKind::Collective, label: "grad_all_reduce".into(), micro_batch: None }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::CollectiveKind;
    use crate::model_ir::{build_decoder_only, TransformerConfig};

    fn cfg() -> TransformerConfig {
        TransformerConfig::new(64, 2, 4).with_vocab(128).with_seq(16).with_batch(2)
    }

    fn assign(g: &ModelGraph, tp: u64) -> (LogicalMesh, ShardingAssignment) {
        let mesh = LogicalMesh::data_model(1, tp).unwrap();
        let asg = propagate(g, &mesh, &megatron_specs(g, "data", "model"), &BTreeMap::new()).unwrap();
        (mesh, asg)
    }

    #[test]
    fn perfect_scaling_with_free_collectives() {
        let g = build_decoder_only(&cfg()).unwrap();
        let p = HardwareProfile::builtin("v4").unwrap().ideal_links();
        let (m1, a1) = assign(&g, 1);
        let (m4, a4) = assign(&g, 4);
        let t1 = simulate_tensor_parallel(&g, &m1, &a1, &p).unwrap();
        let t4 = simulate_tensor_parallel(&g, &m4, &a4, &p).unwrap();
        t4.check().unwrap();
        assert!((t4.step_time * 4.0 - t1.step_time).abs() < 1e-12 * t1.step_time);
        let flops = crate::analysis::flops_per_step(&g).unwrap().step;
        assert!((t1.step_time - matmul_time(flops, &p)).abs() < 1e-12 * t1.step_time);
    }

    #[test]
    fn block_step_is_compute_plus_four_all_reduces() {
        let c = TransformerConfig { layers: 1, ..cfg() };
        let g = build_decoder_only(&c).unwrap();
        let p = HardwareProfile::builtin("v4").unwrap();
        let (mesh, asg) = assign(&g, 4);
        let cost = tensor_parallel_cost(&g, &mesh, &asg, &p).unwrap();
        let block: Vec<_> = cost.breakdown.iter().filter(|i| i.site.ends_with("@block_0")).collect();
        assert_eq!(block.len(), 4);
        // Activations are (b, s, h), replicated over the model axis.
        let act = (c.batch * c.seq_len * c.hidden * 4) as f64;
        for item in block {
            assert_eq!(item.kind, "all_reduce");
            assert!((item.seconds - allreduce_time(act, 4, &p)).abs() < 1e-18);
        }
        let t = simulate_tensor_parallel(&g, &mesh, &asg, &p).unwrap();
        assert!((t.step_time - cost.total_s).abs() < 1e-12 * cost.total_s);
        assert_eq!(asg.count(CollectiveKind::AllReduce, Phase::Forward), 4);
    }

    #[test]
    fn combined_dp1_matches_tensor() {
        let g = build_decoder_only(&cfg()).unwrap();
        let p = HardwareProfile::builtin("v4-4").unwrap();
        let (mesh, asg) = assign(&g, 4);
        let a = simulate_tensor_parallel(&g, &mesh, &asg, &p).unwrap();
        let b = simulate_combined(&g, 1, 4, None, 2, &p).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn data_parallel_scaling_and_sync() {
        let g = build_decoder_only(&cfg()).unwrap();
        let free = HardwareProfile::builtin("v4-4").unwrap().ideal_links();
        let one = simulate_combined(&g, 1, 4, None, 2, &free.clone()).unwrap();
        let two = simulate_combined(&g, 2, 2, None, 4, &free).unwrap();
        let one_tp2 = simulate_combined(&g, 1, 2, None, 2, &free.clone().with_cores(2)).unwrap();
        assert!((two.step_time - one_tp2.step_time).abs() < 1e-12 * one.step_time);

        let p = HardwareProfile::builtin("v4-4").unwrap();
        let t = simulate_combined(&g, 2, 2, None, 4, &p).unwrap();
        t.check().unwrap();
        let sync: Vec<_> = t.events.iter().filter(|e| e.label == "grad_all_reduce").collect();
        assert_eq!(sync.len(), 4);
        assert!(sync.iter().all(|e| e.end == t.step_time));
        let expected = allreduce_time(param_bytes(&g) as f64 / 2.0, 2, &p);
        assert!((sync[0].end - sync[0].start - expected).abs() < 1e-15);
    }

    #[test]
    fn factorization_is_checked() {
        let g = build_decoder_only(&cfg()).unwrap();
        let p = HardwareProfile::builtin("v4-8").unwrap();
        match simulate_combined(&g, 2, 2, None, 2, &p) {
            Err(Error::Factorization { dp: 2, tp: 2, stages: 1, cores: 8 }) => {}
            other => panic!("{other:?}"),
        }
        assert!(matches!(simulate_combined(&g, 1, 8, None, 2, &p), Err(Error::HeadsNotDivisible { .. })));
    }

    #[test]
    fn pipelined_replicas() {
        let g = build_decoder_only(&cfg()).unwrap();
        let p = HardwareProfile::builtin("v4-8").unwrap();
        let plan = PipelinePlan { stages: StageAssignment::balanced(&g, 2).unwrap(), micro_batches: 2 };
        let t = simulate_combined(&g, 2, 2, Some(&plan), 8, &p).unwrap();
        t.check().unwrap();
        assert_eq!(t.devices, 8);
        let syncs = t.events.iter().filter(|e| e.label == "grad_all_reduce" && e.device == 0).count();
        assert_eq!(syncs, 1);
    }
}
