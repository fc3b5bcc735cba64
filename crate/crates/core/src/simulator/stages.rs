use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::analysis::node_forward_flops;
use crate::error::{Error, Result};
use crate::model_ir::ModelGraph;

/// Contiguous partition of a graph's nodes into pipeline stages.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageAssignment {
    stages: Vec<Vec<String>>,
}

impl StageAssignment {
    pub fn new(g: &ModelGraph, stages: Vec<Vec<String>>) -> Result<Self> {
        let sa = StageAssignment { stages };
        sa.stage_of_nodes(g)?;
        Ok(sa)
    }

    /// Split the topological order into exactly `p` contiguous stages,
    /// minimizing the largest stage's forward FLOPs.
    pub fn balanced(g: &ModelGraph, p: usize) -> Result<Self> {
        let order = g.topological_order()?;
        if p == 0 || p > order.len() {
            return Err(Error::validation(
                "stage assignment",
                format!("cannot split {} nodes into {p} stages", order.len()),
            ));
        }
        let flops = node_forward_flops(g)?;
        let weights: Vec<f64> = order.iter().map(|id| flops[g.node_index(id).expect("node")]).collect();
        let sizes = balanced_sizes(&weights, p);
        let mut stages = Vec::with_capacity(p);
        let mut it = order.into_iter();
        for n in sizes {
            stages.push(it.by_ref().take(n).collect());
        }
        Self::new(g, stages)
    }

    pub fn stages(&self) -> &[Vec<String>] {
        &self.stages
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn stage_of(&self, id: &str) -> Option<usize> {
        self.stages.iter().position(|s| s.iter().any(|n| n == id))
    }

    /// Devices that run `stage` when each stage occupies `group` devices,
    /// starting at `offset`.
    pub fn device_group(&self, stage: usize, group: usize, offset: usize) -> Vec<usize> {
        (offset + stage * group..offset + (stage + 1) * group).collect()
    }

    /// Stage index per node index of `g`; checks the partition is disjoint,
    /// total and never sends an edge backwards.
    pub(crate) fn stage_of_nodes(&self, g: &ModelGraph) -> Result<Vec<usize>> {
        let bad = |reason: String| Err(Error::validation("stage assignment", reason));
        if self.stages.is_empty() {
            return bad("no stages".into());
        }
        let mut stage: HashMap<&str, usize> = HashMap::new();
        for (s, nodes) in self.stages.iter().enumerate() {
            if nodes.is_empty() {
                return bad(format!("stage {s} is empty"));
            }
            for id in nodes {
                if g.node(id).is_none() {
                    return Err(Error::UnknownNode(id.clone()));
                }
                if stage.insert(id, s).is_some() {
                    return bad(format!("node `{id}` is in two stages"));
                }
            }
        }
        if let Some(n) = g.nodes().iter().find(|n| !stage.contains_key(n.id.as_str())) {
            return bad(format!("node `{}` is in no stage", n.id));
        }
        for e in g.edges() {
            if stage[e.src.as_str()] > stage[e.dst.as_str()] {
                return bad(format!("edge {} -> {} runs from a later stage to an earlier one", e.src, e.dst));
            }
        }
        Ok(g.nodes().iter().map(|n| stage[n.id.as_str()]).collect())
    }
}

fn greedy(weights: &[f64], cap: f64) -> Vec<usize> {
    let mut sizes = Vec::new();
    let (mut load, mut n) = (0.0, 0);
    for &w in weights {
        if n > 0 && load + w > cap {
            sizes.push(n);
            load = 0.0;
            n = 0;
        }
        load += w;
        n += 1;
    }
    if n > 0 {
        sizes.push(n);
    }
    sizes
}

// Smallest cap (by bisection) for which greedy filling needs at most `p`
// stages, then split the heaviest multi-node stages until there are `p`.
fn balanced_sizes(weights: &[f64], p: usize) -> Vec<usize> {
    let max = weights.iter().copied().fold(0.0, f64::max);
    let total: f64 = weights.iter().sum();
    let (mut lo, mut hi) = (max, total.max(max));
    if greedy(weights, lo).len() > p {
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if greedy(weights, mid).len() <= p {
                hi = mid;
            } else {
                lo = mid;
            }
        }
    } else {
        hi = lo;
    }
    let mut sizes = greedy(weights, hi);
    while sizes.len() < p {
        let mut start = 0;
        let mut best: Option<(usize, usize, f64)> = None;
        for (s, &n) in sizes.iter().enumerate() {
            let load: f64 = weights[start..start + n].iter().sum();
            if n >= 2 && best.is_none_or(|(_, _, l)| load > l) {
                best = Some((s, start, load));
            }
            start += n;
        }
        let (s, start, load) = best.expect("p <= node count leaves a splittable stage");
        let n = sizes[s];
        let mut prefix = 0.0;
        let mut cut = 1;
        let mut cut_cost = f64::INFINITY;
        for k in 1..n {
            prefix += weights[start + k - 1];
            let cost = prefix.max(load - prefix);
            if cost < cut_cost {
                cut_cost = cost;
                cut = k;
            }
        }
        sizes.splice(s..=s, [cut, n - cut]);
    }
    sizes
}
