//! Sharding propagation over a lowered model graph.
//!
//! Hard specs come from `io_specs` (graph inputs, params and edges into
//! sinks) and `constraints` (anything). Unknown tensors are filled by
//! alternating sweeps: forward in topological order, pushing specs through
//! each node's primitive program, then backward, pulling input specs from
//! known outputs and weights. Source inputs that stay unknown are
//! replicated one at a time until the fixed point is total. A final pass
//! walks every node again and records the collectives the layout needs.
//!
//! Per-primitive rules:
//! - elementwise: inputs are brought to the most sharded input spec (first
//!   input on ties); broadcast params follow the last axis.
//! - matmul: the output keeps the batch axes of `x` and the column axes of
//!   the weight. A sharded contraction produces partial sums and a forward
//!   all-reduce; sharded output columns make the input gradient partial and
//!   cost a backward all-reduce.
//! - attention: the fused projection axis keeps its sharding when it splits
//!   whole heads; the sequence axis is gathered.
//! - reduce: partial sums over non-batch axes are all-reduced. Batch-axis
//!   partials fold into the step-level gradient sync.
//!
//! Weight-gradient synchronization is a step-level concern and is not
//! recorded here. The greedy "most sharded wins" resolution approximates a
//! minimum-payload layout; it is not globally optimal.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{shard_shape, LogicalMesh, PartitionSpec};
use crate::error::{Error, Result};
use crate::model_ir::program::{NodeProgram, Prim};
use crate::model_ir::{LoweredGraph, ModelGraph, NodeKind, NodeSpec, TensorShape};

/// A tensor that receives a partition spec.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TensorKey {
    /// External input read by a source node.
    Input(String),
    /// Activation on an edge, by edge index.
    Edge(usize),
    Param {
        node: String,
        name: String,
    },
}

impl TensorKey {
    pub fn param(node: impl Into<String>, name: impl Into<String>) -> Self {
        TensorKey::Param { node: node.into(), name: name.into() }
    }
}

impl fmt::Display for TensorKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorKey::Input(n) => write!(f, "input:{n}"),
            TensorKey::Edge(e) => write!(f, "edge:{e}"),
            TensorKey::Param { node, name } => write!(f, "param:{node}/{name}"),
        }
    }
}

impl FromStr for TensorKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::validation("tensor key", format!("`{s}` is not input:NODE, edge:N or param:NODE/NAME"));
        let (tag, rest) = s.split_once(':').ok_or_else(bad)?;
        match tag {
            "input" if !rest.is_empty() => Ok(TensorKey::Input(rest.to_string())),
            "edge" => rest.parse().map(TensorKey::Edge).map_err(|_| bad()),
            "param" => {
                let (node, name) = rest.split_once('/').ok_or_else(bad)?;
                Ok(TensorKey::param(node, name))
            }
            _ => Err(bad()),
        }
    }
}

impl Serialize for TensorKey {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TensorKey {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(deserializer)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Forward,
    Backward,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    Node(String),
    Edge(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollectiveKind {
    AllReduce,
    AllGather,
    ReduceScatter,
    AllToAll,
}

impl CollectiveKind {
    pub fn name(self) -> &'static str {
        match self {
            CollectiveKind::AllReduce => "all_reduce",
            CollectiveKind::AllGather => "all_gather",
            CollectiveKind::ReduceScatter => "reduce_scatter",
            CollectiveKind::AllToAll => "all_to_all",
        }
    }
}

/// A collective required by the layout. `payload_bytes` is the per-device
/// buffer on the larger side (the gathered or pre-scatter tensor).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Collective {
    pub phase: Phase,
    pub site: Site,
    pub kind: CollectiveKind,
    pub payload_bytes: u64,
    pub mesh_axes: Vec<String>,
}

impl Collective {
    /// Number of devices taking part.
    pub fn group_size(&self, mesh: &LogicalMesh) -> u64 {
        mesh.factor(&self.mesh_axes)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ShardingAssignment {
    pub specs: BTreeMap<TensorKey, PartitionSpec>,
    pub collectives: Vec<Collective>,
}

impl ShardingAssignment {
    pub fn spec(&self, key: &TensorKey) -> Result<&PartitionSpec> {
        self.specs.get(key).ok_or_else(|| Error::MissingSpec(key.to_string()))
    }

    pub fn count(&self, kind: CollectiveKind, phase: Phase) -> usize {
        self.collectives.iter().filter(|c| c.kind == kind && c.phase == phase).count()
    }

    pub fn at<'a>(&'a self, site: &'a Site) -> impl Iterator<Item = &'a Collective> + 'a {
        self.collectives.iter().filter(move |c| &c.site == site)
    }

    /// Specs of every tensor not named in `io`, suitable as constraints.
    pub fn interior_specs(&self, io: &BTreeMap<TensorKey, PartitionSpec>) -> BTreeMap<TensorKey, PartitionSpec> {
        self.specs.iter().filter(|(k, _)| !io.contains_key(k)).map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    /// Every tensor of `g` has a spec and every collective site exists.
    pub fn check_total(&self, g: &ModelGraph) -> Result<()> {
        for key in tensor_shapes(g)?.keys() {
            self.spec(key)?;
        }
        for c in &self.collectives {
            let ok = match &c.site {
                Site::Node(id) => g.node(id).is_some(),
                Site::Edge(e) => *e < g.edges().len(),
            };
            if !ok {
                return Err(Error::Invariant(format!("collective at missing site {:?}", c.site)));
            }
        }
        Ok(())
    }
}

/// Logical shape of every tensor that takes a spec.
pub fn tensor_shapes(g: &ModelGraph) -> Result<BTreeMap<TensorKey, TensorShape>> {
    let lowered = g.lower()?;
    Ok(shapes_of(g, &lowered))
}

fn shapes_of(g: &ModelGraph, lowered: &LoweredGraph) -> BTreeMap<TensorKey, TensorShape> {
    let mut shapes = BTreeMap::new();
    for (node, prog) in g.nodes().iter().zip(&lowered.programs) {
        if let Some(i) = prog.implicit_input {
            shapes.insert(TensorKey::Input(node.id.clone()), prog.locals[i].clone());
        }
        for p in &node.params {
            shapes.insert(TensorKey::param(&node.id, &p.name), p.shape.clone());
        }
    }
    for (e, edge) in g.edges().iter().enumerate() {
        shapes.insert(TensorKey::Edge(e), edge.shape.clone());
    }
    shapes
}

fn bytes(shape: &TensorShape, spec: &PartitionSpec, mesh: &LogicalMesh) -> u64 {
    shape.bytes() / spec.shard_count(mesh).max(1)
}

// Clear any tensor axis whose extent the assigned mesh axes do not divide.
fn fit(mut spec: PartitionSpec, shape: &TensorShape, mesh: &LogicalMesh) -> PartitionSpec {
    for (axes, &extent) in spec.axes_mut().iter_mut().zip(&shape.dims) {
        if extent % mesh.factor(axes) != 0 {
            axes.clear();
        }
    }
    spec
}

fn without(spec: &PartitionSpec, drop: &[String]) -> PartitionSpec {
    PartitionSpec::new(spec.axes().iter().map(|a| a.iter().filter(|n| !drop.contains(n)).cloned().collect()).collect())
}

struct Recorder<'a> {
    mesh: &'a LogicalMesh,
    out: Vec<Collective>,
}

impl Recorder<'_> {
    fn push(&mut self, site: &Site, phase: Phase, kind: CollectiveKind, payload_bytes: u64, mesh_axes: Vec<String>) {
        if mesh_axes.is_empty() {
            return;
        }
        self.out.push(Collective { phase, site: site.clone(), kind, payload_bytes, mesh_axes });
    }

    /// Collectives that move `shape` from layout `from` to layout `to`.
    /// Dropped axes are gathered (or exchanged when they reappear on another
    /// tensor axis); added axes are a local slice. The backward pass runs the
    /// transposes.
    fn reshard(&mut self, site: &Site, shape: &TensorShape, from: &PartitionSpec, to: &PartitionSpec, backward: bool) {
        if from == to {
            return;
        }
        let to_all: BTreeSet<&String> = to.mesh_axes().collect();
        let from_all: BTreeSet<&String> = from.mesh_axes().collect();
        let (mut gathered, mut moved, mut sliced) = (Vec::new(), Vec::new(), Vec::new());
        for (f, t) in from.axes().iter().zip(to.axes()) {
            if f == t {
                continue;
            }
            let same_set = f.len() == t.len() && f.iter().all(|n| t.contains(n));
            for n in f {
                if same_set || (!t.contains(n) && to_all.contains(n)) {
                    moved.push(n.clone());
                } else if !t.contains(n) {
                    gathered.push(n.clone());
                }
            }
            sliced.extend(t.iter().filter(|n| !f.contains(n) && !from_all.contains(n)).cloned());
        }
        let mid = bytes(shape, &without(from, &gathered), self.mesh);
        use CollectiveKind::*;
        self.push(site, Phase::Forward, AllGather, mid, gathered.clone());
        self.push(site, Phase::Forward, AllToAll, mid, moved.clone());
        if backward {
            self.push(site, Phase::Backward, ReduceScatter, mid, gathered);
            self.push(site, Phase::Backward, AllToAll, mid, moved);
            let unsliced = bytes(shape, &without(to, &sliced), self.mesh);
            self.push(site, Phase::Backward, AllGather, unsliced, sliced);
        }
    }
}

/// Push specs through one node's program. Unknown params are filled in
/// place; collectives go to `rec` under the node's site.
fn walk(
    node: &NodeSpec,
    prog: &NodeProgram,
    inputs: Vec<PartitionSpec>,
    params: &mut [Option<PartitionSpec>],
    rec: &mut Recorder<'_>,
) -> PartitionSpec {
    let mesh = rec.mesh;
    let site = Site::Node(node.id.clone());
    let mut ls: Vec<Option<PartitionSpec>> = vec![None; prog.locals.len()];
    let input_locals = prog.inputs.iter().chain(prog.implicit_input.iter());
    for (&i, spec) in input_locals.zip(inputs) {
        ls[i] = Some(spec);
    }
    let vector_param = |params: &mut [Option<PartitionSpec>], p: usize, want: &[String], rec: &mut Recorder<'_>| {
        let want = PartitionSpec::new(vec![want.to_vec()]);
        match &params[p] {
            None => params[p] = Some(want),
            Some(have) if *have != want => rec.reshard(&site, &node.params[p].shape, &have.clone(), &want, false),
            Some(_) => {}
        }
    };

    for prim in &prog.prims {
        match prim {
            Prim::Elementwise { inputs, params: ps, out } => {
                let specs: Vec<PartitionSpec> = inputs.iter().map(|&i| ls[i].clone().expect("input spec")).collect();
                let mut winner = 0;
                for (j, s) in specs.iter().enumerate() {
                    if s.shard_count(mesh) > specs[winner].shard_count(mesh) {
                        winner = j;
                    }
                }
                let w = specs[winner].clone();
                for (j, s) in specs.iter().enumerate() {
                    rec.reshard(&site, &prog.locals[inputs[j]], s, &w, true);
                }
                let last = w.axes().last().cloned().unwrap_or_default();
                for &p in ps {
                    vector_param(params, p, &last, rec);
                }
                ls[*out] = Some(w);
            }
            Prim::Matmul { x, weight, bias, out, one_hot } => {
                let xs = ls[*x].clone().expect("input spec");
                let xshape = &prog.locals[*x];
                let r = xs.rank();
                let (lead, a): (Vec<Vec<String>>, Vec<String>) = if *one_hot || r == 0 {
                    (xs.axes().to_vec(), Vec::new())
                } else {
                    (xs.axes()[..r - 1].to_vec(), xs.axis(r - 1).to_vec())
                };
                let lead_axes: BTreeSet<&String> = lead.iter().flatten().collect();
                let w = params[*weight]
                    .get_or_insert_with(|| {
                        let rows = if *one_hot { Vec::new() } else { a.clone() };
                        PartitionSpec::new(vec![rows, Vec::new()])
                    })
                    .clone();
                let mut gathered = Vec::new();
                let b: Vec<String> = w
                    .axis(0)
                    .iter()
                    .filter(|n| {
                        !lead_axes.contains(n) || {
                            gathered.push((*n).clone());
                            false
                        }
                    })
                    .cloned()
                    .collect();
                let k = if *one_hot || !b.is_empty() { b.clone() } else { a.clone() };
                let mut aligned = lead.clone();
                if !*one_hot && r > 0 {
                    aligned.push(k.clone());
                }
                let aligned = PartitionSpec::new(aligned);
                if !*one_hot && !b.is_empty() {
                    rec.reshard(&site, xshape, &xs, &aligned, true);
                }
                let c: Vec<String> = w
                    .axis(1)
                    .iter()
                    .filter(|n| {
                        (!lead_axes.contains(n) && !k.contains(n)) || {
                            gathered.push((*n).clone());
                            false
                        }
                    })
                    .cloned()
                    .collect();
                let wshape = &node.params[*weight].shape;
                let wbytes = wshape.bytes() / (mesh.factor(&b) * mesh.factor(&c));
                rec.push(&site, Phase::Forward, CollectiveKind::AllGather, wbytes, gathered);

                let mut out_spec = lead.clone();
                out_spec.push(c.clone());
                let out_spec = PartitionSpec::new(out_spec);
                let out_bytes = bytes(&prog.locals[*out], &out_spec, mesh);
                rec.push(&site, Phase::Forward, CollectiveKind::AllReduce, out_bytes, k.clone());
                if !*one_hot {
                    let x_bytes = bytes(xshape, &aligned, mesh);
                    rec.push(&site, Phase::Backward, CollectiveKind::AllReduce, x_bytes, c.clone());
                }
                if let Some(bias) = bias {
                    vector_param(params, *bias, &c, rec);
                }
                ls[*out] = Some(out_spec);
            }
            Prim::AttentionCore { qkv, out, heads } => {
                let q = ls[*qkv].clone().expect("input spec");
                let r = q.rank();
                let mut target = q.clone();
                if r >= 2 {
                    target.axes_mut()[r - 2].clear();
                }
                if r >= 1 && heads % mesh.factor(q.axis(r - 1)) != 0 {
                    target.axes_mut()[r - 1].clear();
                }
                rec.reshard(&site, &prog.locals[*qkv], &q, &target, true);
                ls[*out] = Some(target);
            }
            Prim::Reduce { input, out } => {
                let s = ls[*input].clone().expect("input spec");
                let shape = &prog.locals[*input];
                let partial: Vec<String> = s.axes().iter().skip(1).flatten().cloned().collect();
                if !partial.is_empty() {
                    let last = shape.dims.last().copied().unwrap_or(1) / mesh.factor(s.axes().last().unwrap());
                    let rows = shape.elements() / s.shard_count(mesh) / last.max(1);
                    rec.push(&site, Phase::Forward, CollectiveKind::AllReduce, rows * 4, partial);
                }
                ls[*out] = Some(PartitionSpec::replicated(prog.locals[*out].rank()));
            }
        }
    }
    ls[prog.output].clone().expect("output spec")
}

struct Propagation<'a> {
    g: &'a ModelGraph,
    mesh: &'a LogicalMesh,
    lowered: LoweredGraph,
    shapes: BTreeMap<TensorKey, TensorShape>,
    known: BTreeMap<TensorKey, PartitionSpec>,
}

impl Propagation<'_> {
    fn input_keys(&self, i: usize) -> Vec<TensorKey> {
        if self.lowered.programs[i].implicit_input.is_some() {
            vec![TensorKey::Input(self.g.nodes()[i].id.clone())]
        } else {
            self.lowered.in_edges[i].iter().map(|&e| TensorKey::Edge(e)).collect()
        }
    }

    fn param_specs(&self, i: usize) -> Vec<Option<PartitionSpec>> {
        let node = &self.g.nodes()[i];
        node.params.iter().map(|p| self.known.get(&TensorKey::param(&node.id, &p.name)).cloned()).collect()
    }

    fn insert(&mut self, key: TensorKey, spec: PartitionSpec) -> bool {
        if self.known.contains_key(&key) {
            return false;
        }
        let spec = fit(spec, &self.shapes[&key], self.mesh);
        self.known.insert(key, spec);
        true
    }

    fn forward(&mut self) -> bool {
        let mut changed = false;
        for pos in 0..self.lowered.order.len() {
            let i = self.lowered.order[pos];
            let keys = self.input_keys(i);
            let Some(inputs) = keys.iter().map(|k| self.known.get(k).cloned()).collect::<Option<Vec<_>>>() else {
                continue;
            };
            let node = &self.g.nodes()[i];
            let mut params = self.param_specs(i);
            let mut rec = Recorder { mesh: self.mesh, out: Vec::new() };
            let out = walk(node, &self.lowered.programs[i], inputs, &mut params, &mut rec);
            for (p, spec) in node.params.iter().zip(params) {
                changed |= self.insert(TensorKey::param(&node.id, &p.name), spec.expect("walk fills params"));
            }
            for e in self.lowered.out_edges[i].clone() {
                changed |= self.insert(TensorKey::Edge(e), out.clone());
            }
        }
        changed
    }

    fn backward(&mut self) -> bool {
        let mut changed = false;
        for pos in (0..self.lowered.order.len()).rev() {
            let i = self.lowered.order[pos];
            for (j, key) in self.input_keys(i).into_iter().enumerate() {
                if self.known.contains_key(&key) {
                    continue;
                }
                if let Some(spec) = self.pull_input(i, j) {
                    changed |= self.insert(key, spec);
                }
            }
        }
        changed
    }

    // Input spec implied by the node's known output and leading weight.
    fn pull_input(&self, i: usize, j: usize) -> Option<PartitionSpec> {
        let node = &self.g.nodes()[i];
        let prog = &self.lowered.programs[i];
        let local = prog.inputs.get(j).copied().or(prog.implicit_input)?;
        let xshape = &prog.locals[local];
        let rx = xshape.rank();
        let ids = prog.implicit_input == Some(local) && node.kind == NodeKind::Embedding;
        let lead_x = if ids { rx } else { rx.saturating_sub(1) };
        let mut spec = PartitionSpec::replicated(rx);
        let mut informed = false;

        let oshape = prog.output_shape();
        let out_spec = self.lowered.out_edges[i].iter().find_map(|&e| self.known.get(&TensorKey::Edge(e)));
        if let Some(o) = out_spec {
            informed = true;
            let ro = o.rank();
            for d in 0..lead_x.min(ro.saturating_sub(1)) {
                if xshape.dims[d] == oshape.dims[d] {
                    spec.axes_mut()[d] = o.axis(d).to_vec();
                }
            }
            let pure = prog.prims.iter().all(|p| matches!(p, Prim::Elementwise { .. }));
            if pure && !ids && rx > 0 && ro == rx && xshape.dims[rx - 1] == oshape.dims[rx - 1] {
                spec.axes_mut()[rx - 1] = o.axis(rx - 1).to_vec();
            }
        }
        if !ids && rx > 0 && prog.inputs.len() <= 1 {
            if let Some(Prim::Matmul { x, weight, one_hot: false, .. }) = prog.prims.first() {
                let key = TensorKey::param(&node.id, &node.params[*weight].name);
                if let (true, Some(w)) = (*x == local, self.known.get(&key)) {
                    if !w.axis(0).is_empty() {
                        informed = true;
                        spec.axes_mut()[rx - 1] = w.axis(0).to_vec();
                    }
                }
            }
        }
        if !informed {
            return None;
        }
        let mut seen = BTreeSet::new();
        for axes in spec.axes_mut() {
            axes.retain(|n| seen.insert(n.clone()));
        }
        Some(spec)
    }
}

/// Complete a sharding assignment for `g` on `mesh`.
pub fn propagate(
    g: &ModelGraph,
    mesh: &LogicalMesh,
    io_specs: &BTreeMap<TensorKey, PartitionSpec>,
    constraints: &BTreeMap<TensorKey, PartitionSpec>,
) -> Result<ShardingAssignment> {
    let lowered = g.lower()?;
    let shapes = shapes_of(g, &lowered);
    let sinks: BTreeSet<&str> = g.sinks().into_iter().collect();

    let mut hard: BTreeMap<TensorKey, PartitionSpec> = BTreeMap::new();
    for (is_io, map) in [(true, io_specs), (false, constraints)] {
        for (key, spec) in map {
            let shape = shapes.get(key).ok_or_else(|| Error::validation("sharding", format!("no tensor {key}")))?;
            if is_io {
                let boundary = match key {
                    TensorKey::Edge(e) => sinks.contains(g.edges()[*e].dst.as_str()),
                    _ => true,
                };
                if !boundary {
                    return Err(Error::validation(
                        "sharding",
                        format!("{key} is interior; pass it as a constraint instead of an io spec"),
                    ));
                }
            }
            spec.validate(mesh)?;
            let spec = spec.normalized(mesh);
            shard_shape(shape, &spec, mesh)?;
            if let Some(prev) = hard.get(key) {
                if *prev != spec {
                    return Err(Error::ConflictingConstraints {
                        tensor: key.to_string(),
                        first: prev.to_string(),
                        second: spec.to_string(),
                    });
                }
            }
            hard.insert(key.clone(), spec);
        }
    }

    let mut prop = Propagation { g, mesh, lowered, shapes, known: hard };
    loop {
        let fwd = prop.forward();
        let bwd = prop.backward();
        if fwd || bwd {
            continue;
        }
        let pending = prop.lowered.order.iter().find_map(|&i| {
            prop.input_keys(i).into_iter().find(|k| matches!(k, TensorKey::Input(_)) && !prop.known.contains_key(k))
        });
        match pending {
            Some(key) => {
                let rank = prop.shapes[&key].rank();
                prop.insert(key, PartitionSpec::replicated(rank));
            }
            None => break,
        }
    }
    let keys: Vec<TensorKey> = prop.shapes.keys().cloned().collect();
    for key in keys {
        let rank = prop.shapes[&key].rank();
        prop.insert(key, PartitionSpec::replicated(rank));
    }

    let mut rec = Recorder { mesh, out: Vec::new() };
    for &i in &prop.lowered.order {
        let node = &g.nodes()[i];
        let inputs = prop.input_keys(i).iter().map(|k| prop.known[k].clone()).collect();
        let mut params = prop.param_specs(i);
        let out = walk(node, &prop.lowered.programs[i], inputs, &mut params, &mut rec);
        for &e in &prop.lowered.out_edges[i] {
            let spec = &prop.known[&TensorKey::Edge(e)];
            rec.reshard(&Site::Edge(e), &g.edges()[e].shape, &out, spec, true);
        }
    }
    Ok(ShardingAssignment { specs: prop.known, collectives: rec.out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::megatron_specs;
    use crate::model_ir::{build_decoder_only, DType, TransformerConfig};

    fn f32(d: &[u64]) -> TensorShape {
        TensorShape::new(d.to_vec(), DType::Float32).unwrap()
    }

    fn spec(s: &str) -> PartitionSpec {
        s.parse().unwrap()
    }

    fn elementwise_chain() -> ModelGraph {
        let mut g = ModelGraph::new();
        for id in ["a", "b", "c"] {
            g.add_node(NodeSpec::new(id, NodeKind::Layernorm)).unwrap();
        }
        g.add_edge("a", "b", f32(&[4, 8, 16])).unwrap();
        g.add_edge("b", "c", f32(&[4, 8, 16])).unwrap();
        g
    }

    #[test]
    fn elementwise_chain_preserves_spec() {
        let g = elementwise_chain();
        let mesh = LogicalMesh::data_model(2, 4).unwrap();
        let io = BTreeMap::from([(TensorKey::Input("a".into()), spec("P(axis0=data, axis1=~, axis2=~)"))]);
        let a = propagate(&g, &mesh, &io, &BTreeMap::new()).unwrap();
        assert!(a.collectives.is_empty(), "{:?}", a.collectives);
        for e in 0..2 {
            assert_eq!(a.spec(&TensorKey::Edge(e)).unwrap(), &spec("P(axis0=data, axis1=~, axis2=~)"));
        }
        a.check_total(&g).unwrap();
    }

    #[test]
    fn sharded_contraction_needs_one_all_reduce() {
        let (b, s, h, n) = (2, 8, 16, 32);
        let mut g = ModelGraph::new();
        let node = NodeSpec::new("mm", NodeKind::Generic)
            .param("w", f32(&[h, n]))
            .attr("batch", b as f64)
            .attr("seq", s as f64)
            .attr("hidden", h as f64);
        g.add_node(node).unwrap();
        let mesh = LogicalMesh::new([("model", 4)]).unwrap();
        let io = BTreeMap::from([(TensorKey::param("mm", "w"), spec("P(axis0=model, axis1=~)"))]);
        let a = propagate(&g, &mesh, &io, &BTreeMap::new()).unwrap();
        assert_eq!(a.collectives.len(), 1, "{:?}", a.collectives);
        let c = &a.collectives[0];
        assert_eq!((c.kind, c.phase), (CollectiveKind::AllReduce, Phase::Forward));
        assert_eq!(c.mesh_axes, ["model"]);
        assert_eq!(c.payload_bytes, b * s * n * 4);
    }

    #[test]
    fn megatron_block_has_two_all_reduces_each_way() {
        let cfg = TransformerConfig::new(32, 2, 4).with_vocab(64).with_seq(8).with_batch(4);
        let g = build_decoder_only(&cfg).unwrap();
        let mesh = LogicalMesh::data_model(2, 4).unwrap();
        let io = megatron_specs(&g, "data", "model");
        let a = propagate(&g, &mesh, &io, &BTreeMap::new()).unwrap();
        for block in ["block_0", "block_1"] {
            let site = Site::Node(block.into());
            let here: Vec<_> = a.at(&site).collect();
            let count = |p| here.iter().filter(|c| c.kind == CollectiveKind::AllReduce && c.phase == p).count();
            assert_eq!(count(Phase::Forward), 2, "{here:?}");
            assert_eq!(count(Phase::Backward), 2, "{here:?}");
            assert_eq!(here.len(), 4);
        }
        assert!(a.collectives.iter().all(|c| matches!(c.site, Site::Node(_))));
    }

    #[test]
    fn conflicting_hard_specs_are_rejected() {
        let g = elementwise_chain();
        let mesh = LogicalMesh::data_model(2, 2).unwrap();
        let key = TensorKey::Input("a".into());
        let io = BTreeMap::from([(key.clone(), spec("P(axis0=data, axis1=~, axis2=~)"))]);
        let cons = BTreeMap::from([(key, spec("P(axis0=model, axis1=~, axis2=~)"))]);
        let err = propagate(&g, &mesh, &io, &cons).unwrap_err();
        let text = err.to_string();
        assert!(text.contains("input:a") && text.contains("data") && text.contains("model"), "{text}");
    }

    #[test]
    fn interior_io_spec_is_rejected() {
        let g = elementwise_chain();
        let mesh = LogicalMesh::data_model(2, 2).unwrap();
        let io = BTreeMap::from([(TensorKey::Edge(0), PartitionSpec::replicated(3))]);
        assert!(propagate(&g, &mesh, &io, &BTreeMap::new()).is_err());
    }

    #[test]
    fn constraint_mismatch_costs_a_reshard() {
        let g = elementwise_chain();
        let mesh = LogicalMesh::data_model(2, 2).unwrap();
        let io = BTreeMap::from([(TensorKey::Input("a".into()), spec("P(axis0=data, axis1=~, axis2=~)"))]);
        let cons = BTreeMap::from([(TensorKey::Edge(1), PartitionSpec::replicated(3))]);
        let a = propagate(&g, &mesh, &io, &cons).unwrap();
        let kinds: Vec<_> = a.at(&Site::Edge(1)).map(|c| (c.phase, c.kind)).collect();
        assert_eq!(
            kinds,
            [(Phase::Forward, CollectiveKind::AllGather), (Phase::Backward, CollectiveKind::ReduceScatter)]
        );
    }

    #[test]
    fn keys_round_trip() {
        for key in
            [TensorKey::Input("embed".into()), TensorKey::Edge(3), TensorKey::param("block_0", "attn.qkv.weight")]
        {
            assert_eq!(key.to_string().parse::<TensorKey>().unwrap(), key);
        }
        assert!("edge:x".parse::<TensorKey>().is_err());
    }
}
