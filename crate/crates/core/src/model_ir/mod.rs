//! Model intermediate representation: a DAG of parameterized layer nodes.
//!
//! Nodes carry their parameter tensors and a small numeric attribute map;
//! edges carry the activation shape flowing from producer to consumer.
//! Source nodes read an implicit external input (tokens or features) and
//! sink nodes produce the graph outputs.

mod builders;
mod json;
pub mod program;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use builders::{
    build_byol, build_decoder_only, build_moe, ByolConfig, TransformerConfig, DEFAULT_SEQ_LEN, DEFAULT_VOCAB,
};

/// Element type of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    Float32,
    Bfloat16,
    Int32,
}

impl DType {
    pub fn width(self) -> u64 {
        match self {
            DType::Float32 | DType::Int32 => 4,
            DType::Bfloat16 => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::Float32 => "float32",
            DType::Bfloat16 => "bfloat16",
            DType::Int32 => "int32",
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Shape, optional axis labels and element type of a tensor.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TensorShape {
    pub dims: Vec<u64>,
    pub axis_names: Option<Vec<String>>,
    pub dtype: DType,
}

impl TensorShape {
    pub fn new(dims: Vec<u64>, dtype: DType) -> Result<Self> {
        let shape = TensorShape { dims, axis_names: None, dtype };
        shape.validate()?;
        Ok(shape)
    }

    pub fn named(dims: Vec<u64>, names: &[&str], dtype: DType) -> Result<Self> {
        let shape = TensorShape { dims, axis_names: Some(names.iter().map(|s| s.to_string()).collect()), dtype };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(axis) = self.dims.iter().position(|&d| d == 0) {
            return Err(Error::validation("tensor shape", format!("axis {axis} has extent 0")));
        }
        if let Some(names) = &self.axis_names {
            if names.len() != self.dims.len() {
                return Err(Error::validation(
                    "tensor shape",
                    format!("{} axis names for {} axes", names.len(), self.dims.len()),
                ));
            }
            let unique: BTreeSet<&String> = names.iter().collect();
            if unique.len() != names.len() {
                return Err(Error::validation("tensor shape", "duplicate axis name"));
            }
        }
        Ok(())
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn elements(&self) -> u64 {
        self.dims.iter().product()
    }

    pub fn bytes(&self) -> u64 {
        self.elements() * self.dtype.width()
    }

    /// Same extents and dtype, ignoring axis labels.
    pub fn same_layout(&self, other: &TensorShape) -> bool {
        self.dims == other.dims && self.dtype == other.dtype
    }

    pub(crate) fn with_dims(&self, dims: Vec<u64>) -> TensorShape {
        TensorShape { dims, axis_names: None, dtype: self.dtype }
    }
}

impl fmt::Display for TensorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dims: Vec<String> = self.dims.iter().map(|d| d.to_string()).collect();
        write!(f, "{}[{}]", self.dtype, dims.join(","))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Embedding,
    TransformerBlock,
    Attention,
    Mlp,
    Layernorm,
    Unembedding,
    MoeRouter,
    Expert,
    Encoder,
    Projector,
    Predictor,
    EmaTarget,
    Loss,
    Generic,
}

impl NodeKind {
    pub fn is_embedding(self) -> bool {
        matches!(self, NodeKind::Embedding | NodeKind::Unembedding)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: TensorShape,
}

/// A parameterized function node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeSpec {
    pub id: String,
    pub kind: NodeKind,
    pub params: Vec<ParamTensor>,
    pub attrs: BTreeMap<String, f64>,
}

impl NodeSpec {
    pub fn new(id: impl Into<String>, kind: NodeKind) -> Self {
        NodeSpec { id: id.into(), kind, params: Vec::new(), attrs: BTreeMap::new() }
    }

    pub fn param(mut self, name: impl Into<String>, shape: TensorShape) -> Self {
        self.params.push(ParamTensor { name: name.into(), shape });
        self
    }

    pub fn attr(mut self, key: impl Into<String>, value: f64) -> Self {
        self.attrs.insert(key.into(), value);
        self
    }

    pub fn param_count(&self) -> u64 {
        self.params.iter().map(|p| p.shape.elements()).sum()
    }

    pub fn param_bytes(&self) -> u64 {
        self.params.iter().map(|p| p.shape.bytes()).sum()
    }

    pub fn find_param(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Integer-valued attribute, if present.
    pub fn attr_u64(&self, key: &str) -> Option<u64> {
        self.attrs.get(key).and_then(|&v| (v >= 0.0 && v.fract() == 0.0).then_some(v as u64))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub src: String,
    pub dst: String,
    pub shape: TensorShape,
}

/// Directed acyclic graph of layer nodes.
#[derive(Debug, Clone, Default)]
pub struct ModelGraph {
    nodes: Vec<NodeSpec>,
    index: HashMap<String, usize>,
    edges: Vec<Edge>,
}

impl ModelGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_node(&mut self, node: NodeSpec) -> Result<()> {
        if self.index.contains_key(&node.id) {
            return Err(Error::validation("graph", format!("duplicate node id `{}`", node.id)));
        }
        for p in &node.params {
            p.shape.validate()?;
        }
        let names: BTreeSet<&str> = node.params.iter().map(|p| p.name.as_str()).collect();
        if names.len() != node.params.len() {
            return Err(Error::validation("graph", format!("duplicate param name in `{}`", node.id)));
        }
        self.index.insert(node.id.clone(), self.nodes.len());
        self.nodes.push(node);
        Ok(())
    }

    pub fn add_edge(&mut self, src: &str, dst: &str, shape: TensorShape) -> Result<()> {
        for id in [src, dst] {
            if !self.index.contains_key(id) {
                return Err(Error::UnknownNode(id.to_string()));
            }
        }
        shape.validate()?;
        self.edges.push(Edge { src: src.to_string(), dst: dst.to_string(), shape });
        Ok(())
    }

    pub fn nodes(&self) -> &[NodeSpec] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn node(&self, id: &str) -> Option<&NodeSpec> {
        self.index.get(id).map(|&i| &self.nodes[i])
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Incoming edge indices per node, in edge insertion order.
    pub fn in_edges(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for (e, edge) in self.edges.iter().enumerate() {
            adj[self.index[&edge.dst]].push(e);
        }
        adj
    }

    pub fn out_edges(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for (e, edge) in self.edges.iter().enumerate() {
            adj[self.index[&edge.src]].push(e);
        }
        adj
    }

    /// Nodes without incoming edges; they consume the external input.
    pub fn sources(&self) -> Vec<&str> {
        let inn = self.in_edges();
        self.nodes.iter().zip(&inn).filter(|(_, e)| e.is_empty()).map(|(n, _)| n.id.as_str()).collect()
    }

    pub fn sinks(&self) -> Vec<&str> {
        let out = self.out_edges();
        self.nodes.iter().zip(&out).filter(|(_, e)| e.is_empty()).map(|(n, _)| n.id.as_str()).collect()
    }

    /// Topological order with ties broken by node id.
    pub fn topological_order(&self) -> Result<Vec<String>> {
        Ok(self.topo_indices()?.into_iter().map(|i| self.nodes[i].id.clone()).collect())
    }

    pub(crate) fn topo_indices(&self) -> Result<Vec<usize>> {
        let n = self.nodes.len();
        let mut indegree = vec![0usize; n];
        let mut succ = vec![Vec::new(); n];
        for edge in &self.edges {
            let (s, d) = (self.index[&edge.src], self.index[&edge.dst]);
            indegree[d] += 1;
            succ[s].push(d);
        }
        let mut ready: BTreeSet<(&str, usize)> =
            (0..n).filter(|&i| indegree[i] == 0).map(|i| (self.nodes[i].id.as_str(), i)).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(first) = ready.pop_first() {
            let i = first.1;
            order.push(i);
            for &d in &succ[i] {
                indegree[d] -= 1;
                if indegree[d] == 0 {
                    ready.insert((self.nodes[d].id.as_str(), d));
                }
            }
        }
        if order.len() < n {
            return Err(Error::Cycle(self.find_cycle(&indegree, &succ)));
        }
        Ok(order)
    }

    // Walk predecessors among the nodes left with positive indegree until one repeats.
    fn find_cycle(&self, indegree: &[usize], succ: &[Vec<usize>]) -> Vec<String> {
        let n = self.nodes.len();
        let mut pred: Vec<Option<usize>> = vec![None; n];
        for s in 0..n {
            if indegree[s] == 0 {
                continue;
            }
            for &d in &succ[s] {
                if indegree[d] > 0 && pred[d].is_none() {
                    pred[d] = Some(s);
                }
            }
        }
        let Some(start) = (0..n).find(|&i| indegree[i] > 0 && pred[i].is_some()) else {
            return Vec::new();
        };
        let mut seen = vec![usize::MAX; n];
        let mut path = Vec::new();
        let mut cur = start;
        while seen[cur] == usize::MAX {
            seen[cur] = path.len();
            path.push(cur);
            cur = pred[cur].expect("every remaining node has a remaining predecessor");
        }
        let mut cycle: Vec<String> = path[seen[cur]..].iter().rev().map(|&i| self.nodes[i].id.clone()).collect();
        let min = (0..cycle.len()).min_by_key(|&i| cycle[i].clone()).unwrap_or(0);
        cycle.rotate_left(min);
        cycle
    }

    /// Check acyclicity and reachability from sources to sinks.
    pub fn validate(&self) -> Result<()> {
        let order = self.topo_indices()?;
        let n = self.nodes.len();
        let inn = self.in_edges();
        let out = self.out_edges();
        let mut from_input = vec![false; n];
        for &i in &order {
            from_input[i] = inn[i].is_empty() || inn[i].iter().any(|&e| from_input[self.index[&self.edges[e].src]]);
        }
        let mut to_output = vec![false; n];
        for &i in order.iter().rev() {
            to_output[i] = out[i].is_empty() || out[i].iter().any(|&e| to_output[self.index[&self.edges[e].dst]]);
        }
        if let Some(i) = (0..n).find(|&i| !from_input[i] || !to_output[i]) {
            return Err(Error::validation(
                "graph",
                format!("node `{}` is not on an input-to-output path", self.nodes[i].id),
            ));
        }
        Ok(())
    }

    /// Equality of node and edge sets, ignoring insertion order and axis labels.
    pub fn structurally_eq(&self, other: &ModelGraph) -> bool {
        type NodeKey = (String, NodeKind, Vec<(String, Vec<u64>, DType)>, Vec<(String, u64)>);
        fn node_key(n: &NodeSpec) -> NodeKey {
            (
                n.id.clone(),
                n.kind,
                n.params.iter().map(|p| (p.name.clone(), p.shape.dims.clone(), p.shape.dtype)).collect(),
                n.attrs.iter().map(|(k, v)| (k.clone(), v.to_bits())).collect(),
            )
        }
        fn edge_key(e: &Edge) -> (String, String, Vec<u64>, DType) {
            (e.src.clone(), e.dst.clone(), e.shape.dims.clone(), e.shape.dtype)
        }
        let mut a: Vec<_> = self.nodes.iter().map(node_key).collect();
        let mut b: Vec<_> = other.nodes.iter().map(node_key).collect();
        a.sort();
        b.sort();
        let mut ea: Vec<_> = self.edges.iter().map(edge_key).collect();
        let mut eb: Vec<_> = other.edges.iter().map(edge_key).collect();
        ea.sort();
        eb.sort();
        a == b && ea == eb
    }

    /// Global batch size: leading extent of the activation edges, or the
    /// `batch` attribute for graphs without edges.
    pub fn batch_size(&self) -> u64 {
        if let Some(e) = self.edges.first() {
            return e.shape.dims[0];
        }
        self.nodes.iter().find_map(|n| n.attr_u64("batch")).unwrap_or(1)
    }

    /// Largest `heads` attribute over attention-bearing nodes.
    pub fn attention_heads(&self) -> Option<u64> {
        self.nodes.iter().filter_map(|n| n.attr_u64("heads")).max()
    }

    /// Lower every node to its primitive program.
    pub fn lower(&self) -> Result<LoweredGraph> {
        let order = self.topo_indices()?;
        let mut position = vec![0; self.nodes.len()];
        for (pos, &i) in order.iter().enumerate() {
            position[i] = pos;
        }
        let mut in_edges = self.in_edges();
        for list in &mut in_edges {
            list.sort_by_key(|&e| (position[self.index[&self.edges[e].src]], e));
        }
        let out_edges = self.out_edges();
        let mut programs = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let shapes: Vec<&TensorShape> = in_edges[i].iter().map(|&e| &self.edges[e].shape).collect();
            let out = out_edges[i].first().map(|&e| &self.edges[e].shape);
            if let Some(first) = out {
                if let Some(&e) = out_edges[i].iter().find(|&&e| !self.edges[e].shape.same_layout(first)) {
                    return Err(Error::validation(
                        "graph",
                        format!("outgoing edges of `{}` disagree: {first} vs {}", node.id, self.edges[e].shape),
                    ));
                }
            }
            programs.push(program::lower(node, &shapes, out)?);
        }
        Ok(LoweredGraph { order, in_edges, out_edges, programs })
    }
}

/// A graph with every node lowered, plus adjacency in a stable order.
#[derive(Debug, Clone)]
pub struct LoweredGraph {
    /// Node indices in topological order.
    pub order: Vec<usize>,
    /// Incoming edges per node, sorted by producer position in `order`.
    pub in_edges: Vec<Vec<usize>>,
    pub out_edges: Vec<Vec<usize>>,
    pub programs: Vec<program::NodeProgram>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(d: &[u64]) -> TensorShape {
        TensorShape::new(d.to_vec(), DType::Float32).unwrap()
    }

    fn chain(ids: &[&str]) -> ModelGraph {
        let mut g = ModelGraph::new();
        for id in ids {
            g.add_node(NodeSpec::new(*id, NodeKind::Generic)).unwrap();
        }
        for w in ids.windows(2) {
            g.add_edge(w[0], w[1], shape(&[1, 2])).unwrap();
        }
        g
    }

    #[test]
    fn single_node_order() {
        let g = chain(&["only"]);
        assert_eq!(g.topological_order().unwrap(), vec!["only"]);
    }

    #[test]
    fn chain_order() {
        let g = chain(&["a", "b", "c"]);
        assert_eq!(g.topological_order().unwrap(), vec!["a", "b", "c"]);
    }

    #[test]
    fn ties_broken_by_id() {
        let mut g = ModelGraph::new();
        for id in ["z", "m", "a", "sink"] {
            g.add_node(NodeSpec::new(id, NodeKind::Generic)).unwrap();
        }
        for id in ["z", "m", "a"] {
            g.add_edge(id, "sink", shape(&[1])).unwrap();
        }
        assert_eq!(g.topological_order().unwrap(), vec!["a", "m", "z", "sink"]);
    }

    #[test]
    fn two_cycle_is_reported() {
        let mut g = chain(&["a", "b"]);
        g.add_edge("b", "a", shape(&[1, 2])).unwrap();
        match g.topological_order() {
            Err(Error::Cycle(ids)) => assert_eq!(ids, vec!["a", "b"]),
            other => panic!("expected cycle, got {other:?}"),
        }
    }

    #[test]
    fn cycle_behind_a_prefix_names_only_cycle_nodes() {
        let mut g = chain(&["in", "x", "y", "z"]);
        g.add_edge("z", "x", shape(&[1, 2])).unwrap();
        match g.validate() {
            Err(Error::Cycle(ids)) => assert_eq!(ids, vec!["x", "y", "z"]),
            other => panic!("expected cycle, got {other:?}"),
        }
    }

    #[test]
    fn rejects_zero_extent_and_bad_names() {
        assert!(TensorShape::new(vec![2, 0], DType::Float32).is_err());
        assert!(TensorShape::named(vec![2, 3], &["a"], DType::Float32).is_err());
        assert!(TensorShape::named(vec![2, 3], &["a", "a"], DType::Float32).is_err());
        assert!(TensorShape::named(vec![2, 3], &["a", "b"], DType::Bfloat16).is_ok());
    }

    #[test]
    fn duplicate_ids_and_dangling_edges_rejected() {
        let mut g = chain(&["a"]);
        assert!(g.add_node(NodeSpec::new("a", NodeKind::Loss)).is_err());
        assert!(matches!(g.add_edge("a", "nope", shape(&[1])), Err(Error::UnknownNode(_))));
    }

    #[test]
    fn dtype_widths() {
        assert_eq!(DType::Float32.width(), 4);
        assert_eq!(DType::Bfloat16.width(), 2);
        assert_eq!(shape(&[2, 2048, 8]).bytes(), 131072);
    }
}
