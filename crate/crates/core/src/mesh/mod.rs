//! Logical device meshes, partition specs and sharding propagation.
//!
//! A [`LogicalMesh`] is an n-dimensional array of devices with named axes.
//! A [`PartitionSpec`] maps each tensor axis to zero or more mesh axes.
//! [`propagate`] completes a partial assignment over a [`ModelGraph`] and
//! records the collectives the resulting layout requires.

mod propagate;
mod spec;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_ir::{ModelGraph, NodeKind, TensorShape, TransformerConfig};

pub use propagate::{propagate, tensor_shapes, Collective, CollectiveKind, Phase, ShardingAssignment, Site, TensorKey};
pub use spec::PartitionSpec;

/// Named n-dimensional arrangement of devices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogicalMesh {
    axes: Vec<(String, u64)>,
}

impl LogicalMesh {
    pub fn new<S: Into<String>>(axes: impl IntoIterator<Item = (S, u64)>) -> Result<Self> {
        let axes: Vec<(String, u64)> = axes.into_iter().map(|(n, s)| (n.into(), s)).collect();
        for (i, (name, size)) in axes.iter().enumerate() {
            if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return Err(Error::validation("mesh", format!("bad axis name `{name}`")));
            }
            if *size == 0 {
                return Err(Error::validation("mesh", format!("axis `{name}` has size 0")));
            }
            if axes[..i].iter().any(|(n, _)| n == name) {
                return Err(Error::validation("mesh", format!("duplicate axis `{name}`")));
            }
        }
        Ok(LogicalMesh { axes })
    }

    /// Two-axis `data` × `model` mesh.
    pub fn data_model(data: u64, model: u64) -> Result<Self> {
        Self::new([("data", data), ("model", model)])
    }

    pub fn axes(&self) -> &[(String, u64)] {
        &self.axes
    }

    pub fn axis_size(&self, name: &str) -> Option<u64> {
        self.axes.iter().find(|(n, _)| n == name).map(|&(_, s)| s)
    }

    pub fn device_count(&self) -> u64 {
        self.axes.iter().map(|(_, s)| s).product()
    }

    /// Row-major coordinates of a device index.
    pub fn coords(&self, device: u64) -> Option<Vec<u64>> {
        if device >= self.device_count() {
            return None;
        }
        let mut rest = device;
        let mut coords = vec![0; self.axes.len()];
        for (i, (_, size)) in self.axes.iter().enumerate().rev() {
            coords[i] = rest % size;
            rest /= size;
        }
        Some(coords)
    }

    pub fn device(&self, coords: &[u64]) -> Option<u64> {
        if coords.len() != self.axes.len() {
            return None;
        }
        let mut index = 0;
        for (&c, (_, size)) in coords.iter().zip(&self.axes) {
            if c >= *size {
                return None;
            }
            index = index * size + c;
        }
        Some(index)
    }

    /// Product of the sizes of the named axes.
    pub fn factor<S: AsRef<str>>(&self, names: &[S]) -> u64 {
        names.iter().map(|n| self.axis_size(n.as_ref()).unwrap_or(1)).product()
    }
}

/// Shape of one device's shard of a tensor laid out by `spec`.
pub fn shard_shape(shape: &TensorShape, spec: &PartitionSpec, mesh: &LogicalMesh) -> Result<TensorShape> {
    spec.validate(mesh)?;
    if spec.rank() != shape.rank() {
        return Err(Error::validation(
            "partition spec",
            format!("spec {spec} has rank {} but tensor {shape} has rank {}", spec.rank(), shape.rank()),
        ));
    }
    let mut dims = Vec::with_capacity(shape.rank());
    for (axis, (&extent, names)) in shape.dims.iter().zip(spec.axes()).enumerate() {
        let divisor = mesh.factor(names);
        if extent % divisor != 0 {
            return Err(Error::NotDivisible { axis, extent, divisor });
        }
        dims.push(extent / divisor);
    }
    Ok(TensorShape { dims, axis_names: shape.axis_names.clone(), dtype: shape.dtype })
}

/// Multi-head attention can only split whole heads across devices.
pub fn validate_tensor_parallel(cfg: &TransformerConfig, tp: u64) -> Result<()> {
    check_heads(cfg.heads, tp)
}

pub fn check_heads(heads: u64, tp: u64) -> Result<()> {
    if tp == 0 {
        return Err(Error::validation("tensor parallelism", "order must be >= 1"));
    }
    if !heads.is_multiple_of(tp) {
        return Err(Error::HeadsNotDivisible { heads, tp });
    }
    Ok(())
}

/// Column/row-parallel layout for transformer weights: QKV and the first
/// MLP projection split their output columns over `model`, the attention
/// output and second MLP projection split their input rows, embedding
/// tables split the vocabulary, and token inputs split the batch over
/// `data`.
pub fn megatron_specs(g: &ModelGraph, data: &str, model: &str) -> BTreeMap<TensorKey, PartitionSpec> {
    let col = PartitionSpec::new(vec![vec![], vec![model.to_string()]]);
    let row = PartitionSpec::new(vec![vec![model.to_string()], vec![]]);
    let vec_model = PartitionSpec::new(vec![vec![model.to_string()]]);
    let mut specs = BTreeMap::new();
    let sources = g.sources();
    for node in g.nodes() {
        for p in &node.params {
            let spec = if p.name.ends_with("attn.qkv.weight") || p.name.ends_with("mlp.in.weight") {
                Some(col.clone())
            } else if p.name.ends_with("attn.qkv.bias") || p.name.ends_with("mlp.in.bias") {
                Some(vec_model.clone())
            } else if p.name.ends_with("attn.out.weight") || p.name.ends_with("mlp.out.weight") {
                Some(row.clone())
            } else if node.kind == NodeKind::Unembedding && p.shape.rank() == 2 {
                Some(col.clone())
            } else if node.kind == NodeKind::Embedding && p.shape.rank() == 2 {
                Some(row.clone())
            } else {
                None
            };
            if let Some(spec) = spec {
                specs.insert(TensorKey::param(&node.id, &p.name), spec);
            }
        }
        if node.kind == NodeKind::Embedding && sources.contains(&node.id.as_str()) {
            specs.insert(TensorKey::Input(node.id.clone()), PartitionSpec::new(vec![vec![data.to_string()], vec![]]));
        }
    }
    specs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_ir::DType;

    fn f32(d: &[u64]) -> TensorShape {
        TensorShape::new(d.to_vec(), DType::Float32).unwrap()
    }

    #[test]
    fn coords_are_a_bijection() {
        let mesh = LogicalMesh::new([("a", 2), ("b", 3), ("c", 4)]).unwrap();
        assert_eq!(mesh.device_count(), 24);
        for d in 0..24 {
            assert_eq!(mesh.device(&mesh.coords(d).unwrap()), Some(d));
        }
        assert_eq!(mesh.coords(24), None);
        assert_eq!(mesh.coords(5).unwrap(), vec![0, 1, 1]);
    }

    #[test]
    fn mesh_invariants() {
        assert!(LogicalMesh::new([("a", 2), ("a", 2)]).is_err());
        assert!(LogicalMesh::new([("a", 0)]).is_err());
        assert_eq!(LogicalMesh::new(Vec::<(String, u64)>::new()).unwrap().device_count(), 1);
    }

    #[test]
    fn shard_shapes() {
        let mesh = LogicalMesh::data_model(2, 4).unwrap();
        let spec: PartitionSpec = "P(axis0=data, axis1=model)".parse().unwrap();
        assert_eq!(shard_shape(&f32(&[8, 16]), &spec, &mesh).unwrap().dims, vec![4, 4]);

        let mesh = LogicalMesh::new([("a", 2), ("b", 3)]).unwrap();
        let spec = PartitionSpec::new(vec![vec!["a".into(), "b".into()]]);
        assert_eq!(shard_shape(&f32(&[6]), &spec, &mesh).unwrap().dims, vec![1]);

        let spec = PartitionSpec::new(vec![vec!["a".into()]]);
        match shard_shape(&f32(&[7]), &spec, &mesh) {
            Err(Error::NotDivisible { axis: 0, extent: 7, divisor: 2 }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn heads_divisibility() {
        let cfg = TransformerConfig::new(5120, 1, 40);
        assert!(validate_tensor_parallel(&cfg, 8).is_ok());
        assert!(matches!(validate_tensor_parallel(&cfg, 16), Err(Error::HeadsNotDivisible { heads: 40, tp: 16 })));
        assert!(validate_tensor_parallel(&cfg, 1).is_ok());
    }
}
