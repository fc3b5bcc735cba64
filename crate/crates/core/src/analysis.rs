//! Static analysis of a model graph: parameter counts, memory footprints
//! and FLOP estimates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_ir::program::Prim;
use crate::model_ir::{DType, ModelGraph};

/// Byte-level memory accounting for one training step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MemoryBreakdown {
    pub param_bytes: u64,
    pub grad_bytes: u64,
    pub optimizer_bytes: u64,
    pub activation_bytes: u64,
    pub total_bytes: u64,
}

impl MemoryBreakdown {
    pub fn new(param_bytes: u64, grad_bytes: u64, optimizer_bytes: u64, activation_bytes: u64) -> Self {
        MemoryBreakdown {
            param_bytes,
            grad_bytes,
            optimizer_bytes,
            activation_bytes,
            total_bytes: param_bytes + grad_bytes + optimizer_bytes + activation_bytes,
        }
    }

    pub fn with_activation(self, activation_bytes: u64) -> Self {
        Self::new(self.param_bytes, self.grad_bytes, self.optimizer_bytes, activation_bytes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    None,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub state_slots: u64,
    pub state_dtype: DType,
}

impl OptimizerSpec {
    pub fn none() -> Self {
        OptimizerSpec { kind: OptimizerKind::None, state_slots: 0, state_dtype: DType::Float32 }
    }

    /// Adam keeps first and second moments, stored in float32 by default.
    pub fn adam() -> Self {
        OptimizerSpec { kind: OptimizerKind::Adam, state_slots: 2, state_dtype: DType::Float32 }
    }

    pub fn with_state_dtype(mut self, dtype: DType) -> Self {
        self.state_dtype = dtype;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if (self.state_slots == 0) != (self.kind == OptimizerKind::None) {
            return Err(Error::validation("optimizer", "state_slots must be 0 exactly when kind is none"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Remat {
    None,
    PerBlock,
}

/// Total number of parameters over all nodes.
pub fn param_count(g: &ModelGraph) -> u64 {
    g.nodes().iter().map(|n| n.param_count()).sum()
}

/// Parameters held by embedding and unembedding tables.
pub fn embedding_param_count(g: &ModelGraph) -> u64 {
    g.nodes().iter().filter(|n| n.kind.is_embedding()).map(|n| n.param_count()).sum()
}

/// Parameter bytes at each tensor's own dtype.
pub fn param_bytes(g: &ModelGraph) -> u64 {
    g.nodes().iter().map(|n| n.param_bytes()).sum()
}

pub fn memory_bytes(params: u64, dtype: DType, opt: OptimizerSpec, grads: bool) -> MemoryBreakdown {
    let param_bytes = params * dtype.width();
    let grad_bytes = if grads { param_bytes } else { 0 };
    let optimizer_bytes = params * opt.state_slots * opt.state_dtype.width();
    MemoryBreakdown::new(param_bytes, grad_bytes, optimizer_bytes, 0)
}

/// Bytes of activations kept for the backward pass.
///
/// Without rematerialization every edge and every node's intermediates are
/// live. With per-block rematerialization only the edges survive, plus the
/// largest single node's intermediates while it is recomputed.
pub fn activation_bytes(g: &ModelGraph, remat: Remat) -> Result<u64> {
    let lowered = g.lower()?;
    let edges: u64 = g.edges().iter().map(|e| e.shape.bytes()).sum();
    let internal = lowered.programs.iter().map(|p| p.internal_activation_bytes());
    Ok(match remat {
        Remat::None => edges + internal.sum::<u64>(),
        Remat::PerBlock => edges + internal.max().unwrap_or(0),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FlopCount {
    pub forward: f64,
    pub backward: f64,
    pub step: f64,
    /// Portion of `step` spent in attention scores and the weighted sum.
    pub attention: f64,
}

/// Per-node forward FLOPs, indexed like `g.nodes()`.
pub fn node_forward_flops(g: &ModelGraph) -> Result<Vec<f64>> {
    let lowered = g.lower()?;
    Ok(g.nodes().iter().zip(&lowered.programs).map(|(n, p)| p.forward_flops(n)).collect())
}

/// Forward FLOPs are twice the matmul extents; backward costs twice the
/// forward pass.
pub fn flops_per_step(g: &ModelGraph) -> Result<FlopCount> {
    let lowered = g.lower()?;
    let mut forward = 0.0;
    let mut attention = 0.0;
    for (node, prog) in g.nodes().iter().zip(&lowered.programs) {
        forward += prog.forward_flops(node);
        for prim in &prog.prims {
            if let Prim::AttentionCore { out, .. } = prim {
                let dims = &prog.locals[*out].dims;
                let r = dims.len();
                let b: u64 = dims[..r - 2].iter().product();
                let (s, h) = (dims[r - 2], dims[r - 1]);
                attention += 4.0 * (b * s * s * h) as f64 * prog.flop_scale;
            }
        }
    }
    Ok(FlopCount { forward, backward: 2.0 * forward, step: 3.0 * forward, attention: 3.0 * attention })
}

/// The common `6 · N · tokens` training estimate.
pub fn closed_form_step_flops(params: u64, tokens: u64) -> f64 {
    6.0 * params as f64 * tokens as f64
}
