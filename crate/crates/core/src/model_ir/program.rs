//! Lowering of a layer node into primitive tensor operations.
//!
//! Every node kind expands into a short straight-line program over local
//! tensors: matmuls against the node's parameters, elementwise ops
//! (norms, activations, residual adds), the attention core and scalar
//! reductions. The program is the single source for FLOP counts, internal
//! activation footprints and sharding rules.

use super::{DType, NodeKind, NodeSpec, TensorShape};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Prim {
    /// `x · W (+ b)`, contracting the last axis of `x` with the first axis
    /// of `W`. A one-hot matmul reads integer ids and contracts over the
    /// implicit one-hot axis of extent `W.dims[0]`.
    Matmul { x: usize, weight: usize, bias: Option<usize>, out: usize, one_hot: bool },
    /// Shape-preserving op over one or more same-shape inputs; 1-D params
    /// broadcast along the last axis.
    Elementwise { inputs: Vec<usize>, params: Vec<usize>, out: usize },
    /// Multi-head attention from a fused `(.., s, 3h)` projection to
    /// `(.., s, h)`, head-major along the last axis.
    AttentionCore { qkv: usize, out: usize, heads: u64 },
    /// Full reduction to a scalar.
    Reduce { input: usize, out: usize },
}

#[derive(Debug, Clone)]
pub struct NodeProgram {
    pub locals: Vec<TensorShape>,
    /// One local per incoming edge, in the order the edges were supplied.
    pub inputs: Vec<usize>,
    /// External input read by a source node.
    pub implicit_input: Option<usize>,
    pub prims: Vec<Prim>,
    pub output: usize,
    /// Fraction of tokens the node processes (top-k routing).
    pub flop_scale: f64,
}

impl NodeProgram {
    /// Forward-pass FLOPs.
    pub fn forward_flops(&self, node: &NodeSpec) -> f64 {
        let total: f64 = self
            .prims
            .iter()
            .map(|p| match p {
                Prim::Matmul { x, weight, out, one_hot, .. } => {
                    let x = self.locals[*x].elements() as f64;
                    let n = *self.locals[*out].dims.last().unwrap() as f64;
                    if *one_hot {
                        2.0 * x * node.params[*weight].shape.dims[0] as f64 * n
                    } else {
                        2.0 * x * n
                    }
                }
                Prim::AttentionCore { out, .. } => {
                    let (b, s, h) = split_bsh(&self.locals[*out]);
                    4.0 * b * s * s * h
                }
                _ => 0.0,
            })
            .sum();
        total * self.flop_scale
    }

    /// Bytes of intermediate tensors, excluding inputs and the output
    /// (those travel on edges).
    pub fn internal_activation_bytes(&self) -> u64 {
        let mut boundary = vec![false; self.locals.len()];
        for &i in self.inputs.iter().chain(self.implicit_input.iter()) {
            boundary[i] = true;
        }
        boundary[self.output] = true;
        let locals: u64 = self.locals.iter().zip(&boundary).filter(|(_, &b)| !b).map(|(s, _)| s.bytes()).sum();
        let scores: u64 = self
            .prims
            .iter()
            .filter_map(|p| match p {
                Prim::AttentionCore { qkv, heads, .. } => {
                    let shape = &self.locals[*qkv];
                    let (b, s, _) = split_bsh(shape);
                    // scores and softmax probabilities
                    Some(2 * (b as u64) * heads * (s as u64) * (s as u64) * shape.dtype.width())
                }
                _ => None,
            })
            .sum();
        locals + scores
    }

    pub fn output_shape(&self) -> &TensorShape {
        &self.locals[self.output]
    }
}

fn split_bsh(shape: &TensorShape) -> (f64, f64, f64) {
    let r = shape.rank();
    let h = shape.dims[r - 1] as f64;
    let s = if r >= 2 { shape.dims[r - 2] as f64 } else { 1.0 };
    let b: u64 = shape.dims[..r.saturating_sub(2)].iter().product();
    (b as f64, s, h)
}

fn mismatch(node: &NodeSpec, reason: String) -> Error {
    Error::Validation { what: "node program", reason: format!("node `{}`: {reason}", node.id) }
}

struct Lowering<'a> {
    node: &'a NodeSpec,
    locals: Vec<TensorShape>,
    prims: Vec<Prim>,
}

impl<'a> Lowering<'a> {
    fn local(&mut self, shape: TensorShape) -> usize {
        self.locals.push(shape);
        self.locals.len() - 1
    }

    fn param(&self, name: &str) -> Option<usize> {
        self.node.find_param(name)
    }

    fn required(&self, name: &str) -> Result<usize> {
        self.param(name).ok_or_else(|| mismatch(self.node, format!("missing param `{name}`")))
    }

    fn heads(&self) -> Result<u64> {
        self.node
            .attr_u64("heads")
            .filter(|&h| h > 0)
            .ok_or_else(|| mismatch(self.node, "missing `heads` attribute".into()))
    }

    fn matmul(&mut self, x: usize, weight: usize, bias: Option<usize>, one_hot: bool) -> Result<usize> {
        let w = &self.node.params[weight].shape;
        if w.rank() != 2 {
            return Err(mismatch(self.node, format!("weight `{}` is not 2-D", self.node.params[weight].name)));
        }
        let xs = &self.locals[x];
        let mut dims = xs.dims.clone();
        if one_hot {
            dims.push(w.dims[1]);
        } else {
            if xs.dims.last() != Some(&w.dims[0]) {
                return Err(mismatch(
                    self.node,
                    format!("matmul of {xs} with `{}` {w}", self.node.params[weight].name),
                ));
            }
            *dims.last_mut().unwrap() = w.dims[1];
        }
        if let Some(b) = bias {
            let bs = &self.node.params[b].shape;
            if bs.dims != [w.dims[1]] {
                return Err(mismatch(self.node, format!("bias {bs} does not match weight {w}")));
            }
        }
        let dtype = if one_hot { w.dtype } else { xs.dtype };
        let out = self.local(TensorShape { dims, axis_names: None, dtype });
        self.prims.push(Prim::Matmul { x, weight, bias, out, one_hot });
        Ok(out)
    }

    fn linear(&mut self, x: usize, name: &str) -> Result<usize> {
        let w = self.required(&format!("{name}.weight"))?;
        let b = self.param(&format!("{name}.bias"));
        self.matmul(x, w, b, false)
    }

    fn elementwise(&mut self, inputs: Vec<usize>, params: Vec<usize>) -> Result<usize> {
        let first = self.locals[inputs[0]].clone();
        for &i in &inputs[1..] {
            if self.locals[i].dims != first.dims {
                return Err(mismatch(self.node, format!("cannot combine {} with {}", first, self.locals[i])));
            }
        }
        for &p in &params {
            let ps = &self.node.params[p].shape;
            if ps.dims != [*first.dims.last().unwrap()] {
                return Err(mismatch(self.node, format!("param {ps} does not broadcast over {first}")));
            }
        }
        let out = self.local(first.with_dims(first.dims.clone()));
        self.prims.push(Prim::Elementwise { inputs, params, out });
        Ok(out)
    }

    fn norm(&mut self, x: usize, prefix: &str) -> Result<usize> {
        let params = ["gain", "bias"].iter().filter_map(|s| self.param(&format!("{prefix}.{s}"))).collect();
        self.elementwise(vec![x], params)
    }

    fn attention(&mut self, x: usize, prefix: &str) -> Result<usize> {
        let heads = self.heads()?;
        let ln1 = self.norm(x, &format!("{prefix}ln1"))?;
        let qkv = self.linear(ln1, &format!("{prefix}attn.qkv"))?;
        let qs = self.locals[qkv].clone();
        let width = *qs.dims.last().unwrap();
        if !width.is_multiple_of(3) || !(width / 3).is_multiple_of(heads) {
            return Err(mismatch(self.node, format!("qkv width {width} incompatible with {heads} heads")));
        }
        let mut dims = qs.dims.clone();
        *dims.last_mut().unwrap() = width / 3;
        let core = self.local(qs.with_dims(dims));
        self.prims.push(Prim::AttentionCore { qkv, out: core, heads });
        let proj = self.linear(core, &format!("{prefix}attn.out"))?;
        self.elementwise(vec![x, proj], vec![])
    }

    fn block(&mut self, x: usize, prefix: &str) -> Result<usize> {
        let res = self.attention(x, prefix)?;
        let ln2 = self.norm(res, &format!("{prefix}ln2"))?;
        let hidden = self.linear(ln2, &format!("{prefix}mlp.in"))?;
        let act = self.elementwise(vec![hidden], vec![])?;
        let out = self.linear(act, &format!("{prefix}mlp.out"))?;
        self.elementwise(vec![res, out], vec![])
    }

    // Matmuls over 2-D params in order, trailing `*bias` vectors fused,
    // activations between consecutive matmuls, other vectors elementwise.
    fn param_walk(&mut self, x: usize) -> Result<usize> {
        let params = &self.node.params;
        let mut cur = x;
        let mut after_matmul = false;
        let mut emitted = false;
        let mut i = 0;
        while i < params.len() {
            match params[i].shape.rank() {
                2 => {
                    if after_matmul {
                        cur = self.elementwise(vec![cur], vec![])?;
                    }
                    let n = params[i].shape.dims[1];
                    let bias = params.get(i + 1).filter(|b| b.name.ends_with("bias") && b.shape.dims == [n]);
                    let bias = bias.map(|_| i + 1);
                    cur = self.matmul(cur, i, bias, false)?;
                    after_matmul = true;
                    i += if bias.is_some() { 2 } else { 1 };
                }
                1 => {
                    cur = self.elementwise(vec![cur], vec![i])?;
                    after_matmul = false;
                    i += 1;
                }
                r => return Err(mismatch(self.node, format!("unsupported rank-{r} param `{}`", params[i].name))),
            }
            emitted = true;
        }
        if !emitted {
            cur = self.elementwise(vec![cur], vec![])?;
        }
        Ok(cur)
    }

    fn input_width(&self) -> Option<u64> {
        match self.node.kind {
            NodeKind::Unembedding
            | NodeKind::Projector
            | NodeKind::Predictor
            | NodeKind::Mlp
            | NodeKind::Expert
            | NodeKind::Generic => self.node.params.first().filter(|p| p.shape.rank() == 2).map(|p| p.shape.dims[0]),
            _ => None,
        }
    }
}

/// Lower `node` given the shapes of its incoming edges (in order) and, if
/// it has any, the shape on its outgoing edges.
pub fn lower(node: &NodeSpec, in_shapes: &[&TensorShape], out_shape: Option<&TensorShape>) -> Result<NodeProgram> {
    let mut lw = Lowering { node, locals: Vec::new(), prims: Vec::new() };
    let inputs: Vec<usize> = in_shapes.iter().map(|s| lw.local((*s).clone())).collect();
    let mut implicit_input = None;

    let x = if inputs.is_empty() {
        if node.kind == NodeKind::Loss {
            return Err(mismatch(node, "loss node has no inputs".into()));
        }
        let shape = implicit_input_shape(&lw, out_shape)?;
        let i = lw.local(shape);
        implicit_input = Some(i);
        i
    } else if inputs.len() > 1 {
        lw.elementwise(inputs.clone(), vec![])?
    } else {
        inputs[0]
    };

    let mut flop_scale = 1.0;
    let output = match node.kind {
        NodeKind::Embedding => {
            let table = node
                .params
                .iter()
                .position(|p| p.shape.rank() == 2)
                .ok_or_else(|| mismatch(node, "embedding without a 2-D table".into()))?;
            if implicit_input.is_some() {
                lw.matmul(x, table, None, true)?
            } else {
                lw.matmul(x, table, None, false)?
            }
        }
        NodeKind::TransformerBlock => lw.block(x, "")?,
        NodeKind::Attention => lw.attention(x, "")?,
        NodeKind::Encoder | NodeKind::EmaTarget => {
            let layers = node.attr_u64("layers").unwrap_or(0);
            let mut cur = x;
            for i in 0..layers {
                cur = lw.block(cur, &format!("block{i}."))?;
            }
            cur
        }
        NodeKind::Layernorm => {
            let params = (0..node.params.len()).collect();
            lw.elementwise(vec![x], params)?
        }
        NodeKind::MoeRouter => {
            let ln = lw.norm(x, "ln2")?;
            if let Some(gate) = node.params.iter().position(|p| p.shape.rank() == 2) {
                lw.matmul(ln, gate, None, false)?;
            }
            lw.elementwise(vec![ln], vec![])?
        }
        NodeKind::Expert => {
            let experts = node.attrs.get("experts").copied().unwrap_or(1.0).max(1.0);
            let top_k = node.attrs.get("top_k").copied().unwrap_or(1.0);
            flop_scale = (top_k / experts).min(1.0);
            lw.param_walk(x)?
        }
        NodeKind::Mlp | NodeKind::Projector | NodeKind::Predictor | NodeKind::Unembedding | NodeKind::Generic => {
            lw.param_walk(x)?
        }
        NodeKind::Loss => {
            let out = lw.local(TensorShape { dims: vec![1], axis_names: None, dtype: DType::Float32 });
            lw.prims.push(Prim::Reduce { input: x, out });
            out
        }
    };

    if let Some(expected) = out_shape {
        if lw.locals[output].dims != expected.dims {
            return Err(mismatch(
                node,
                format!("computes {} but its outgoing edge carries {expected}", lw.locals[output]),
            ));
        }
    }
    Ok(NodeProgram { locals: lw.locals, inputs, implicit_input, prims: lw.prims, output, flop_scale })
}

fn implicit_input_shape(lw: &Lowering<'_>, out_shape: Option<&TensorShape>) -> Result<TensorShape> {
    let node = lw.node;
    let mut shape = match out_shape {
        Some(s) => s.with_dims(s.dims.clone()),
        None => {
            let get = |k: &str| node.attr_u64(k).filter(|&v| v > 0);
            match (get("batch"), get("seq"), get("hidden")) {
                (Some(b), Some(s), Some(h)) => {
                    let dtype = node.params.first().map(|p| p.shape.dtype).unwrap_or(DType::Float32);
                    let dtype = if dtype == DType::Int32 { DType::Float32 } else { dtype };
                    TensorShape { dims: vec![b, s, h], axis_names: None, dtype }
                }
                _ => return Err(mismatch(node, "isolated node needs `batch`, `seq` and `hidden` attributes".into())),
            }
        }
    };
    if node.kind == NodeKind::Embedding {
        shape.dims.pop();
        if shape.dims.is_empty() {
            shape.dims.push(1);
        }
        shape.dtype = DType::Int32;
    } else if out_shape.is_some() {
        if let Some(w) = lw.input_width() {
            *shape.dims.last_mut().unwrap() = w;
        }
    }
    Ok(shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f32(d: &[u64]) -> TensorShape {
        TensorShape::new(d.to_vec(), DType::Float32).unwrap()
    }

    #[test]
    fn single_projection_flops() {
        let (s, h) = (32u64, 16u64);
        let node = NodeSpec::new("p", NodeKind::Generic)
            .param("w", f32(&[h, h]))
            .attr("batch", 1.0)
            .attr("seq", s as f64)
            .attr("hidden", h as f64);
        let prog = lower(&node, &[], None).unwrap();
        assert_eq!(prog.forward_flops(&node), (2 * s * h * h) as f64);
        assert_eq!(prog.internal_activation_bytes(), 0);
    }

    #[test]
    fn block_program_shapes() {
        let node = NodeSpec::new("b", NodeKind::TransformerBlock).attr("heads", 2.0);
        let cfg = crate::model_ir::TransformerConfig::new(8, 1, 2).with_ffn(32);
        let node = cfg.block_params(node, "");
        let x = f32(&[2, 4, 8]);
        let prog = lower(&node, &[&x], Some(&x)).unwrap();
        let matmuls = prog.prims.iter().filter(|p| matches!(p, Prim::Matmul { .. })).count();
        assert_eq!(matmuls, 4);
        assert_eq!(prog.output_shape().dims, vec![2, 4, 8]);
        // 9h + 2 ffn per token plus two (heads, s, s) score tensors
        let expected = 2 * 4 * (9 * 8 + 2 * 32) * 4 + 2 * 2 * 2 * 4 * 4 * 4;
        assert_eq!(prog.internal_activation_bytes(), expected);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let node = NodeSpec::new("g", NodeKind::Generic).param("w", f32(&[4, 6]));
        let err = lower(&node, &[&f32(&[1, 5])], None).unwrap_err();
        assert!(err.to_string().contains("matmul"), "{err}");
        let err = lower(&node, &[&f32(&[1, 4])], Some(&f32(&[1, 7]))).unwrap_err();
        assert!(err.to_string().contains("outgoing edge"), "{err}");
    }

    #[test]
    fn embedding_reads_token_ids() {
        let node = NodeSpec::new("e", NodeKind::Embedding).param("table", f32(&[10, 4]));
        let prog = lower(&node, &[], Some(&f32(&[2, 3, 4]))).unwrap();
        let input = &prog.locals[prog.implicit_input.unwrap()];
        assert_eq!((input.dims.clone(), input.dtype), (vec![2, 3], DType::Int32));
        assert_eq!(prog.forward_flops(&node), (2 * 6 * 10 * 4) as f64);
    }

    #[test]
    fn paramless_generic_is_elementwise() {
        let node = NodeSpec::new("g", NodeKind::Generic);
        let x = f32(&[2, 3]);
        let prog = lower(&node, &[&x], Some(&x)).unwrap();
        assert!(matches!(prog.prims.as_slice(), [Prim::Elementwise { .. }]));
        assert_eq!(prog.forward_flops(&node), 0.0);
    }
}
