use serde::{Deserialize, Serialize};

use super::{DType, ModelGraph, NodeKind, NodeSpec, TensorShape};
use crate::error::{Error, Result};

pub const DEFAULT_VOCAB: u64 = 32_000;
pub const DEFAULT_SEQ_LEN: u64 = 2048;

/// Hyperparameters of a decoder-style transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub hidden: u64,
    pub layers: u64,
    pub heads: u64,
    pub ffn_hidden: u64,
    pub vocab: u64,
    pub seq_len: u64,
    pub batch: u64,
    pub dtype: DType,
    pub include_biases: bool,
}

impl TransformerConfig {
    /// Config with conventional defaults: ffn = 4h, vocab 32000, seq 2048,
    /// batch 1, float32, biases on.
    pub fn new(hidden: u64, layers: u64, heads: u64) -> Self {
        TransformerConfig {
            hidden,
            layers,
            heads,
            ffn_hidden: 4 * hidden,
            vocab: DEFAULT_VOCAB,
            seq_len: DEFAULT_SEQ_LEN,
            batch: 1,
            dtype: DType::Float32,
            include_biases: true,
        }
    }

    pub fn with_ffn(mut self, ffn_hidden: u64) -> Self {
        self.ffn_hidden = ffn_hidden;
        self
    }

    pub fn with_vocab(mut self, vocab: u64) -> Self {
        self.vocab = vocab;
        self
    }

    pub fn with_seq(mut self, seq_len: u64) -> Self {
        self.seq_len = seq_len;
        self
    }

    pub fn with_batch(mut self, batch: u64) -> Self {
        self.batch = batch;
        self
    }

    pub fn with_dtype(mut self, dtype: DType) -> Self {
        self.dtype = dtype;
        self
    }

    pub fn with_biases(mut self, include_biases: bool) -> Self {
        self.include_biases = include_biases;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("ffn_hidden", self.ffn_hidden),
            ("vocab", self.vocab),
            ("seq_len", self.seq_len),
            ("batch", self.batch),
        ] {
            if v == 0 {
                return Err(Error::validation("transformer config", format!("{name} must be >= 1")));
            }
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::validation(
                "transformer config",
                format!("hidden {} not divisible by heads {}", self.hidden, self.heads),
            ));
        }
        Ok(())
    }

    fn activation(&self, width: u64, last: &str) -> TensorShape {
        TensorShape::named(vec![self.batch, self.seq_len, width], &["batch", "seq", last], self.dtype)
            .expect("validated config yields valid shapes")
    }

    fn tensor(&self, dims: &[u64]) -> TensorShape {
        TensorShape::new(dims.to_vec(), self.dtype).expect("validated config yields valid shapes")
    }

    pub(crate) fn linear(&self, node: NodeSpec, name: &str, fan_in: u64, fan_out: u64) -> NodeSpec {
        let node = node.param(format!("{name}.weight"), self.tensor(&[fan_in, fan_out]));
        if self.include_biases {
            node.param(format!("{name}.bias"), self.tensor(&[fan_out]))
        } else {
            node
        }
    }

    pub(crate) fn norm(&self, node: NodeSpec, name: &str) -> NodeSpec {
        node.param(format!("{name}.gain"), self.tensor(&[self.hidden]))
            .param(format!("{name}.bias"), self.tensor(&[self.hidden]))
    }

    pub(crate) fn attention_params(&self, node: NodeSpec, prefix: &str) -> NodeSpec {
        let h = self.hidden;
        let node = self.norm(node, &format!("{prefix}ln1"));
        let node = self.linear(node, &format!("{prefix}attn.qkv"), h, 3 * h);
        self.linear(node, &format!("{prefix}attn.out"), h, h)
    }

    pub(crate) fn mlp_params(&self, node: NodeSpec, prefix: &str) -> NodeSpec {
        let node = self.linear(node, &format!("{prefix}mlp.in"), self.hidden, self.ffn_hidden);
        self.linear(node, &format!("{prefix}mlp.out"), self.ffn_hidden, self.hidden)
    }

    pub(crate) fn block_params(&self, node: NodeSpec, prefix: &str) -> NodeSpec {
        let node = self.attention_params(node, prefix);
        let node = self.norm(node, &format!("{prefix}ln2"));
        self.mlp_params(node, prefix)
    }

    /// Parameters of one decoder block with the fixed inventory.
    pub fn block_param_count(&self) -> u64 {
        let (h, f) = (self.hidden, self.ffn_hidden);
        let weights = h * 3 * h + h * h + h * f + f * h;
        let biases = if self.include_biases { 3 * h + h + f + h } else { 0 };
        weights + biases + 4 * h
    }
}

/// Embedding, a chain of `layers` transformer blocks, unembedding and loss.
pub fn build_decoder_only(cfg: &TransformerConfig) -> Result<ModelGraph> {
    cfg.validate()?;
    let mut g = ModelGraph::new();
    let hidden_edge = cfg.activation(cfg.hidden, "embed");

    g.add_node(NodeSpec::new("embed", NodeKind::Embedding).param("table", cfg.tensor(&[cfg.vocab, cfg.hidden])))?;
    let mut prev = "embed".to_string();
    for i in 0..cfg.layers {
        let id = format!("block_{i}");
        let node = NodeSpec::new(&id, NodeKind::TransformerBlock).attr("heads", cfg.heads as f64);
        g.add_node(cfg.block_params(node, ""))?;
        g.add_edge(&prev, &id, hidden_edge.clone())?;
        prev = id;
    }
    finish_decoder(&mut g, cfg, &[prev])?;
    Ok(g)
}

fn finish_decoder(g: &mut ModelGraph, cfg: &TransformerConfig, last: &[String]) -> Result<()> {
    let hidden_edge = cfg.activation(cfg.hidden, "embed");
    g.add_node(NodeSpec::new("unembed", NodeKind::Unembedding).param("weight", cfg.tensor(&[cfg.hidden, cfg.vocab])))?;
    for src in last {
        g.add_edge(src, "unembed", hidden_edge.clone())?;
    }
    g.add_node(NodeSpec::new("loss", NodeKind::Loss))?;
    g.add_edge("unembed", "loss", cfg.activation(cfg.vocab, "vocab"))?;
    Ok(())
}

/// Decoder where every `moe_every`-th block routes its MLP through
/// `experts` expert nodes (top-1 routing). A single expert is a dense MLP,
/// so `experts == 1` yields the decoder-only graph.
pub fn build_moe(cfg: &TransformerConfig, experts: u64, moe_every: u64) -> Result<ModelGraph> {
    cfg.validate()?;
    if experts == 0 {
        return Err(Error::validation("moe config", "experts must be >= 1"));
    }
    if moe_every == 0 {
        return Err(Error::validation("moe config", "moe_every must be >= 1"));
    }
    if experts == 1 {
        return build_decoder_only(cfg);
    }
    let mut g = ModelGraph::new();
    let edge = cfg.activation(cfg.hidden, "embed");
    g.add_node(NodeSpec::new("embed", NodeKind::Embedding).param("table", cfg.tensor(&[cfg.vocab, cfg.hidden])))?;
    let mut frontier = vec!["embed".to_string()];
    for i in 0..cfg.layers {
        if (i + 1) % moe_every != 0 {
            let id = format!("block_{i}");
            let node = NodeSpec::new(&id, NodeKind::TransformerBlock).attr("heads", cfg.heads as f64);
            g.add_node(cfg.block_params(node, ""))?;
            for src in &frontier {
                g.add_edge(src, &id, edge.clone())?;
            }
            frontier = vec![id];
            continue;
        }
        let attn = format!("block_{i}.attn");
        let router = format!("block_{i}.router");
        let node = NodeSpec::new(&attn, NodeKind::Attention).attr("heads", cfg.heads as f64);
        g.add_node(cfg.attention_params(node, ""))?;
        for src in &frontier {
            g.add_edge(src, &attn, edge.clone())?;
        }
        let node = cfg
            .norm(NodeSpec::new(&router, NodeKind::MoeRouter), "ln2")
            .param("gate.weight", cfg.tensor(&[cfg.hidden, experts]))
            .attr("experts", experts as f64)
            .attr("top_k", 1.0);
        g.add_node(node)?;
        g.add_edge(&attn, &router, edge.clone())?;
        // Residual path around the expert layer joins at the next node.
        frontier = vec![attn.clone()];
        for e in 0..experts {
            let id = format!("block_{i}.expert_{e}");
            let node = NodeSpec::new(&id, NodeKind::Expert).attr("experts", experts as f64).attr("top_k", 1.0);
            g.add_node(cfg.mlp_params(node, ""))?;
            g.add_edge(&router, &id, edge.clone())?;
            frontier.push(id);
        }
    }
    finish_decoder(&mut g, cfg, &frontier)?;
    Ok(g)
}

/// Two-branch self-supervised graph: an online encoder, projector and
/// predictor against an EMA target encoder and projector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ByolConfig {
    pub encoder: TransformerConfig,
    pub projector_dim: u64,
    pub predictor_dim: u64,
}

pub fn build_byol(cfg: &ByolConfig) -> Result<ModelGraph> {
    let enc = &cfg.encoder;
    enc.validate()?;
    if cfg.projector_dim == 0 || cfg.predictor_dim == 0 {
        return Err(Error::validation("byol config", "projector_dim and predictor_dim must be >= 1"));
    }
    let (h, proj, pred) = (enc.hidden, cfg.projector_dim, cfg.predictor_dim);
    let encoder = |id: &str, kind: NodeKind| {
        let mut node = NodeSpec::new(id, kind).attr("heads", enc.heads as f64).attr("layers", enc.layers as f64);
        for i in 0..enc.layers {
            node = enc.block_params(node, &format!("block{i}."));
        }
        // Edge-free encoders still need their input extents.
        node.attr("batch", enc.batch as f64).attr("seq", enc.seq_len as f64).attr("hidden", h as f64)
    };
    let projector = |id: &str| enc.linear(NodeSpec::new(id, NodeKind::Projector), "proj", h, proj);

    let mut g = ModelGraph::new();
    g.add_node(encoder("online.encoder", NodeKind::Encoder))?;
    g.add_node(projector("online.projector"))?;
    let predictor = enc.linear(NodeSpec::new("online.predictor", NodeKind::Predictor), "pred.in", proj, pred);
    g.add_node(enc.linear(predictor, "pred.out", pred, proj))?;
    g.add_node(encoder("target.encoder", NodeKind::EmaTarget))?;
    g.add_node(projector("target.projector"))?;
    g.add_node(NodeSpec::new("loss", NodeKind::Loss))?;

    let hidden = enc.activation(h, "embed");
    let projected = enc.activation(proj, "proj");
    g.add_edge("online.encoder", "online.projector", hidden.clone())?;
    g.add_edge("online.projector", "online.predictor", projected.clone())?;
    g.add_edge("online.predictor", "loss", projected.clone())?;
    g.add_edge("target.encoder", "target.projector", hidden)?;
    g.add_edge("target.projector", "loss", projected)?;
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TransformerConfig {
        TransformerConfig::new(8, 2, 2).with_vocab(16).with_seq(4).with_ffn(32)
    }

    #[test]
    fn decoder_node_count_is_layers_plus_three() {
        for layers in [0, 1, 2, 7] {
            let g = build_decoder_only(&TransformerConfig { layers, ..small() }).unwrap();
            assert_eq!(g.len() as u64, layers + 3);
            g.validate().unwrap();
        }
    }

    #[test]
    fn forty_layer_decoder_has_43_nodes() {
        let cfg = TransformerConfig::new(5120, 40, 40).with_ffn(20480);
        let g = build_decoder_only(&cfg).unwrap();
        let blocks = g.nodes().iter().filter(|n| n.kind == NodeKind::TransformerBlock).count();
        assert_eq!((g.len(), blocks), (43, 40));
    }

    #[test]
    fn empty_chain() {
        let g = build_decoder_only(&TransformerConfig { layers: 0, ..small() }).unwrap();
        assert_eq!(g.topological_order().unwrap(), vec!["embed", "unembed", "loss"]);
    }

    #[test]
    fn indivisible_heads_rejected() {
        let err = build_decoder_only(&TransformerConfig::new(6, 1, 4)).unwrap_err();
        assert!(err.to_string().contains("not divisible"), "{err}");
    }

    #[test]
    fn block_inventory() {
        let g = build_decoder_only(&small()).unwrap();
        let block = g.node("block_0").unwrap();
        let dims = |name: &str| block.params[block.find_param(name).unwrap()].shape.dims.clone();
        assert_eq!(dims("attn.qkv.weight"), vec![8, 24]);
        assert_eq!(dims("attn.out.weight"), vec![8, 8]);
        assert_eq!(dims("mlp.in.weight"), vec![8, 32]);
        assert_eq!(dims("mlp.out.weight"), vec![32, 8]);
        assert_eq!(dims("ln1.gain"), vec![8]);
        assert_eq!(block.param_count(), small().block_param_count());
        assert_eq!(g.node("embed").unwrap().params[0].shape.dims, vec![16, 8]);
        assert_eq!(g.node("unembed").unwrap().params[0].shape.dims, vec![8, 16]);
        let no_bias = small().with_biases(false);
        // 3h² + h² + 2hf weights plus two norm gain/bias pairs
        assert_eq!(no_bias.block_param_count(), 768 + 32);
    }

    #[test]
    fn one_router_with_four_experts() {
        let cfg = TransformerConfig { layers: 2, ..small() };
        let g = build_moe(&cfg, 4, 2).unwrap();
        g.validate().unwrap();
        let routers: Vec<_> = g.nodes().iter().filter(|n| n.kind == NodeKind::MoeRouter).collect();
        assert_eq!(routers.len(), 1);
        let out = g.edges().iter().filter(|e| e.src == routers[0].id).count();
        assert_eq!(out, 4);
    }

    #[test]
    fn moe_stride_beyond_depth_is_dense() {
        let cfg = small();
        let dense = build_decoder_only(&cfg).unwrap();
        let g = build_moe(&cfg, 4, 3).unwrap();
        assert!(g.structurally_eq(&dense));
        assert!(build_moe(&cfg, 1, 1).unwrap().structurally_eq(&dense));
        assert!(build_moe(&cfg, 0, 1).is_err());
        assert!(build_moe(&cfg, 2, 0).is_err());
    }

    #[test]
    fn byol_branches() {
        let cfg = ByolConfig { encoder: small(), projector_dim: 6, predictor_dim: 6 };
        let g = build_byol(&cfg).unwrap();
        g.validate().unwrap();
        let mut sources = g.sources();
        sources.sort();
        assert_eq!(sources, ["online.encoder", "target.encoder"]);
        assert_eq!(g.sinks(), ["loss"]);
        let empty = ByolConfig { encoder: TransformerConfig { layers: 0, ..small() }, ..cfg.clone() };
        assert_eq!(build_byol(&empty).unwrap().len(), 6);
        assert!(build_byol(&ByolConfig { projector_dim: 0, ..cfg }).is_err());
    }
}
