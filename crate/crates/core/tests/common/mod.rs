#![allow(dead_code)]

use meshplan::model_ir::{build_decoder_only, DType, ModelGraph, NodeKind, NodeSpec, TensorShape, TransformerConfig};
use proptest::prelude::*;
use serde_json::Value;

/// Small decoder configs: heads in 1..=4, head width 4..=16, 0..=3 layers.
pub fn small_decoder() -> impl Strategy<Value = TransformerConfig> {
    (1u64..=4, 1u64..=4, 0u64..=3, 1u64..=4, 2u64..=12, 1u64..=3, 8u64..=64, any::<bool>()).prop_map(
        |(heads, head_w, layers, ffn_mult, seq, batch, vocab, biases)| {
            let h = heads * head_w * 2;
            TransformerConfig::new(h, layers, heads)
                .with_ffn(h * ffn_mult)
                .with_seq(seq)
                .with_batch(batch)
                .with_vocab(vocab)
                .with_biases(biases)
        },
    )
}

pub fn graph(cfg: &TransformerConfig) -> ModelGraph {
    build_decoder_only(cfg).expect("valid config")
}

/// Chain of `n` identical single-matmul nodes.
pub fn matmul_chain(n: usize, batch: u64, width: u64) -> ModelGraph {
    let act = TensorShape::new(vec![batch, width], DType::Float32).unwrap();
    let w = TensorShape::new(vec![width, width], DType::Float32).unwrap();
    let mut g = ModelGraph::new();
    for i in 0..n {
        g.add_node(NodeSpec::new(format!("n{i:03}"), NodeKind::Generic).param("w", w.clone())).unwrap();
        if i > 0 {
            g.add_edge(&format!("n{:03}", i - 1), &format!("n{i:03}"), act.clone()).unwrap();
        }
    }
    g
}

fn width(dtype: &Value) -> u64 {
    match dtype.as_str().unwrap() {
        "float32" | "int32" => 4,
        "bfloat16" => 2,
        other => panic!("dtype {other}"),
    }
}

fn elements(dims: &Value) -> u64 {
    dims.as_array().unwrap().iter().map(|d| d.as_u64().unwrap()).product()
}

/// Parameter count read straight off the serialized graph.
pub fn brute_param_count(doc: &Value) -> u64 {
    doc["nodes"]
        .as_array()
        .unwrap()
        .iter()
        .flat_map(|n| n["params"].as_array().unwrap())
        .map(|p| elements(&p["dims"]))
        .sum()
}

/// Activation bytes of a serialized decoder. Every edge is kept; a
/// transformer block additionally holds, per token, nine hidden-width
/// tensors (norms, q/k/v, attention output, projection, residuals) and two
/// ffn-width tensors, plus scores and probabilities of shape (heads, s, s).
pub fn brute_activation_bytes(doc: &Value, per_block: bool) -> u64 {
    let edges = doc["edges"].as_array().unwrap();
    let edge_bytes: u64 = edges.iter().map(|e| elements(&e["dims"]) * width(&e["dtype"])).sum();
    let mut internals = Vec::new();
    for n in doc["nodes"].as_array().unwrap() {
        if n["kind"] != "transformer_block" {
            internals.push(0);
            continue;
        }
        let input = edges.iter().find(|e| e["dst"] == n["id"]).expect("block input");
        let dims: Vec<u64> = input["dims"].as_array().unwrap().iter().map(|d| d.as_u64().unwrap()).collect();
        let (b, s, h) = (dims[0], dims[1], dims[2]);
        let w = width(&input["dtype"]);
        let ffn = n["params"]
            .as_array()
            .unwrap()
            .iter()
            .find(|p| p["name"] == "mlp.in.weight")
            .map(|p| p["dims"][1].as_u64().unwrap())
            .unwrap();
        let heads = n["attrs"]["heads"].as_f64().unwrap() as u64;
        internals.push(b * s * (9 * h + 2 * ffn) * w + 2 * b * heads * s * s * w);
    }
    edge_bytes + if per_block { internals.into_iter().max().unwrap_or(0) } else { internals.into_iter().sum() }
}

/// Grid argmin of `f` over `(0, hi]` with `n` points.
pub fn grid_argmin(f: impl Fn(f64) -> f64, hi: f64, n: usize) -> (f64, f64) {
    let step = hi / n as f64;
    let best = (1..=n).map(|i| i as f64 * step).min_by(|a, b| f(*a).total_cmp(&f(*b))).unwrap();
    (best, step)
}

/// A decoder plus a data × model mesh it divides evenly: the batch is a
/// multiple of `data`, and heads, vocab and ffn width multiples of `model`.
pub fn sharded_case() -> impl Strategy<Value = (TransformerConfig, u64, u64)> {
    (small_decoder(), 1u64..=4, 0usize..4).prop_map(|(cfg, data, pick)| {
        let divisors: Vec<u64> = (1..=cfg.heads).filter(|d| cfg.heads % d == 0).collect();
        let model = divisors[pick % divisors.len()];
        let cfg = TransformerConfig {
            batch: cfg.batch * data,
            vocab: cfg.vocab * model,
            ffn_hidden: cfg.ffn_hidden * model,
            ..cfg
        };
        (cfg, data, model)
    })
}

/// Unsharding, the model=1 no-collective rule and idempotence for one case.
pub fn check_sharding(cfg: &TransformerConfig, data: u64, model: u64) -> Result<(), TestCaseError> {
    use meshplan::mesh::{megatron_specs, propagate, shard_shape, tensor_shapes, LogicalMesh};
    use std::collections::BTreeMap;

    let g = graph(cfg);
    let mesh = LogicalMesh::data_model(data, model).unwrap();
    let io = megatron_specs(&g, "data", "model");
    let asg = propagate(&g, &mesh, &io, &BTreeMap::new()).map_err(|e| TestCaseError::fail(e.to_string()))?;
    for (key, shape) in tensor_shapes(&g).unwrap() {
        let spec = asg.spec(&key).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let local = shard_shape(&shape, spec, &mesh).map_err(|e| TestCaseError::fail(format!("{key}: {e}")))?;
        for (i, (&l, &full)) in local.dims.iter().zip(&shape.dims).enumerate() {
            prop_assert_eq!(l * mesh.factor(spec.axis(i)), full, "{} axis {}", key, i);
        }
    }
    let again = propagate(&g, &mesh, &io, &asg.interior_specs(&io)).unwrap();
    prop_assert_eq!(&again, &asg);

    let flat = LogicalMesh::data_model(data, 1).unwrap();
    let replicated = propagate(&g, &flat, &io, &BTreeMap::new()).unwrap();
    prop_assert!(replicated.collectives.is_empty(), "{:?}", replicated.collectives);
    Ok(())
}

/// The tensor-parallel heads check fires exactly when `heads % tp != 0`.
pub fn check_heads_rule(heads: u64, tp: u64) -> Result<(), TestCaseError> {
    use meshplan::mesh::validate_tensor_parallel;
    let cfg = TransformerConfig::new(heads * 4, 1, heads);
    match validate_tensor_parallel(&cfg, tp) {
        Ok(()) => prop_assert_eq!(heads % tp, 0),
        Err(meshplan::Error::HeadsNotDivisible { .. }) => prop_assert_ne!(heads % tp, 0),
        Err(e) => return Err(TestCaseError::fail(e.to_string())),
    }
    Ok(())
}
