use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{DType, ModelGraph, NodeKind, NodeSpec, ParamTensor, TensorShape};
use crate::error::Result;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphDoc {
    nodes: Vec<NodeDoc>,
    edges: Vec<EdgeDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeDoc {
    id: String,
    kind: NodeKind,
    params: Vec<ParamDoc>,
    attrs: BTreeMap<String, f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamDoc {
    name: String,
    dims: Vec<u64>,
    dtype: DType,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EdgeDoc {
    src: String,
    dst: String,
    dims: Vec<u64>,
    dtype: DType,
}

impl ModelGraph {
    pub fn to_json_value(&self) -> serde_json::Value {
        let doc = GraphDoc {
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeDoc {
                    id: n.id.clone(),
                    kind: n.kind,
                    params: n
                        .params
                        .iter()
                        .map(|p| ParamDoc { name: p.name.clone(), dims: p.shape.dims.clone(), dtype: p.shape.dtype })
                        .collect(),
                    attrs: n.attrs.clone(),
                })
                .collect(),
            edges: self
                .edges
                .iter()
                .map(|e| EdgeDoc {
                    src: e.src.clone(),
                    dst: e.dst.clone(),
                    dims: e.shape.dims.clone(),
                    dtype: e.shape.dtype,
                })
                .collect(),
        };
        serde_json::to_value(doc).expect("graph document is always representable")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_json_value()).expect("serializable")
    }

    /// Parse a graph document and validate it.
    pub fn from_json(text: &str) -> Result<ModelGraph> {
        let doc: GraphDoc = serde_json::from_str(text)?;
        let mut g = ModelGraph::new();
        for n in doc.nodes {
            let mut spec = NodeSpec::new(n.id, n.kind);
            spec.attrs = n.attrs;
            for p in n.params {
                spec.params.push(ParamTensor { name: p.name, shape: TensorShape::new(p.dims, p.dtype)? });
            }
            g.add_node(spec)?;
        }
        for e in doc.edges {
            g.add_edge(&e.src, &e.dst, TensorShape::new(e.dims, e.dtype)?)?;
        }
        g.validate()?;
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_ir::{build_decoder_only, TransformerConfig};

    #[test]
    fn field_names_match_schema() {
        let cfg = TransformerConfig::new(8, 1, 2).with_vocab(16).with_seq(4);
        let g = build_decoder_only(&cfg).unwrap();
        let v = g.to_json_value();
        let node = &v["nodes"][0];
        let mut keys: Vec<&str> = node.as_object().unwrap().keys().map(|k| k.as_str()).collect();
        keys.sort();
        assert_eq!(keys, ["attrs", "id", "kind", "params"]);
        let mut pkeys: Vec<&str> = node["params"][0].as_object().unwrap().keys().map(|k| k.as_str()).collect();
        pkeys.sort();
        assert_eq!(pkeys, ["dims", "dtype", "name"]);
        let mut ekeys: Vec<&str> = v["edges"][0].as_object().unwrap().keys().map(|k| k.as_str()).collect();
        ekeys.sort();
        assert_eq!(ekeys, ["dims", "dst", "dtype", "src"]);
        assert_eq!(node["kind"], "embedding");
        assert_eq!(v["edges"][0]["dtype"], "float32");
    }

    #[test]
    fn unknown_fields_rejected() {
        let text = r#"{"nodes":[{"id":"a","kind":"generic","params":[],"attrs":{},"extra":1}],"edges":[]}"#;
        assert!(ModelGraph::from_json(text).is_err());
    }

    #[test]
    fn cyclic_document_rejected() {
        let text = r#"{"nodes":[{"id":"a","kind":"generic","params":[],"attrs":{}},
                               {"id":"b","kind":"generic","params":[],"attrs":{}}],
                      "edges":[{"src":"a","dst":"b","dims":[1],"dtype":"float32"},
                               {"src":"b","dst":"a","dims":[1],"dtype":"float32"}]}"#;
        assert!(ModelGraph::from_json(text).is_err());
    }
}
