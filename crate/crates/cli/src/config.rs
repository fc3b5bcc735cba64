use std::collections::BTreeMap;
use std::path::PathBuf;

use meshplan::model_ir::{DType, TransformerConfig, DEFAULT_SEQ_LEN, DEFAULT_VOCAB};
use serde::{Deserialize, Serialize};

/// Problems with the configuration document itself.
#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("config: {0}")]
    Invalid(String),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Invalid(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    Pipeline,
    Tensor,
    Combined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: u64,
    pub layers: u64,
    pub heads: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ffn_hidden: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq_len: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dtype: Option<DType>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub include_biases: Option<bool>,
}

impl ModelConfig {
    pub fn transformer(&self) -> TransformerConfig {
        let base = TransformerConfig::new(self.hidden, self.layers, self.heads);
        TransformerConfig {
            ffn_hidden: self.ffn_hidden.unwrap_or(base.ffn_hidden),
            vocab: self.vocab.unwrap_or(base.vocab),
            seq_len: self.seq_len.unwrap_or(base.seq_len),
            batch: self.batch.unwrap_or(base.batch),
            dtype: self.dtype.unwrap_or(base.dtype),
            include_biases: self.include_biases.unwrap_or(base.include_biases),
            ..base
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshAxis {
    pub name: String,
    pub size: u64,
}

/// Field-by-field replacements applied on top of the named profile.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cores_per_slice: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mfu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub link_bandwidth: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub link_latency: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hbm_bytes_per_core: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_overhead_s: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShardingConfig {
    /// Partition specs of inputs, parameters and outputs, keyed by tensor.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub io: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub constraints: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapacityConfig {
    /// Single width to search on the configured profile. Without it the
    /// three reference rows are run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibrate: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq_len: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_cap: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointConfig {
    pub step_time_s: f64,
    pub checkpoint_cost_s: f64,
    pub mtbf_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    /// Serialized model graph, relative to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mesh: Option<Vec<MeshAxis>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile_overrides: Option<ProfileOverrides>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<StrategyKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub micro_batches: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dp: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tp: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stages: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sharding: Option<ShardingConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacity: Option<CapacityConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<CheckpointConfig>,
}

/// A default filled in for a field the config left out.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AppliedDefault {
    pub field: String,
    pub value: serde_json::Value,
}

pub const DEFAULT_PROFILE: &str = "v4";

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| ConfigError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string().split(" at line ").next().unwrap_or_default().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.model.is_some() && self.model_path.is_some() {
            return invalid("give exactly one of `model` and `model_path`");
        }
        if let Some(m) = &self.model {
            m.transformer().validate().or_else(|e| invalid(e.to_string()))?;
        }
        for (name, v) in
            [("micro_batches", self.micro_batches), ("dp", self.dp), ("tp", self.tp), ("stages", self.stages)]
        {
            if v == Some(0) {
                return invalid(format!("`{name}` must be >= 1"));
            }
        }
        match self.strategy {
            Some(StrategyKind::Pipeline) => {
                if self.dp.is_some() || self.tp.is_some() {
                    return invalid("strategy `pipeline` takes `stages` and `micro_batches`, not `dp` or `tp`");
                }
            }
            Some(StrategyKind::Tensor) => {
                if self.stages.is_some() || self.micro_batches.is_some() {
                    return invalid("strategy `tensor` takes `dp` and `tp`, not `stages` or `micro_batches`");
                }
            }
            Some(StrategyKind::Combined) => {
                if self.dp.is_none() || self.tp.is_none() || self.stages.is_none() {
                    return invalid("strategy `combined` needs `dp`, `tp` and `stages`");
                }
            }
            None => {
                if self.dp.is_some() || self.tp.is_some() || self.stages.is_some() || self.micro_batches.is_some() {
                    return invalid("strategy parameters given without a `strategy`");
                }
            }
        }
        if let Some(mesh) = &self.mesh {
            if mesh.is_empty() || mesh.iter().any(|a| a.size == 0) {
                return invalid("mesh needs at least one axis, each of size >= 1");
            }
        }
        Ok(())
    }

    /// Defaults this config relies on, in a fixed order.
    pub fn applied_defaults(&self) -> Vec<AppliedDefault> {
        let mut out = Vec::new();
        let mut push = |field: &str, value: serde_json::Value| out.push(AppliedDefault { field: field.into(), value });
        if self.profile.is_none() {
            push("profile", DEFAULT_PROFILE.into());
        }
        if let Some(m) = &self.model {
            let t = m.transformer();
            if m.ffn_hidden.is_none() {
                push("model.ffn_hidden", t.ffn_hidden.into());
            }
            if m.vocab.is_none() {
                push("model.vocab", DEFAULT_VOCAB.into());
            }
            if m.seq_len.is_none() {
                push("model.seq_len", DEFAULT_SEQ_LEN.into());
            }
            if m.batch.is_none() {
                push("model.batch", 1.into());
            }
            if m.dtype.is_none() {
                push("model.dtype", "float32".into());
            }
            if m.include_biases.is_none() {
                push("model.include_biases", true.into());
            }
        }
        if self.profile_overrides.as_ref().is_none_or(|o| o.mfu.is_none()) {
            push("profile.mfu", "from profile".into());
        }
        if matches!(self.strategy, Some(StrategyKind::Pipeline | StrategyKind::Combined))
            && self.micro_batches.is_none()
        {
            push("micro_batches", "sweep".into());
        }
        if self.strategy == Some(StrategyKind::Tensor) && self.dp.is_none() {
            push("dp", 1.into());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str =
        r#"{"model": {"hidden": 64, "layers": 2, "heads": 2}, "profile": "v4", "strategy": "tensor"}"#;

    #[test]
    fn minimal_config_records_defaults() {
        let c = ExperimentConfig::parse(MINIMAL).unwrap();
        let fields: Vec<String> = c.applied_defaults().into_iter().map(|d| d.field).collect();
        for f in ["model.vocab", "model.ffn_hidden", "profile.mfu", "dp"] {
            assert!(fields.iter().any(|x| x == f), "{f} missing from {fields:?}");
        }
        assert_eq!(c.model.unwrap().transformer().vocab, 32_000);
    }

    #[test]
    fn unknown_key_is_named_with_location() {
        let text = "{\n  \"modle\": {}\n}";
        let e = ExperimentConfig::parse(text).unwrap_err();
        match &e {
            ConfigError::Parse { line, message, .. } => {
                assert_eq!(*line, 2);
                assert!(message.contains("modle"), "{message}");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn pipeline_without_micro_batches_sweeps() {
        let c = ExperimentConfig::parse(
            r#"{"model": {"hidden": 64, "layers": 2, "heads": 2}, "strategy": "pipeline", "stages": 3}"#,
        )
        .unwrap();
        assert!(c.applied_defaults().iter().any(|d| d.field == "micro_batches" && d.value == "sweep"));
    }

    #[test]
    fn inconsistent_configs_rejected() {
        for bad in [
            r#"{"model": {"hidden": 64, "layers": 2, "heads": 2}, "model_path": "g.json"}"#,
            r#"{"strategy": "tensor", "stages": 2}"#,
            r#"{"strategy": "combined", "dp": 2}"#,
            r#"{"tp": 2}"#,
            r#"{"model": {"hidden": 64, "layers": 2, "heads": 3}}"#,
            r#"{"mesh": []}"#,
        ] {
            assert!(matches!(ExperimentConfig::parse(bad), Err(ConfigError::Invalid(_))), "{bad}");
        }
    }

    #[test]
    fn print_parse_round_trip() {
        let text = r#"{"model": {"hidden": 64, "layers": 2, "heads": 2, "vocab": 100}, "mesh": [{"name": "data", "size": 2}],
            "profile": "v3", "profile_overrides": {"mfu": 0.5}, "strategy": "combined", "dp": 2, "tp": 2, "stages": 2,
            "sharding": {"io": {"input:embed": "P(axis0=data, axis1=~)"}}, "checkpoint": {"step_time_s": 1.0, "checkpoint_cost_s": 60.0, "mtbf_s": 86400.0}}"#;
        let c = ExperimentConfig::parse(text).unwrap();
        assert_eq!(ExperimentConfig::parse(&c.to_json()).unwrap(), c);
    }
}
