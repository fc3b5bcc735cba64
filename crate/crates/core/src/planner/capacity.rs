use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::analysis::{activation_bytes, embedding_param_count, memory_bytes, param_count, OptimizerSpec, Remat};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::hw_cost::HardwareProfile;
use crate::mesh::{check_heads, megatron_specs, propagate, LogicalMesh};
use crate::model_ir::{build_decoder_only, DType, TransformerConfig, DEFAULT_VOCAB};
use crate::simulator::tensor_parallel_cost;

/// Knobs of the capacity search. Defaults: sequence 2048, batch 1, vocab
/// 32000, Adam with float32 state, per-block rematerialization, layers in
/// steps of 10 up to 1000, tensor parallelism over every core.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityOptions {
    pub seq_len: u64,
    pub batch: u64,
    pub vocab: u64,
    pub optimizer: OptimizerSpec,
    pub remat: Remat,
    pub layer_step: u64,
    pub layer_cap: u64,
    /// Head count; derived from the hidden width when absent.
    pub heads: Option<u64>,
    /// Tensor-parallel order; every core of the slice when absent.
    pub tp: Option<u64>,
}

impl Default for CapacityOptions {
    fn default() -> Self {
        CapacityOptions {
            seq_len: 2048,
            batch: 1,
            vocab: DEFAULT_VOCAB,
            optimizer: OptimizerSpec::adam(),
            remat: Remat::PerBlock,
            layer_step: 10,
            layer_cap: 1000,
            heads: None,
            tp: None,
        }
    }
}

/// Head count for width `h` under tensor parallelism `tp`: the smallest
/// count of at least `h / 128` that divides `h` and is divisible by `tp`.
pub fn default_heads(h: u64, tp: u64) -> Result<u64> {
    let start = (h / 128).max(1);
    (start..=h).find(|&n| h.is_multiple_of(n) && n % tp == 0).ok_or(Error::HeadsNotDivisible { heads: start, tp })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryCheck {
    pub layers: u64,
    pub params: u64,
    pub memory_per_core_bytes: f64,
    pub fits: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityAssumptions {
    pub profile: HardwareProfile,
    pub vocab: u64,
    pub seq_len: u64,
    pub batch: u64,
    pub remat: Remat,
    pub optimizer: OptimizerSpec,
    pub bytes_per_param: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityResult {
    pub slice_name: String,
    pub hidden: u64,
    pub heads: u64,
    pub tp: u64,
    pub max_layers: u64,
    pub max_params: u64,
    pub max_params_without_embeddings: u64,
    pub memory_per_core_bytes: f64,
    pub predicted_step_time: f64,
    /// The next candidate, which does not fit. Absent when the search hit
    /// the layer cap.
    pub witness: Option<MemoryCheck>,
    pub capped: bool,
    pub assumptions: CapacityAssumptions,
}

struct Setup {
    cfg: TransformerConfig,
    tp: u64,
    bytes_per_param: u64,
}

fn setup(h: u64, slice: &HardwareProfile, opts: &CapacityOptions) -> Result<Setup> {
    opts.optimizer.validate()?;
    if opts.layer_step == 0 {
        return Err(Error::validation("capacity options", "layer_step must be >= 1"));
    }
    let tp = opts.tp.unwrap_or(slice.cores_per_slice);
    let heads = match opts.heads {
        Some(n) => n,
        None => default_heads(h, tp)?,
    };
    check_heads(heads, tp)?;
    let cfg = TransformerConfig::new(h, 0, heads).with_vocab(opts.vocab).with_seq(opts.seq_len).with_batch(opts.batch);
    cfg.validate()?;
    let bytes_per_param = memory_bytes(1, DType::Float32, opts.optimizer, true).total_bytes;
    Ok(Setup { cfg, tp, bytes_per_param })
}

/// Per-core bytes at `layers` blocks: parameters, gradients and optimizer
/// state sharded over `tp`, plus activations sharded over `tp`.
fn check(s: &Setup, layers: u64, slice: &HardwareProfile, opts: &CapacityOptions) -> Result<MemoryCheck> {
    let g = build_decoder_only(&TransformerConfig { layers, ..s.cfg.clone() })?;
    let params = param_count(&g);
    let act = activation_bytes(&g, opts.remat)? as f64;
    let memory_per_core_bytes = (params as f64 * s.bytes_per_param as f64 + act) / s.tp as f64;
    Ok(MemoryCheck { layers, params, memory_per_core_bytes, fits: memory_per_core_bytes <= slice.hbm_bytes_per_core })
}

/// Memory check for a single candidate depth.
pub fn memory_check(h: u64, layers: u64, slice: &HardwareProfile, opts: &CapacityOptions) -> Result<MemoryCheck> {
    check(&setup(h, slice, opts)?, layers, slice, opts)
}

/// Deepest model of width `h`, in steps of `layer_step` layers, whose
/// training state fits in the slice's per-core memory.
pub fn max_layers(h: u64, slice: &HardwareProfile, opts: &CapacityOptions, exec: Exec) -> Result<CapacityResult> {
    slice.validate()?;
    let s = setup(h, slice, opts)?;
    let candidates: Vec<u64> = (1..).map(|k| k * opts.layer_step).take_while(|&l| l <= opts.layer_cap).collect();
    let checks: Vec<MemoryCheck> =
        exec.map(&candidates, |&l| check(&s, l, slice, opts)).into_iter().collect::<Result<_>>()?;
    let Some(first_fail) = checks.iter().position(|c| !c.fits) else {
        let best = checks.last().cloned();
        return finish(&s, h, slice, opts, best, None);
    };
    if first_fail == 0 {
        return Err(Error::DoesNotFit(format!(
            "{} layers of width {h} need {:.4e} bytes per core on {} ({:.4e} available)",
            opts.layer_step, checks[0].memory_per_core_bytes, slice.name, slice.hbm_bytes_per_core
        )));
    }
    let witness = checks[first_fail].clone();
    finish(&s, h, slice, opts, Some(checks[first_fail - 1].clone()), Some(witness))
}

fn finish(
    s: &Setup,
    h: u64,
    slice: &HardwareProfile,
    opts: &CapacityOptions,
    best: Option<MemoryCheck>,
    witness: Option<MemoryCheck>,
) -> Result<CapacityResult> {
    let best = best.ok_or_else(|| Error::DoesNotFit(format!("layer cap {} is below one step", opts.layer_cap)))?;
    let g = build_decoder_only(&TransformerConfig { layers: best.layers, ..s.cfg.clone() })?;
    // The vocabulary is padded to a multiple of `tp` so it can be sharded.
    let vocab = s.cfg.vocab.div_ceil(s.tp) * s.tp;
    let timed = build_decoder_only(&TransformerConfig { layers: best.layers, vocab, ..s.cfg.clone() })?;
    let mesh = LogicalMesh::data_model(1, s.tp)?;
    let asg = propagate(&timed, &mesh, &megatron_specs(&timed, "data", "model"), &BTreeMap::new())?;
    let step = tensor_parallel_cost(&timed, &mesh, &asg, slice)?.total_s + slice.step_overhead_s;
    Ok(CapacityResult {
        slice_name: slice.name.clone(),
        hidden: h,
        heads: s.cfg.heads,
        tp: s.tp,
        max_layers: best.layers,
        max_params: best.params,
        max_params_without_embeddings: best.params - embedding_param_count(&g),
        memory_per_core_bytes: best.memory_per_core_bytes,
        predicted_step_time: step,
        capped: witness.is_none(),
        witness,
        assumptions: CapacityAssumptions {
            profile: slice.clone(),
            vocab: opts.vocab,
            seq_len: opts.seq_len,
            batch: opts.batch,
            remat: opts.remat,
            optimizer: opts.optimizer,
            bytes_per_param: s.bytes_per_param,
        },
    })
}

/// Per-core memory that makes a width-`h` model of `target_params`
/// parameters exactly fill the slice. Memory and parameters are both
/// affine in depth, so two probe depths determine the answer.
pub fn calibrate_hbm(h: u64, slice: &HardwareProfile, target_params: f64, opts: &CapacityOptions) -> Result<f64> {
    let s = setup(h, slice, opts)?;
    let (lo, hi) = (opts.layer_step, 2 * opts.layer_step);
    let a = check(&s, lo, slice, opts)?;
    let b = check(&s, hi, slice, opts)?;
    let per_layer_params = (b.params - a.params) as f64 / (hi - lo) as f64;
    let per_layer_mem = (b.memory_per_core_bytes - a.memory_per_core_bytes) / (hi - lo) as f64;
    let layers = lo as f64 + (target_params - a.params as f64) / per_layer_params;
    if layers <= 0.0 {
        return Err(Error::validation("calibration", format!("{target_params} parameters is below any depth")));
    }
    Ok(a.memory_per_core_bytes + (layers - lo as f64) * per_layer_mem)
}

/// Published capacity row: slice, width, largest trainable model and its
/// measured step time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub slice: String,
    pub hidden: u64,
    pub max_params: f64,
    pub step_time_s: f64,
}

pub fn reference_rows() -> Vec<ReferenceRow> {
    [("v4-16", 5120, 13.7e9, 0.87), ("v4-128", 10240, 86.6e9, 1.52), ("v4-512", 16384, 340.0e9, 6.21)]
        .into_iter()
        .map(|(slice, hidden, max_params, step_time_s)| ReferenceRow {
            slice: slice.into(),
            hidden,
            max_params,
            step_time_s,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityRow {
    pub result: CapacityResult,
    pub reference: ReferenceRow,
    /// `predicted / reference − 1` for the maximum model size.
    pub size_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityTable {
    /// Per-core memory used for every row, after calibration if requested.
    pub hbm_bytes_per_core: f64,
    pub calibrated: bool,
    pub rows: Vec<CapacityRow>,
}

/// Run the capacity search for each reference row on `base` (its core
/// count replaced by the row's slice size). With `calibrate`, per-core
/// memory is first fitted so the first row's size is matched.
pub fn capacity_table(
    base: &HardwareProfile,
    opts: &CapacityOptions,
    calibrate: bool,
    exec: Exec,
) -> Result<CapacityTable> {
    let refs = reference_rows();
    let slice = |r: &ReferenceRow, hbm: f64| -> Result<HardwareProfile> {
        let cores: u64 = r.slice.rsplit_once('-').and_then(|(_, n)| n.parse().ok()).expect("reference slice names");
        let mut p = base.clone().with_cores(cores).with_hbm(hbm);
        p.name = format!("{}-{cores}", base.name.split('-').next().unwrap_or(&base.name));
        Ok(p)
    };
    let mut hbm = base.hbm_bytes_per_core;
    if calibrate {
        let first = &refs[0];
        hbm = calibrate_hbm(first.hidden, &slice(first, hbm)?, first.max_params, opts)?;
    }
    let rows = refs
        .into_iter()
        .map(|r| {
            let result = max_layers(r.hidden, &slice(&r, hbm)?, opts, exec)?;
            let size_residual = result.max_params as f64 / r.max_params - 1.0;
            Ok(CapacityRow { result, reference: r, size_residual })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CapacityTable { hbm_bytes_per_core: hbm, calibrated: calibrate, rows })
}
