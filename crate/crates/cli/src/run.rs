use std::collections::BTreeMap;
use std::fmt::Write;
use std::path::{Path, PathBuf};

use meshplan::analysis::{
    activation_bytes, closed_form_step_flops, embedding_param_count, flops_per_step, memory_bytes, param_count,
    OptimizerSpec, Remat,
};
use meshplan::hw_cost::HardwareProfile;
use meshplan::mesh::{check_heads, megatron_specs, propagate, LogicalMesh, PartitionSpec, TensorKey};
use meshplan::model_ir::{build_decoder_only, DType, ModelGraph};
use meshplan::planner::{
    capacity_table, checkpoint_interval, compare_parallelism, max_layers, CapacityOptions, Outcome,
};
use meshplan::simulator::{
    simulate_combined, simulate_pipeline, tensor_parallel_cost, PipelinePlan, StageAssignment, Timeline,
};
use meshplan::Exec;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{ConfigError, ExperimentConfig, StrategyKind, DEFAULT_PROFILE};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Analyze,
    Shard,
    Simulate,
    Compare,
    Capacity,
    Checkpoint,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Analyze => "analyze",
            Command::Shard => "shard",
            Command::Simulate => "simulate",
            Command::Compare => "compare",
            Command::Capacity => "capacity",
            Command::Checkpoint => "checkpoint",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{op}: {source}")]
    Core {
        op: &'static str,
        #[source]
        source: meshplan::Error,
    },
    #[error("writing {path}: {source}")]
    Output { path: PathBuf, source: std::io::Error },
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Core { source: meshplan::Error::Invariant(_), .. } => 4,
            RunError::Core { source, .. } if source.is_infeasible() => 3,
            RunError::Core { .. } => 2,
            RunError::Output { .. } => 1,
        }
    }
}

/// Rendered results of one subcommand.
#[derive(Debug, Clone)]
pub struct Output {
    pub report: Value,
    pub text: String,
    pub svg: Option<String>,
}

pub struct RunOptions {
    /// Profile name or path, overriding the config.
    pub profile: Option<String>,
    pub seed: Option<u64>,
    /// Directory that relative paths in the config are resolved against.
    pub base_dir: PathBuf,
}

struct Ctx<'a> {
    op: &'static str,
    cfg: &'a ExperimentConfig,
    opts: &'a RunOptions,
}

impl Ctx<'_> {
    fn core<T>(&self, r: meshplan::Result<T>) -> Result<T, RunError> {
        r.map_err(|source| RunError::Core { op: self.op, source })
    }

    fn profile(&self) -> Result<HardwareProfile, RunError> {
        let spec = self.opts.profile.as_deref().or(self.cfg.profile.as_deref()).unwrap_or(DEFAULT_PROFILE);
        let resolved = if self.opts.profile.is_none()
            && Path::new(spec).is_relative()
            && self.opts.base_dir.join(spec).is_file()
        {
            self.opts.base_dir.join(spec).to_string_lossy().into_owned()
        } else {
            spec.to_string()
        };
        let mut p = self.core(HardwareProfile::load(&resolved))?;
        if let Some(o) = &self.cfg.profile_overrides {
            if let Some(v) = o.cores_per_slice {
                p.cores_per_slice = v;
            }
            if let Some(v) = o.mfu {
                p.mfu = v;
            }
            if let Some(v) = o.link_bandwidth {
                p.link_bandwidth = v;
            }
            if let Some(v) = o.link_latency {
                p.link_latency = v;
            }
            if let Some(v) = o.hbm_bytes_per_core {
                p.hbm_bytes_per_core = v;
            }
            if let Some(v) = o.step_overhead_s {
                p.step_overhead_s = v;
            }
        }
        self.core(p.validate())?;
        Ok(p)
    }

    fn graph(&self) -> Result<ModelGraph, RunError> {
        if let Some(m) = &self.cfg.model {
            return self.core(build_decoder_only(&m.transformer()));
        }
        let Some(path) = &self.cfg.model_path else {
            return Err(ConfigError::Invalid(format!("`{}` needs `model` or `model_path`", self.op)).into());
        };
        let path = self.opts.base_dir.join(path);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| ConfigError::Invalid(format!("reading model {}: {e}", path.display())))?;
        self.core(ModelGraph::from_json(&text))
    }

    fn strategy(&self) -> Result<StrategyKind, RunError> {
        self.cfg.strategy.ok_or_else(|| ConfigError::Invalid(format!("`{}` needs a `strategy`", self.op)).into())
    }
}

fn divisors(n: u64) -> Vec<usize> {
    (1..=n).filter(|d| n.is_multiple_of(*d)).map(|d| d as usize).collect()
}

// Candidate micro-batch counts: the configured one, or every divisor.
fn micro_batch_candidates(cfg: &ExperimentConfig, batch: u64) -> Vec<usize> {
    cfg.micro_batches.map_or_else(|| divisors(batch), |m| vec![m])
}

// Fastest timeline over `candidates`, ties going to the first.
fn fastest<F>(ctx: &Ctx, candidates: &[usize], run: F) -> Result<(usize, Timeline), RunError>
where
    F: Fn(usize) -> meshplan::Result<Timeline> + Sync + Send,
{
    let runs = Exec::default().map(candidates, |&m| run(m));
    let mut best: Option<(usize, Timeline)> = None;
    for (&m, r) in candidates.iter().zip(runs) {
        let t = ctx.core(r)?;
        if best.as_ref().is_none_or(|(_, b)| t.step_time < b.step_time) {
            best = Some((m, t));
        }
    }
    Ok(best.expect("at least one candidate"))
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("report values serialize")
}

pub fn run(cmd: Command, cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Output, RunError> {
    cfg.validate()?;
    let ctx = Ctx { op: cmd.name(), cfg, opts };
    let (result, text, svg, profile) = match cmd {
        Command::Analyze => {
            let (r, t) = analyze(&ctx)?;
            (r, t, None, None)
        }
        Command::Shard => {
            let p = ctx.profile()?;
            let (r, t) = shard(&ctx, &p)?;
            (r, t, None, Some(p))
        }
        Command::Simulate => {
            let p = ctx.profile()?;
            let (r, t, s) = simulate(&ctx, &p)?;
            (r, t, Some(s), Some(p))
        }
        Command::Compare => {
            let p = ctx.profile()?;
            let (r, t) = compare(&ctx, &p)?;
            (r, t, None, Some(p))
        }
        Command::Capacity => {
            let p = ctx.profile()?;
            let (r, t) = capacity(&ctx, &p)?;
            (r, t, None, Some(p))
        }
        Command::Checkpoint => {
            let (r, t) = checkpoint(&ctx)?;
            (r, t, None, None)
        }
    };
    let report = json!({
        "tool_version": env!("CARGO_PKG_VERSION"),
        "command": cmd.name(),
        "config_echo": {
            "config": to_value(cfg),
            "applied_defaults": to_value(&cfg.applied_defaults()),
            "profile": profile.as_ref().map(to_value),
            "seed": opts.seed,
        },
        "result": result,
    });
    Ok(Output { report, text, svg })
}

fn analyze(ctx: &Ctx) -> Result<(Value, String), RunError> {
    let g = ctx.graph()?;
    let params = param_count(&g);
    let embedding = embedding_param_count(&g);
    let none = ctx.core(activation_bytes(&g, Remat::None))?;
    let per_block = ctx.core(activation_bytes(&g, Remat::PerBlock))?;
    let dtype =
        g.nodes().iter().flat_map(|n| n.params.iter()).map(|pt| pt.shape.dtype).next().unwrap_or(DType::Float32);
    let memory = memory_bytes(params, dtype, OptimizerSpec::adam(), true).with_activation(per_block);
    let flops = ctx.core(flops_per_step(&g))?;
    let tokens = g.batch_size() * ctx.cfg.model.as_ref().map_or(1, |m| m.transformer().seq_len);
    let closed = closed_form_step_flops(params, tokens);
    let result = json!({
        "nodes": g.len(),
        "edges": g.edges().len(),
        "params": params,
        "embedding_params": embedding,
        "block_params": params - embedding,
        "memory_with_adam": to_value(&memory),
        "activation_bytes": {"none": none, "per_block": per_block},
        "flops": to_value(&flops),
        "closed_form_step_flops": ctx.cfg.model.as_ref().map(|_| closed),
    });
    let mut t = String::new();
    let _ = writeln!(t, "nodes                 {}", g.len());
    let _ = writeln!(t, "params                {params}");
    let _ = writeln!(t, "embedding params      {embedding}");
    let _ = writeln!(t, "block params          {}", params - embedding);
    let _ = writeln!(t, "memory (adam, bytes)  {}", memory.total_bytes);
    let _ = writeln!(t, "activations none      {none}");
    let _ = writeln!(t, "activations per-block {per_block}");
    let _ = writeln!(t, "step flops            {:.4e}", flops.step);
    Ok((result, t))
}

fn parse_specs(ctx: &Ctx, m: &BTreeMap<String, String>) -> Result<BTreeMap<TensorKey, PartitionSpec>, RunError> {
    m.iter().map(|(k, v)| Ok((ctx.core(k.parse())?, ctx.core(v.parse())?))).collect()
}

fn mesh(ctx: &Ctx, p: &HardwareProfile) -> Result<LogicalMesh, RunError> {
    match &ctx.cfg.mesh {
        Some(axes) => ctx.core(LogicalMesh::new(axes.iter().map(|a| (a.name.clone(), a.size)))),
        None => {
            let dp = ctx.cfg.dp.unwrap_or(1) as u64;
            let tp = ctx.cfg.tp.map_or(p.cores_per_slice / dp, |t| t as u64);
            ctx.core(LogicalMesh::data_model(dp, tp.max(1)))
        }
    }
}

fn shard(ctx: &Ctx, p: &HardwareProfile) -> Result<(Value, String), RunError> {
    let g = ctx.graph()?;
    let mesh = mesh(ctx, p)?;
    let sharding = ctx.cfg.sharding.clone().unwrap_or_default();
    let io = if sharding.io.is_empty() {
        if let (Some(heads), Some(tp)) = (g.attention_heads(), mesh.axis_size("model")) {
            ctx.core(check_heads(heads, tp))?;
        }
        megatron_specs(&g, "data", "model")
    } else {
        parse_specs(ctx, &sharding.io)?
    };
    let constraints = parse_specs(ctx, &sharding.constraints)?;
    let asg = ctx.core(propagate(&g, &mesh, &io, &constraints))?;
    let cost = ctx.core(tensor_parallel_cost(&g, &mesh, &asg, p))?;
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for c in &asg.collectives {
        *counts.entry(format!("{}/{}", c.kind.name(), to_value(&c.phase).as_str().unwrap_or("?"))).or_default() += 1;
    }
    let result = json!({
        "mesh": mesh.axes().iter().map(|(n, s)| json!({"name": n, "size": s})).collect::<Vec<_>>(),
        "specs": to_value(&asg.specs),
        "collectives": to_value(&asg.collectives),
        "collective_counts": counts,
        "cost": to_value(&cost),
    });
    let mut t = String::new();
    let _ = writeln!(t, "mesh {}", mesh.axes().iter().map(|(n, s)| format!("{n}={s}")).collect::<Vec<_>>().join(" "));
    for (k, s) in &asg.specs {
        let _ = writeln!(t, "{k:<40} {s}");
    }
    for (k, n) in &counts {
        let _ = writeln!(t, "{k:<28} {n}");
    }
    let _ = writeln!(t, "step time {:.6e} s (compute {:.6e}, comm {:.6e})", cost.total_s, cost.compute_s, cost.comm_s);
    Ok((result, t))
}

fn simulate(ctx: &Ctx, p: &HardwareProfile) -> Result<(Value, String, String), RunError> {
    let g = ctx.graph()?;
    let batch = g.batch_size();
    let cores = p.cores_per_slice as usize;
    let (dp, tp, stages, m, t) = match ctx.strategy()? {
        StrategyKind::Pipeline => {
            let stages = ctx.cfg.stages.unwrap_or(cores.min(g.len()));
            let sa = ctx.core(StageAssignment::balanced(&g, stages))?;
            let (m, t) = fastest(ctx, &micro_batch_candidates(ctx.cfg, batch), |m| simulate_pipeline(&g, &sa, m, p))?;
            (1, 1, stages, Some(m), t)
        }
        StrategyKind::Tensor => {
            let dp = ctx.cfg.dp.unwrap_or(1);
            let tp = ctx.cfg.tp.unwrap_or(cores / dp);
            let t = ctx.core(simulate_combined(&g, dp, tp, None, batch, p))?;
            (dp, tp, 1, None, t)
        }
        StrategyKind::Combined => {
            let (dp, tp, stages) = (ctx.cfg.dp.unwrap_or(1), ctx.cfg.tp.unwrap_or(1), ctx.cfg.stages.unwrap_or(1));
            let sa = ctx.core(StageAssignment::balanced(&g, stages))?;
            let (m, t) = fastest(ctx, &micro_batch_candidates(ctx.cfg, batch / dp.max(1) as u64), |m| {
                let plan = PipelinePlan { stages: sa.clone(), micro_batches: m };
                simulate_combined(&g, dp, tp, Some(&plan), batch, p)
            })?;
            (dp, tp, stages, Some(m), t)
        }
    };
    ctx.core(t.check())?;
    let result = json!({
        "strategy": to_value(&ctx.strategy()?),
        "dp": dp,
        "tp": tp,
        "stages": stages,
        "micro_batches": m,
        "step_time": t.step_time,
        "idle_fraction": t.idle_fraction(),
        "timeline": t.to_json(),
    });
    let mut text = String::new();
    let _ = writeln!(text, "dp={dp} tp={tp} stages={stages} micro_batches={}", m.map_or("-".into(), |m| m.to_string()));
    let _ = writeln!(text, "step time     {:.6e} s", t.step_time);
    let _ = writeln!(text, "idle fraction {:.4}", t.idle_fraction());
    for (d, u) in t.per_device_utilization.iter().enumerate() {
        let _ = writeln!(text, "device {d:<4} utilization {u:.4}");
    }
    Ok((result, text, t.to_svg()))
}

fn compare(ctx: &Ctx, p: &HardwareProfile) -> Result<(Value, String), RunError> {
    let g = ctx.graph()?;
    let sweep = ctx.cfg.micro_batches.map(|m| vec![m]);
    let r = ctx.core(compare_parallelism(&g, p, g.batch_size(), sweep.as_deref(), Exec::default()))?;
    let mut t = String::new();
    match &r.pipeline {
        Outcome::Feasible(c) => {
            let _ =
                writeln!(t, "pipeline  {:.6e} s  stages={} micro_batches={}", c.step_time, c.stages, c.micro_batches);
        }
        Outcome::Infeasible { reason } => {
            let _ = writeln!(t, "pipeline  infeasible: {reason}");
        }
    }
    match &r.tensor {
        Outcome::Feasible(c) => {
            let _ = writeln!(t, "tensor    {:.6e} s  dp={} tp={}", c.step_time, c.dp, c.tp);
        }
        Outcome::Infeasible { reason } => {
            let _ = writeln!(t, "tensor    infeasible: {reason}");
        }
    }
    let _ = writeln!(t, "winner    {}", to_value(&r.winner).as_str().unwrap_or("?"));
    Ok((to_value(&r), t))
}

fn capacity(ctx: &Ctx, p: &HardwareProfile) -> Result<(Value, String), RunError> {
    let c = ctx.cfg.capacity.clone().unwrap_or_default();
    let defaults = CapacityOptions::default();
    let opts = CapacityOptions {
        vocab: c.vocab.unwrap_or(defaults.vocab),
        seq_len: c.seq_len.unwrap_or(defaults.seq_len),
        layer_cap: c.layer_cap.unwrap_or(defaults.layer_cap),
        ..defaults
    };
    let mut t = String::new();
    if let Some(h) = c.hidden {
        let r = ctx.core(max_layers(h, p, &opts, Exec::default()))?;
        let _ = writeln!(t, "slice {} hidden {} heads {} tp {}", r.slice_name, r.hidden, r.heads, r.tp);
        let _ = writeln!(t, "max layers {}{}", r.max_layers, if r.capped { " (search cap)" } else { "" });
        let _ = writeln!(t, "max params {:.4e}", r.max_params as f64);
        let _ = writeln!(t, "predicted step time {:.3} s", r.predicted_step_time);
        return Ok((to_value(&r), t));
    }
    let table = ctx.core(capacity_table(p, &opts, c.calibrate.unwrap_or(true), Exec::default()))?;
    let _ = writeln!(
        t,
        "hbm bytes per core {:.4e}{}",
        table.hbm_bytes_per_core,
        if table.calibrated { " (calibrated)" } else { "" }
    );
    let _ = writeln!(
        t,
        "{:<8} {:>6} {:>6} {:>12} {:>12} {:>9} {:>10} {:>10}",
        "slice", "hidden", "layers", "max size", "reference", "residual", "step (s)", "ref step"
    );
    for r in &table.rows {
        let _ = writeln!(
            t,
            "{:<8} {:>6} {:>6} {:>11.1}B {:>11.1}B {:>+8.1}% {:>10.3} {:>10.2}",
            r.result.slice_name,
            r.result.hidden,
            r.result.max_layers,
            r.result.max_params as f64 / 1e9,
            r.reference.max_params / 1e9,
            r.size_residual * 100.0,
            r.result.predicted_step_time,
            r.reference.step_time_s
        );
    }
    Ok((to_value(&table), t))
}

fn checkpoint(ctx: &Ctx) -> Result<(Value, String), RunError> {
    let Some(c) = &ctx.cfg.checkpoint else {
        return Err(ConfigError::Invalid("`checkpoint` needs a `checkpoint` section".into()).into());
    };
    let plan = ctx.core(checkpoint_interval(c.step_time_s, c.checkpoint_cost_s, c.mtbf_s))?;
    let mut t = String::new();
    let _ = writeln!(t, "interval {:.1} s ({} steps)", plan.interval_s, plan.interval_steps);
    let _ = writeln!(t, "optimal  {:.1} s", plan.optimal_interval_s);
    let _ = writeln!(t, "overhead {:.4}", plan.expected_overhead_fraction);
    for w in &plan.warnings {
        let _ = writeln!(t, "warning: {w}");
    }
    Ok((to_value(&plan), t))
}
