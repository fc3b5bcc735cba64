//! One PASS/FAIL line per acceptance criterion. Randomized criteria use a
//! fixed-seed generator so every run checks the same cases.

mod common;

use std::time::Instant;

use meshplan::analysis::{
    activation_bytes, closed_form_step_flops, flops_per_step, memory_bytes, param_count, OptimizerSpec, Remat,
};
use meshplan::hw_cost::{infer_comm_fraction, recombine_speedup, HardwareProfile};
use meshplan::model_ir::{build_decoder_only, DType, TransformerConfig};
use meshplan::planner::{
    capacity_table, checkpoint_interval, checkpoint_overhead, compare_parallelism, CapacityOptions, Winner,
};
use meshplan::simulator::{gpipe_bubble_fraction, simulate_pipeline, StageAssignment};
use meshplan::Exec;
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn runner(cases: u32) -> TestRunner {
    let config = Config { cases, failure_persistence: None, ..Config::default() };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn ensure(ok: bool, msg: String) -> Outcome {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn memory_arithmetic() -> Outcome {
    // 6.7B float32 parameters are reported as 25 GiB.
    let bytes = memory_bytes(6_700_000_000, DType::Float32, OptimizerSpec::none(), false).param_bytes;
    let gib = bytes as f64 / (1u64 << 30) as f64;
    ensure(
        bytes == 26_800_000_000 && (gib / 25.0 - 1.0).abs() <= 0.005,
        format!("{bytes} bytes = {gib:.2} GiB vs 25 GiB"),
    )
}

fn bubble_fraction() -> Outcome {
    let profile = HardwareProfile::builtin("v4").unwrap().ideal_links();
    let mut worst: f64 = 0.0;
    for p in [2, 3, 4, 8] {
        for m in 1..=32usize {
            let g = common::matmul_chain(p, m as u64, 16);
            let stages = StageAssignment::balanced(&g, p).map_err(|e| e.to_string())?;
            let t = simulate_pipeline(&g, &stages, m, &profile).map_err(|e| e.to_string())?;
            worst = worst.max((t.idle_fraction() - gpipe_bubble_fraction(p, m)).abs());
        }
    }
    ensure(worst <= 1e-9, format!("max |idle - (p-1)/(m+p-1)| = {worst:.2e} over 128 cases"))
}

fn fig3_config() -> TransformerConfig {
    TransformerConfig::new(1024, 24, 16).with_seq(2048).with_batch(32)
}

fn pipeline_vs_tensor() -> Outcome {
    let g = build_decoder_only(&fig3_config()).unwrap();
    let slice = HardwareProfile::builtin("v4-32").unwrap();
    let params = param_count(&g);
    let fast = compare_parallelism(&g, &slice, 32, None, Exec::Parallel).map_err(|e| e.to_string())?;
    let slow_links = slice.clone().with_bandwidth(slice.link_bandwidth * 1e-3);
    let slow = compare_parallelism(&g, &slow_links, 32, None, Exec::Parallel).map_err(|e| e.to_string())?;
    let time = |r: &meshplan::planner::ComparisonReport| {
        (r.tensor.feasible().map_or(f64::NAN, |t| t.step_time), r.pipeline.feasible().map_or(f64::NAN, |p| p.step_time))
    };
    let (t, p) = time(&fast);
    let (ts, ps) = time(&slow);
    ensure(
        fast.winner == Winner::Tensor && slow.winner == Winner::Pipeline && (3.0e8..4.0e8).contains(&(params as f64)),
        format!(
            "{:.0}M params: tensor {t:.4}s < pipeline {p:.4}s; at 0.1% bandwidth pipeline {ps:.4}s < tensor {ts:.4}s",
            params as f64 / 1e6
        ),
    )
}

fn speedup_decomposition() -> Outcome {
    // Forward and backward passes sped up 2x and 1.6x, the whole step 1.7x.
    let r = 275.0 / 122.0;
    let c_fwd = infer_comm_fraction(2.0, r).map_err(|e| e.to_string())?;
    let c_bwd = infer_comm_fraction(1.6, r).map_err(|e| e.to_string())?;
    let total = recombine_speedup(&[(1.0, c_fwd), (2.0, c_bwd)], r);
    ensure(
        (c_fwd - 0.100).abs() <= 0.005 && (c_bwd - 0.325).abs() <= 0.005 && (1.65..=1.75).contains(&total),
        format!("c_fwd {c_fwd:.4}, c_bwd {c_bwd:.4}, recombined {total:.3}x vs 1.7x"),
    )
}

fn capacity() -> Outcome {
    let base = HardwareProfile::builtin("v4").unwrap();
    let table = capacity_table(&base, &CapacityOptions::default(), true, Exec::Parallel).map_err(|e| e.to_string())?;
    let rows = &table.rows;
    let mut msg = format!("hbm {:.3e} B/core;", table.hbm_bytes_per_core);
    for r in rows {
        msg += &format!(
            " {} {:.1}B ({:+.1}%) {:.2}s;",
            r.result.slice_name,
            r.result.max_params as f64 / 1e9,
            r.size_residual * 100.0,
            r.result.predicted_step_time
        );
    }
    let sizes_ordered = rows.windows(2).all(|w| w[0].result.max_params < w[1].result.max_params);
    let steps_ordered = rows.windows(2).all(|w| w[0].result.predicted_step_time < w[1].result.predicted_step_time);
    let within = rows[1..].iter().all(|r| r.size_residual.abs() <= 0.35);
    // The calibration row can only miss by less than one 10-layer quantum.
    let first = &rows[0].result;
    let quantum = first.witness.as_ref().map_or(f64::INFINITY, |w| (w.params - first.max_params) as f64);
    let calibrated = (13.7e9 - first.max_params as f64) >= 0.0 && (13.7e9 - first.max_params as f64) < quantum;
    ensure(sizes_ordered && steps_ordered && within && calibrated, msg.trim_end_matches(';').to_string())
}

fn sharding_suite() -> Outcome {
    let mut r = runner(200);
    r.run(&common::sharded_case(), |(cfg, data, model)| common::check_sharding(&cfg, data, model))
        .map_err(|e| e.to_string())?;
    let mut r = runner(200);
    r.run(&(1u64..=64, 1u64..=16), |(heads, tp)| common::check_heads_rule(heads, tp)).map_err(|e| e.to_string())?;
    Ok("200 graphs x meshes: unshard, model=1 silent, idempotent; 200 heads/tp pairs".into())
}

fn analysis_oracles() -> Outcome {
    let mut r = runner(50);
    r.run(&common::small_decoder(), |cfg| {
        let g = common::graph(&cfg);
        let doc: serde_json::Value = serde_json::from_str(&g.to_json()).unwrap();
        prop_assert_eq!(param_count(&g), common::brute_param_count(&doc));
        prop_assert_eq!(activation_bytes(&g, Remat::None).unwrap(), common::brute_activation_bytes(&doc, false));
        prop_assert_eq!(activation_bytes(&g, Remat::PerBlock).unwrap(), common::brute_activation_bytes(&doc, true));
        Ok(())
    })
    .map_err(|e| e.to_string())?;
    let flops = (64u64..=512, 1u64..=6, 1u64..=4, 1u64..=512, 1u64..=2).prop_filter_map(
        "seq <= hidden",
        |(h, layers, heads_log, seq, batch)| {
            let heads = 1 << heads_log.min(h.trailing_zeros() as u64);
            (seq <= h).then(|| TransformerConfig::new(h, layers, heads).with_seq(seq).with_batch(batch))
        },
    );
    let mut r = runner(50);
    let worst = std::cell::Cell::new(0.0f64);
    r.run(&flops, |cfg| {
        let g = common::graph(&cfg);
        let step = flops_per_step(&g).unwrap().step;
        let closed = closed_form_step_flops(param_count(&g), cfg.batch * cfg.seq_len);
        let rel = (step / closed - 1.0).abs();
        worst.set(worst.get().max(rel));
        prop_assert!(rel <= 0.10, "{cfg:?}: {step:.4e} vs {closed:.4e}");
        Ok(())
    })
    .map_err(|e| e.to_string())?;
    Ok(format!("50 configs match brute force; flops vs 6*N*tokens worst {:.2}%", worst.get() * 100.0))
}

fn checkpoint() -> Outcome {
    let mut r = runner(20);
    r.run(&(1.0f64..600.0, 3600.0f64..1.0e6), |(cost, mtbf)| {
        let plan = checkpoint_interval(1.0, cost, mtbf).unwrap();
        let hi = 4.0 * plan.optimal_interval_s;
        let (best, step) = common::grid_argmin(|t| checkpoint_overhead(t, cost, mtbf), hi, 10_000);
        prop_assert!((best - plan.optimal_interval_s).abs() <= step, "grid {best} vs {}", plan.optimal_interval_s);
        prop_assert!((plan.interval_s - plan.optimal_interval_s).abs() <= 0.5);
        Ok(())
    })
    .map_err(|e| e.to_string())?;
    let plan = checkpoint_interval(1.0, 60.0, 86_400.0).unwrap();
    Ok(format!("20 pairs within one grid step; 60 s / 1 day -> {:.1} s", plan.optimal_interval_s))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("memory arithmetic", memory_arithmetic),
        ("bubble fraction exactness", bubble_fraction),
        ("pipeline vs tensor step time", pipeline_vs_tensor),
        ("speedup decomposition", speedup_decomposition),
        ("capacity table", capacity),
        ("sharding invariants", sharding_suite),
        ("analysis oracles", analysis_oracles),
        ("checkpoint interval", checkpoint),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("PASS {} {name} ({secs:.1}s): {msg}", i + 1),
            Err(msg) => {
                failed += 1;
                println!("FAIL {} {name} ({secs:.1}s): {msg}", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
