//! Accelerator profiles and analytic costs for compute and collectives.
//!
//! Peak FLOP rates of the shipped profiles are published figures. Memory,
//! link bandwidth, link latency and MFU are uncalibrated placeholders and
//! are echoed with every result that depends on them.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::CollectiveKind;

const BUILTIN_PROFILES: &str = include_str!("../data/profiles.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareProfile {
    pub name: String,
    pub peak_flops_per_core: f64,
    pub cores_per_slice: u64,
    pub hbm_bytes_per_core: f64,
    /// Bytes per second per core.
    pub link_bandwidth: f64,
    /// Seconds per collective hop.
    pub link_latency: f64,
    pub mfu: f64,
    /// Fixed host-side coordination cost added once per step.
    #[serde(default)]
    pub step_overhead_s: f64,
}

impl HardwareProfile {
    /// Names of the shipped profiles.
    pub fn builtin_names() -> Vec<String> {
        builtin_list().into_iter().map(|p| p.name).collect()
    }

    /// A shipped profile by name. A `-N` suffix selects a slice of N cores,
    /// so `v4-32` is the v4 profile with 32 cores.
    pub fn builtin(name: &str) -> Result<Self> {
        let (base, cores) = match name.rsplit_once('-') {
            Some((base, n)) if !n.is_empty() && n.chars().all(|c| c.is_ascii_digit()) => {
                let cores: u64 =
                    n.parse().map_err(|_| Error::validation("hardware profile", format!("bad slice `{name}`")))?;
                (base, Some(cores))
            }
            _ => (name, None),
        };
        let mut profile = builtin_list()
            .into_iter()
            .find(|p| p.name == base)
            .ok_or_else(|| Error::validation("hardware profile", format!("unknown profile `{name}`")))?;
        if let Some(cores) = cores {
            profile.cores_per_slice = cores;
            profile.name = name.to_string();
        }
        profile.validate()?;
        Ok(profile)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let profile: HardwareProfile = serde_json::from_str(text)?;
        profile.validate()?;
        Ok(profile)
    }

    /// Load from a JSON file if `spec` names one, else look up a shipped
    /// profile.
    pub fn load(spec: &str) -> Result<Self> {
        let path = Path::new(spec);
        if path.is_file() {
            Self::from_json(&std::fs::read_to_string(path)?)
        } else {
            Self::builtin(spec)
        }
    }

    /// Latency and overhead may be zero and bandwidth infinite, to express
    /// idealized links.
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::validation("hardware profile", format!("`{}`: {reason}", self.name)));
        if !(self.peak_flops_per_core > 0.0 && self.peak_flops_per_core.is_finite()) {
            return bad(format!("peak_flops_per_core {} must be positive", self.peak_flops_per_core));
        }
        if self.cores_per_slice == 0 {
            return bad("cores_per_slice must be >= 1".into());
        }
        if !(self.hbm_bytes_per_core > 0.0) {
            return bad(format!("hbm_bytes_per_core {} must be positive", self.hbm_bytes_per_core));
        }
        if !(self.link_bandwidth > 0.0) {
            return bad(format!("link_bandwidth {} must be positive", self.link_bandwidth));
        }
        if !(self.link_latency >= 0.0 && self.link_latency.is_finite()) {
            return bad(format!("link_latency {} must be >= 0", self.link_latency));
        }
        if !(self.mfu > 0.0 && self.mfu <= 1.0) {
            return bad(format!("mfu {} must be in (0, 1]", self.mfu));
        }
        if !(self.step_overhead_s >= 0.0 && self.step_overhead_s.is_finite()) {
            return bad(format!("step_overhead_s {} must be >= 0", self.step_overhead_s));
        }
        Ok(())
    }

    pub fn with_cores(mut self, cores: u64) -> Self {
        self.cores_per_slice = cores;
        self
    }

    pub fn with_mfu(mut self, mfu: f64) -> Self {
        self.mfu = mfu;
        self
    }

    pub fn with_bandwidth(mut self, link_bandwidth: f64) -> Self {
        self.link_bandwidth = link_bandwidth;
        self
    }

    pub fn with_latency(mut self, link_latency: f64) -> Self {
        self.link_latency = link_latency;
        self
    }

    pub fn with_hbm(mut self, hbm_bytes_per_core: f64) -> Self {
        self.hbm_bytes_per_core = hbm_bytes_per_core;
        self
    }

    /// Infinitely fast links.
    pub fn ideal_links(self) -> Self {
        self.with_bandwidth(f64::INFINITY).with_latency(0.0)
    }
}

fn builtin_list() -> Vec<HardwareProfile> {
    serde_json::from_str(BUILTIN_PROFILES).expect("shipped profiles parse")
}

pub fn matmul_time(flops: f64, p: &HardwareProfile) -> f64 {
    flops / (p.peak_flops_per_core * p.mfu)
}

/// Ring all-reduce: a reduce-scatter followed by an all-gather.
pub fn allreduce_time(bytes: f64, n: u64, p: &HardwareProfile) -> f64 {
    if n <= 1 {
        return 0.0;
    }
    let n_f = n as f64;
    2.0 * bytes * (n_f - 1.0) / (n_f * p.link_bandwidth) + 2.0 * (n_f - 1.0) * p.link_latency
}

/// Ring all-gather; `bytes` is the gathered size.
pub fn allgather_time(bytes: f64, n: u64, p: &HardwareProfile) -> f64 {
    if n <= 1 {
        return 0.0;
    }
    let n_f = n as f64;
    bytes * (n_f - 1.0) / (n_f * p.link_bandwidth) + (n_f - 1.0) * p.link_latency
}

pub fn collective_time(kind: CollectiveKind, bytes: f64, n: u64, p: &HardwareProfile) -> f64 {
    match kind {
        CollectiveKind::AllReduce => allreduce_time(bytes, n, p),
        CollectiveKind::AllGather | CollectiveKind::ReduceScatter | CollectiveKind::AllToAll => {
            allgather_time(bytes, n, p)
        }
    }
}

/// Point-to-point transfer between neighbouring devices.
pub fn send_time(bytes: f64, p: &HardwareProfile) -> f64 {
    if bytes == 0.0 {
        return 0.0;
    }
    bytes / p.link_bandwidth + p.link_latency
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostItem {
    pub site: String,
    pub kind: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub compute_s: f64,
    pub comm_s: f64,
    pub total_s: f64,
    /// Communication overlaps compute (max composition) instead of
    /// following it (sum composition).
    pub overlap: bool,
    pub breakdown: Vec<CostItem>,
}

impl CostEstimate {
    /// Items whose kind is `compute` count as compute, the rest as
    /// communication.
    pub fn from_items(breakdown: Vec<CostItem>, overlap: bool) -> Self {
        let compute_s: f64 =
            breakdown.iter().filter(|i| i.kind == "compute").map(|i| i.seconds).fold(0.0, |a, s| a + s);
        let comm_s: f64 = breakdown.iter().filter(|i| i.kind != "compute").map(|i| i.seconds).fold(0.0, |a, s| a + s);
        let total_s = if overlap { compute_s.max(comm_s) } else { compute_s + comm_s };
        CostEstimate { compute_s, comm_s, total_s, overlap, breakdown }
    }
}

/// Share of the slower device's step time spent in communication, given
/// an observed speedup `s` from a faster device whose compute is `r` times
/// faster. Solves `1/s = (1 − c)/r + c`, assuming communication time is
/// unchanged between the two devices.
pub fn infer_comm_fraction(observed_speedup: f64, flops_ratio: f64) -> Result<f64> {
    if !(flops_ratio >= 1.0) || !(observed_speedup >= 1.0) {
        return Err(Error::validation(
            "speedup",
            format!("need 1 <= speedup ({observed_speedup}) and 1 <= ratio ({flops_ratio})"),
        ));
    }
    if observed_speedup > flops_ratio * (1.0 + 1e-12) {
        return Err(Error::SpeedupExceedsRatio { observed: observed_speedup, ratio: flops_ratio });
    }
    if flops_ratio == 1.0 {
        return Ok(0.0);
    }
    let c = (1.0 / observed_speedup - 1.0 / flops_ratio) / (1.0 - 1.0 / flops_ratio);
    Ok(c.clamp(0.0, 1.0))
}

/// Speedup implied by a communication fraction `c`.
pub fn predicted_speedup(comm_fraction: f64, flops_ratio: f64) -> f64 {
    1.0 / ((1.0 - comm_fraction) / flops_ratio + comm_fraction)
}

/// Whole-step speedup from per-phase communication fractions, weighting
/// the phases by their share of step time on the slower device.
pub fn recombine_speedup(phases: &[(f64, f64)], flops_ratio: f64) -> f64 {
    let before: f64 = phases.iter().map(|&(w, _)| w).sum();
    let after: f64 = phases.iter().map(|&(w, c)| w / predicted_speedup(c, flops_ratio)).sum();
    before / after
}
