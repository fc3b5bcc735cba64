//! Per-device schedule simulation of pipeline, tensor and combined
//! parallel training steps.

mod engine;
mod pipeline;
mod render;
mod stages;
mod tensor;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use pipeline::{gpipe_bubble_fraction, simulate_pipeline};
pub use stages::StageAssignment;
pub use tensor::{simulate_combined, simulate_tensor_parallel, tensor_parallel_cost, PipelinePlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Forward,
    Backward,
    Collective,
    SendRecv,
    Idle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineEvent {
    pub device: usize,
    pub start: f64,
    pub end: f64,
    pub kind: EventKind,
    pub label: String,
    pub micro_batch: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub step_time: f64,
    pub devices: usize,
    pub per_device_utilization: Vec<f64>,
    /// Sorted by device, then start time. Gaps are filled with idle events.
    pub events: Vec<TimelineEvent>,
}

impl Timeline {
    pub(crate) fn from_busy(mut events: Vec<TimelineEvent>, devices: usize) -> Timeline {
        let step_time = events.iter().map(|e| e.end).fold(0.0, f64::max);
        events
            .sort_by(|a, b| (a.device, a.start, a.end).partial_cmp(&(b.device, b.start, b.end)).expect("finite times"));
        let mut busy = vec![0.0; devices];
        let mut filled = Vec::with_capacity(events.len());
        let mut cursor = vec![0.0; devices];
        for e in events {
            if e.start > cursor[e.device] {
                filled.push(idle(e.device, cursor[e.device], e.start));
            }
            cursor[e.device] = f64::max(cursor[e.device], e.end);
            busy[e.device] += e.end - e.start;
            filled.push(e);
        }
        let mut events = Vec::with_capacity(filled.len() + devices);
        let mut it = filled.into_iter().peekable();
        for (d, &end) in cursor.iter().enumerate() {
            while let Some(e) = it.next_if(|e| e.device == d) {
                events.push(e);
            }
            if end < step_time {
                events.push(idle(d, end, step_time));
            }
        }
        let per_device_utilization =
            busy.iter().map(|b| if step_time > 0.0 { (b / step_time).clamp(0.0, 1.0) } else { 0.0 }).collect();
        Timeline { step_time, devices, per_device_utilization, events }
    }

    /// Idle share of total device time.
    pub fn idle_fraction(&self) -> f64 {
        if self.step_time == 0.0 || self.devices == 0 {
            return 0.0;
        }
        let idle: f64 =
            self.events.iter().filter(|e| e.kind == EventKind::Idle).map(|e| e.end - e.start).fold(0.0, |a, d| a + d);
        idle / (self.step_time * self.devices as f64)
    }

    /// Summed duration of events of `kind` on `device`.
    pub fn time_in(&self, device: usize, kind: EventKind) -> f64 {
        self.events
            .iter()
            .filter(|e| e.device == device && e.kind == kind)
            .map(|e| e.end - e.start)
            .fold(0.0, |a, d| a + d)
    }

    /// Events are well-formed, per-device non-overlapping and consistent
    /// with the step time and utilizations.
    pub fn check(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Invariant(m));
        let mut last_end = vec![0.0f64; self.devices];
        let mut max_end = 0.0f64;
        for e in &self.events {
            if e.device >= self.devices || !(e.end >= e.start) || e.start < 0.0 {
                return fail(format!("malformed event {e:?}"));
            }
            if e.start < last_end[e.device] - 1e-12 * self.step_time.max(1.0) {
                return fail(format!("overlap on device {} at `{}`", e.device, e.label));
            }
            last_end[e.device] = e.end;
            max_end = max_end.max(e.end);
        }
        if max_end != self.step_time {
            return fail(format!("step time {} but last event ends at {max_end}", self.step_time));
        }
        if self.per_device_utilization.len() != self.devices
            || self.per_device_utilization.iter().any(|u| !(0.0..=1.0).contains(u))
        {
            return fail("utilization outside [0, 1]".into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("timeline serializes")
    }

    pub fn to_svg(&self) -> String {
        render::svg(self)
    }
}

fn idle(device: usize, start: f64, end: f64) -> TimelineEvent {
    TimelineEvent { device, start, end, kind: EventKind::Idle, label: "idle".into(), micro_batch: None }
}
