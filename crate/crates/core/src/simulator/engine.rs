//! Discrete-event engine for SPMD device groups.
//!
//! Each task runs on a group of devices at once. Every device executes its
//! tasks in insertion order; a task starts when all of its dependencies
//! have completed and every device in its group has finished the task
//! before it. Completions are processed from a min-heap keyed by
//! (time, task id), so results do not depend on hash or thread order.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use super::{EventKind, Timeline, TimelineEvent};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub(crate) struct Task {
    pub devices: Vec<usize>,
    pub duration: f64,
    pub deps: Vec<usize>,
    pub kind: EventKind,
    /// `{j}` is replaced by the device's position within the group.
    pub label: String,
    pub micro_batch: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Time(f64);

impl Eq for Time {}

impl PartialOrd for Time {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Time {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Schedule {
    tasks: Vec<Task>,
    queues: Vec<Vec<usize>>,
}

impl Schedule {
    pub fn new(devices: usize) -> Self {
        Schedule { tasks: Vec::new(), queues: vec![Vec::new(); devices] }
    }

    pub fn add(&mut self, task: Task) -> usize {
        let id = self.tasks.len();
        for &d in &task.devices {
            self.queues[d].push(id);
        }
        self.tasks.push(task);
        id
    }

    pub fn run(&self) -> Result<Timeline> {
        let n = self.tasks.len();
        let mut dependents = vec![Vec::new(); n];
        let mut pending: Vec<usize> = self.tasks.iter().map(|t| t.deps.len()).collect();
        for (id, t) in self.tasks.iter().enumerate() {
            for &d in &t.deps {
                dependents[d].push(id);
            }
        }
        let mut st = RunState {
            ready_at: vec![0.0; n],
            start: vec![None; n],
            head: vec![0; self.queues.len()],
            free_at: vec![0.0; self.queues.len()],
            heap: BinaryHeap::new(),
        };
        for d in 0..self.queues.len() {
            if let Some(&t) = self.queues[d].first() {
                self.try_start(t, &pending, &mut st);
            }
        }
        let mut end = vec![0.0; n];
        while let Some(Reverse((Time(time), t))) = st.heap.pop() {
            end[t] = time;
            for &k in &dependents[t] {
                pending[k] -= 1;
                st.ready_at[k] = f64::max(st.ready_at[k], time);
                self.try_start(k, &pending, &mut st);
            }
            for &d in &self.tasks[t].devices {
                if let Some(&next) = self.queues[d].get(st.head[d]) {
                    self.try_start(next, &pending, &mut st);
                }
            }
        }
        if let Some(stuck) = (0..n).find(|&t| st.start[t].is_none()) {
            return Err(Error::Invariant(format!("schedule deadlocked at task `{}`", self.tasks[stuck].label)));
        }

        let mut events = Vec::new();
        for (t, task) in self.tasks.iter().enumerate() {
            let start = st.start[t].expect("all tasks started");
            for (j, &device) in task.devices.iter().enumerate() {
                events.push(TimelineEvent {
                    device,
                    start,
                    end: end[t],
                    kind: task.kind,
                    label: task.label.replace("{j}", &j.to_string()),
                    micro_batch: task.micro_batch,
                });
            }
        }
        Ok(Timeline::from_busy(events, self.queues.len()))
    }

    fn try_start(&self, t: usize, pending: &[usize], st: &mut RunState) {
        if st.start[t].is_some() || pending[t] > 0 {
            return;
        }
        let task = &self.tasks[t];
        if !task.devices.iter().all(|&d| self.queues[d].get(st.head[d]) == Some(&t)) {
            return;
        }
        let start = task.devices.iter().map(|&d| st.free_at[d]).fold(st.ready_at[t], f64::max);
        let end = start + task.duration;
        st.start[t] = Some(start);
        for &d in &task.devices {
            st.free_at[d] = end;
            st.head[d] += 1;
        }
        st.heap.push(Reverse((Time(end), t)));
    }
}

struct RunState {
    ready_at: Vec<f64>,
    start: Vec<Option<f64>>,
    head: Vec<usize>,
    free_at: Vec<f64>,
    heap: BinaryHeap<Reverse<(Time, usize)>>,
}
