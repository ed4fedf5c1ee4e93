//! Static task-to-worker assignment: round robin and worst-fit-decreasing
//! bin packing, plus an exhaustive optimum for small instances.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    #[default]
    RoundRobin,
    Wfd,
    WorkStealing,
}

impl Policy {
    pub const ALL: [Policy; 3] = [Policy::RoundRobin, Policy::Wfd, Policy::WorkStealing];

    pub fn as_str(self) -> &'static str {
        match self {
            Policy::RoundRobin => "round_robin",
            Policy::Wfd => "wfd",
            Policy::WorkStealing => "work_stealing",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "round_robin" | "rr" => Ok(Policy::RoundRobin),
            "wfd" => Ok(Policy::Wfd),
            "work_stealing" | "ws" => Ok(Policy::WorkStealing),
            _ => Err(Error::invalid(format!(
                "unknown scheduler policy `{s}` (round_robin, wfd, work_stealing)"
            ))),
        }
    }
}

/// Predicted cost of one task.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskWeight {
    pub task_id: usize,
    #[serde(rename = "weight_seconds")]
    pub weight: f64,
}

impl TaskWeight {
    pub fn new(task_id: usize, weight: f64) -> Self {
        Self { task_id, weight }
    }
}

/// Weights for tasks `0..n` in order.
pub fn weights_from(values: &[f64]) -> Vec<TaskWeight> {
    values.iter().enumerate().map(|(i, &w)| TaskWeight::new(i, w)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchedulePlan {
    pub policy: Policy,
    pub worker_count: usize,
    /// Ordered task ids per worker.
    pub assignments: Vec<Vec<usize>>,
    /// Max per-worker weight sum; `None` for work stealing or when no
    /// weights were given.
    pub predicted_makespan: Option<f64>,
}

impl SchedulePlan {
    pub fn task_count(&self) -> usize {
        self.assignments.iter().map(Vec::len).sum()
    }

    /// Worker that owns each task id, if any.
    pub fn owner_of(&self, task_id: usize) -> Option<usize> {
        self.assignments.iter().position(|a| a.contains(&task_id))
    }

    /// Per-worker weight sums.
    pub fn loads(&self, weights: &[TaskWeight]) -> Result<Vec<f64>> {
        self.assignments
            .iter()
            .map(|tasks| tasks.iter().map(|&t| weight_of(weights, t)).sum())
            .collect()
    }
}

fn check_workers(worker_count: usize) -> Result<()> {
    if worker_count == 0 {
        return Err(Error::invalid("worker count must be at least 1"));
    }
    Ok(())
}

fn check_weights(weights: &[TaskWeight]) -> Result<()> {
    let mut ids: Vec<usize> = weights.iter().map(|w| w.task_id).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::invalid(format!("task {} listed twice", w[0])));
    }
    match weights.iter().find(|w| !(w.weight > 0.0 && w.weight.is_finite())) {
        Some(w) => Err(Error::invalid(format!("task {} has non-positive weight {}", w.task_id, w.weight))),
        None => Ok(()),
    }
}

fn weight_of(weights: &[TaskWeight], task_id: usize) -> Result<f64> {
    weights
        .iter()
        .find(|w| w.task_id == task_id)
        .map(|w| w.weight)
        .ok_or_else(|| Error::invalid(format!("no weight for task {task_id}")))
}

/// Task `i` of the list goes to worker `i mod worker_count`.
pub fn round_robin(task_ids: &[usize], worker_count: usize) -> Result<SchedulePlan> {
    check_workers(worker_count)?;
    let mut assignments = vec![Vec::new(); worker_count];
    for (i, &t) in task_ids.iter().enumerate() {
        assignments[i % worker_count].push(t);
    }
    Ok(SchedulePlan {
        policy: Policy::RoundRobin,
        worker_count,
        assignments,
        predicted_makespan: None,
    })
}

/// Worst fit decreasing: heaviest first (ties by task id), each into the
/// currently lightest bin (ties by bin index).
pub fn wfd_bin_pack(weights: &[TaskWeight], worker_count: usize) -> Result<SchedulePlan> {
    check_workers(worker_count)?;
    check_weights(weights)?;
    let mut order: Vec<&TaskWeight> = weights.iter().collect();
    order.sort_by(|a, b| b.weight.total_cmp(&a.weight).then(a.task_id.cmp(&b.task_id)));
    let mut loads = vec![0.0f64; worker_count];
    let mut assignments = vec![Vec::new(); worker_count];
    for w in order {
        let bin = (0..worker_count)
            .min_by(|&a, &b| loads[a].total_cmp(&loads[b]).then(a.cmp(&b)))
            .expect("at least one bin");
        loads[bin] += w.weight;
        assignments[bin].push(w.task_id);
    }
    Ok(SchedulePlan {
        policy: Policy::Wfd,
        worker_count,
        assignments,
        predicted_makespan: Some(loads.into_iter().fold(0.0, f64::max)),
    })
}

/// Build the plan for `policy`. Work stealing starts from a round-robin
/// distribution of the task list.
pub fn plan(policy: Policy, weights: &[TaskWeight], worker_count: usize) -> Result<SchedulePlan> {
    check_weights(weights)?;
    let ids: Vec<usize> = weights.iter().map(|w| w.task_id).collect();
    let mut p = match policy {
        Policy::Wfd => return wfd_bin_pack(weights, worker_count),
        Policy::RoundRobin | Policy::WorkStealing => round_robin(&ids, worker_count)?,
    };
    p.policy = policy;
    if policy == Policy::RoundRobin {
        p.predicted_makespan = Some(makespan(&p, weights)?);
    }
    Ok(p)
}

/// Max over workers of the summed weights of their tasks.
pub fn makespan(plan: &SchedulePlan, weights: &[TaskWeight]) -> Result<f64> {
    Ok(plan.loads(weights)?.into_iter().fold(0.0, f64::max))
}

pub const BRUTE_FORCE_MAX_TASKS: usize = 14;
pub const BRUTE_FORCE_MAX_WORKERS: usize = 4;

/// Optimal makespan by exhaustive search with symmetry breaking.
pub fn brute_force_schedule(weights: &[f64], worker_count: usize) -> Result<f64> {
    check_workers(worker_count)?;
    if weights.len() > BRUTE_FORCE_MAX_TASKS || worker_count > BRUTE_FORCE_MAX_WORKERS {
        return Err(Error::invalid(format!(
            "{} tasks on {worker_count} workers exceeds the exhaustive bound ({BRUTE_FORCE_MAX_TASKS} tasks, {BRUTE_FORCE_MAX_WORKERS} workers)",
            weights.len()
        )));
    }
    if weights.is_empty() {
        return Ok(0.0);
    }
    let mut sorted = weights.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));

    fn go(i: usize, w: &[f64], loads: &mut [f64], used: usize, best: &mut f64) {
        if i == w.len() {
            let m = loads.iter().copied().fold(0.0, f64::max);
            if m < *best {
                *best = m;
            }
            return;
        }
        // an empty bin is interchangeable with any other empty bin
        let limit = (used + 1).min(loads.len());
        for b in 0..limit {
            if loads[b] + w[i] >= *best {
                continue;
            }
            loads[b] += w[i];
            go(i + 1, w, loads, used.max(b + 1), best);
            loads[b] -= w[i];
        }
    }

    let mut best = f64::INFINITY;
    let mut loads = vec![0.0; worker_count];
    go(0, &sorted, &mut loads, 0, &mut best);
    Ok(best)
}

/// Worst-case ratio of the longest-processing-time rule on `w` identical
/// machines.
pub fn lpt_bound(worker_count: usize) -> f64 {
    4.0 / 3.0 - 1.0 / (3.0 * worker_count as f64)
}

/// Read a `task_id,weight_seconds` profile.
pub fn read_profile(path: &Path) -> Result<Vec<TaskWeight>> {
    let text = std::fs::read_to_string(path)?;
    parse_profile(&text)
}

pub fn parse_profile(text: &str) -> Result<Vec<TaskWeight>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["task_id", "weight_seconds"] {
        return Err(Error::invalid(format!(
            "profile header must be `task_id,weight_seconds`, found `{}`",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<TaskWeight>().enumerate() {
        let line = i + 2;
        let w = row.map_err(|e| Error::invalid(format!("profile line {line}: {e}")))?;
        if !(w.weight > 0.0 && w.weight.is_finite()) {
            return Err(Error::invalid(format!("profile line {line}: weight must be positive")));
        }
        out.push(w);
    }
    check_weights(&out)?;
    Ok(out)
}

pub fn write_profile(path: &Path, weights: &[TaskWeight]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for t in weights {
        w.serialize(t)?;
    }
    w.flush()?;
    Ok(())
}

impl fmt::Display for SchedulePlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "policy {} on {} workers", self.policy, self.worker_count)?;
        for (w, tasks) in self.assignments.iter().enumerate() {
            let list: Vec<String> = tasks.iter().map(usize::to_string).collect();
            writeln!(f, "  worker {w}: [{}]", list.join(", "))?;
        }
        match self.predicted_makespan {
            Some(m) => write!(f, "makespan {m:.2}"),
            None => write!(f, "makespan decided at run time"),
        }
    }
}
