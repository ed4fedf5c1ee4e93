//! Parallel task execution with one dispatch and one gather, static plans
//! or work stealing, and timeline traces. Also an event-driven simulator
//! for experiments without real work.

use std::collections::VecDeque;
use std::fmt;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::str::FromStr;
use std::sync::Mutex;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scheduler::{self, Policy, SchedulePlan, TaskWeight};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventKind {
    Dispatch,
    TaskStart,
    TaskEnd,
    Steal,
    Gather,
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for EventKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "Dispatch" => Ok(EventKind::Dispatch),
            "TaskStart" => Ok(EventKind::TaskStart),
            "TaskEnd" => Ok(EventKind::TaskEnd),
            "Steal" => Ok(EventKind::Steal),
            "Gather" => Ok(EventKind::Gather),
            _ => Err(Error::Trace(format!("unknown event kind `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    #[serde(rename = "timestamp_s")]
    pub timestamp: f64,
    pub worker_id: usize,
    /// Empty for the gather event.
    pub task_id: Option<usize>,
    pub kind: EventKind,
}

/// One task's execution interval, recovered from a trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpan {
    pub task_id: usize,
    pub worker_id: usize,
    pub start: f64,
    pub end: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trace {
    pub events: Vec<TraceEvent>,
}

#[derive(Serialize, Deserialize)]
struct TraceRow {
    timestamp_s: f64,
    worker_id: usize,
    task_id: Option<usize>,
    kind: String,
}

impl Trace {
    fn push(&mut self, timestamp: f64, worker_id: usize, task_id: Option<usize>, kind: EventKind) {
        self.events.push(TraceEvent {
            timestamp,
            worker_id,
            task_id,
            kind,
        });
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for e in &self.events {
            w.serialize(TraceRow {
                timestamp_s: e.timestamp,
                worker_id: e.worker_id,
                task_id: e.task_id,
                kind: e.kind.to_string(),
            })?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Trace(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        if headers != ["timestamp_s", "worker_id", "task_id", "kind"] {
            return Err(Error::Trace(format!(
                "trace header must be `timestamp_s,worker_id,task_id,kind`, found `{}`",
                headers.join(",")
            )));
        }
        let mut trace = Trace::default();
        for (i, row) in rdr.deserialize::<TraceRow>().enumerate() {
            let row = row.map_err(|e| Error::Trace(format!("line {}: {e}", i + 2)))?;
            let kind = row.kind.parse().map_err(|e| Error::Trace(format!("line {}: {e}", i + 2)))?;
            trace.push(row.timestamp_s, row.worker_id, row.task_id, kind);
        }
        Ok(trace)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::parse_csv(&std::fs::read_to_string(path)?)
    }

    /// Timestamp of the gather, or of the last event.
    pub fn end_time(&self) -> f64 {
        self.events
            .iter()
            .find(|e| e.kind == EventKind::Gather)
            .or(self.events.last())
            .map_or(0.0, |e| e.timestamp)
    }

    pub fn worker_count(&self) -> usize {
        self.events.iter().map(|e| e.worker_id + 1).max().unwrap_or(0)
    }

    /// Start/end pairs in task-id order. Fails unless every task has exactly
    /// one start followed by one end on the same worker.
    pub fn spans(&self) -> Result<Vec<TaskSpan>> {
        let mut open: std::collections::BTreeMap<usize, (usize, f64)> = Default::default();
        let mut done: std::collections::BTreeMap<usize, TaskSpan> = Default::default();
        for e in &self.events {
            let Some(t) = e.task_id else { continue };
            match e.kind {
                EventKind::TaskStart => {
                    if open.contains_key(&t) || done.contains_key(&t) {
                        return Err(Error::Trace(format!("task {t} started twice")));
                    }
                    open.insert(t, (e.worker_id, e.timestamp));
                }
                EventKind::TaskEnd => {
                    let (w, start) = open
                        .remove(&t)
                        .ok_or_else(|| Error::Trace(format!("task {t} ended without starting")))?;
                    if w != e.worker_id || e.timestamp < start {
                        return Err(Error::Trace(format!("task {t} ends inconsistently with its start")));
                    }
                    done.insert(
                        t,
                        TaskSpan {
                            task_id: t,
                            worker_id: w,
                            start,
                            end: e.timestamp,
                        },
                    );
                }
                _ => {}
            }
        }
        if let Some(t) = open.keys().next() {
            return Err(Error::Trace(format!("task {t} never ended")));
        }
        Ok(done.into_values().collect())
    }

    /// Check the two-synchronization shape: one dispatch cluster before any
    /// task starts and a single gather after every task ends.
    pub fn check_two_sync(&self) -> Result<()> {
        let first_start = self.events.iter().position(|e| e.kind == EventKind::TaskStart);
        let last_dispatch = self.events.iter().rposition(|e| e.kind == EventKind::Dispatch);
        if let (Some(s), Some(d)) = (first_start, last_dispatch) {
            if d > s {
                return Err(Error::Trace("dispatch after the first task start".into()));
            }
        }
        let dispatches: Vec<usize> = self
            .events
            .iter()
            .enumerate()
            .filter(|(_, e)| e.kind == EventKind::Dispatch)
            .map(|(i, _)| i)
            .collect();
        if dispatches.windows(2).any(|w| w[1] != w[0] + 1) || dispatches.first().is_some_and(|&i| i != 0) {
            return Err(Error::Trace("dispatch events do not form one leading cluster".into()));
        }
        let gathers: Vec<usize> = self
            .events
            .iter()
            .enumerate()
            .filter(|(_, e)| e.kind == EventKind::Gather)
            .map(|(i, _)| i)
            .collect();
        if gathers != [self.events.len() - 1] {
            return Err(Error::Trace(format!(
                "expected exactly one trailing gather, found {}",
                gathers.len()
            )));
        }
        let spans = self.spans()?;
        let gather_t = self.events[gathers[0]].timestamp;
        if spans.iter().any(|s| s.end > gather_t) {
            return Err(Error::Trace("a task ends after the gather".into()));
        }
        let mut dispatched: Vec<usize> = dispatches.iter().filter_map(|&i| self.events[i].task_id).collect();
        dispatched.sort_unstable();
        let started: Vec<usize> = spans.iter().map(|s| s.task_id).collect();
        if dispatched != started {
            return Err(Error::Trace("dispatched and executed task sets differ".into()));
        }
        Ok(())
    }

    /// Fraction of the run each worker spent inside tasks.
    pub fn busy_fractions(&self) -> Result<Vec<f64>> {
        let end = self.end_time();
        let mut busy = vec![0.0; self.worker_count()];
        for s in self.spans()? {
            busy[s.worker_id] += s.end - s.start;
        }
        Ok(busy.into_iter().map(|b| if end > 0.0 { b / end } else { 0.0 }).collect())
    }
}

/// Worker count and placement policy for [`run_parallel`].
#[derive(Clone, Debug, PartialEq)]
pub struct WorkerPool {
    pub worker_count: usize,
    pub policy: Policy,
    /// Needed by WFD; other policies ignore it.
    pub weights: Option<Vec<TaskWeight>>,
}

impl WorkerPool {
    pub fn new(worker_count: usize, policy: Policy) -> Self {
        Self {
            worker_count,
            policy,
            weights: None,
        }
    }

    pub fn with_weights(mut self, weights: Vec<TaskWeight>) -> Self {
        self.weights = Some(weights);
        self
    }

    /// Initial queues for tasks `0..n`.
    pub fn plan(&self, n: usize) -> Result<SchedulePlan> {
        let ids: Vec<usize> = (0..n).collect();
        match self.policy {
            Policy::Wfd => {
                let w = self
                    .weights
                    .as_ref()
                    .ok_or_else(|| Error::invalid("wfd needs task weights"))?;
                let mut ids_w: Vec<usize> = w.iter().map(|t| t.task_id).collect();
                ids_w.sort_unstable();
                if ids_w != ids {
                    return Err(Error::invalid(format!("wfd weights must cover tasks 0..{n} exactly")));
                }
                scheduler::wfd_bin_pack(w, self.worker_count)
            }
            Policy::RoundRobin | Policy::WorkStealing => {
                let mut p = scheduler::round_robin(&ids, self.worker_count)?;
                p.policy = self.policy;
                Ok(p)
            }
        }
    }
}

/// What the gather reports for one task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskReport<R> {
    pub task_id: usize,
    pub worker_id: usize,
    pub start: f64,
    pub end: f64,
    pub outcome: std::result::Result<R, String>,
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "task panicked".into())
}

/// Run `work` on every task with one dispatch and one gather. Owners pop
/// their queue head; under work stealing an idle worker takes the tail of
/// the first non-empty queue in index order. Failures (errors or panics)
/// are isolated and reported. Reports come back in task-id order.
pub fn run_parallel<T, R, F>(tasks: &[T], pool: &WorkerPool, work: F) -> Result<(Vec<TaskReport<R>>, Trace)>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync,
{
    let plan = pool.plan(tasks.len())?;
    let clock = Instant::now();
    let now = || clock.elapsed().as_secs_f64();

    let mut trace = Trace::default();
    for (w, q) in plan.assignments.iter().enumerate() {
        for &t in q {
            trace.push(now(), w, Some(t), EventKind::Dispatch);
        }
    }
    let queues: Vec<Mutex<VecDeque<usize>>> = plan
        .assignments
        .iter()
        .map(|q| Mutex::new(q.iter().copied().collect()))
        .collect();
    let stealing = pool.policy == Policy::WorkStealing;
    let events = Mutex::new(Vec::new());
    let slots: Vec<Mutex<Option<TaskReport<R>>>> = (0..tasks.len()).map(|_| Mutex::new(None)).collect();

    std::thread::scope(|s| {
        for w in 0..plan.worker_count {
            let (queues, events, slots, work) = (&queues, &events, &slots, &work);
            s.spawn(move || loop {
                let own = queues[w].lock().expect("queue lock").pop_front();
                let next = own.or_else(|| {
                    if !stealing {
                        return None;
                    }
                    (0..queues.len()).filter(|&v| v != w).find_map(|v| {
                        let t = queues[v].lock().expect("queue lock").pop_back()?;
                        events.lock().expect("event lock").push((now(), w, Some(t), EventKind::Steal));
                        Some(t)
                    })
                });
                let Some(t) = next else { break };
                let start = now();
                events.lock().expect("event lock").push((start, w, Some(t), EventKind::TaskStart));
                let outcome = match catch_unwind(AssertUnwindSafe(|| work(&tasks[t]))) {
                    Ok(Ok(r)) => Ok(r),
                    Ok(Err(e)) => Err(e.to_string()),
                    Err(p) => Err(panic_message(p)),
                };
                let end = now();
                events.lock().expect("event lock").push((end, w, Some(t), EventKind::TaskEnd));
                *slots[t].lock().expect("slot lock") = Some(TaskReport {
                    task_id: t,
                    worker_id: w,
                    start,
                    end,
                    outcome,
                });
            });
        }
    });

    let mut worker_events = events.into_inner().expect("event lock");
    worker_events.sort_by(|a, b| a.0.total_cmp(&b.0));
    for (ts, w, t, k) in worker_events {
        trace.push(ts, w, t, k);
    }
    let reports: Vec<TaskReport<R>> = slots
        .into_iter()
        .map(|s| s.into_inner().expect("slot lock"))
        .collect::<Option<_>>()
        .ok_or_else(|| Error::Trace("a dispatched task never ran".into()))?;
    trace.push(now(), 0, None, EventKind::Gather);
    Ok((reports, trace))
}

/// Outcome of a simulated run.
#[derive(Clone, Debug, PartialEq)]
pub struct Simulation {
    pub wall_time: f64,
    pub trace: Trace,
    pub steals: usize,
}

/// Execute a static plan in simulated time: each worker runs its list back
/// to back, so the wall time is the plan's makespan.
pub fn simulate_static(plan: &SchedulePlan, weights: &[TaskWeight]) -> Result<Simulation> {
    let mut trace = Trace::default();
    for (w, q) in plan.assignments.iter().enumerate() {
        for &t in q {
            trace.push(0.0, w, Some(t), EventKind::Dispatch);
        }
    }
    let mut timed = Vec::new();
    let mut wall = 0.0f64;
    for (w, q) in plan.assignments.iter().enumerate() {
        let mut t = 0.0;
        for &task in q {
            let d = weights
                .iter()
                .find(|x| x.task_id == task)
                .ok_or_else(|| Error::invalid(format!("no weight for task {task}")))?
                .weight;
            timed.push((t, w, task, EventKind::TaskStart));
            t += d;
            timed.push((t, w, task, EventKind::TaskEnd));
        }
        wall = wall.max(t);
    }
    timed.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.3 == EventKind::TaskStart).cmp(&(b.3 == EventKind::TaskStart))));
    for (ts, w, task, k) in timed {
        trace.push(ts, w, Some(task), k);
    }
    trace.push(wall, 0, None, EventKind::Gather);
    Ok(Simulation {
        wall_time: wall,
        trace,
        steals: 0,
    })
}

/// Randomised steal latency for [`simulate_work_stealing`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StealTiming {
    pub max_delay: f64,
    pub seed: u64,
}

impl StealTiming {
    pub fn instant() -> Self {
        Self {
            max_delay: 0.0,
            seed: 0,
        }
    }
}

/// Event-driven work stealing. The worker with the earliest free time acts
/// next: it takes its own queue head, otherwise it picks the victim with the
/// most queued weight and takes that queue's tail, paying a random delay.
/// A steal only happens when the thief would start the task before the
/// victim could; a worker with nothing worth stealing retires.
pub fn simulate_work_stealing(
    initial: &[Vec<usize>],
    weights: &[TaskWeight],
    timing: StealTiming,
) -> Result<Simulation> {
    if initial.is_empty() {
        return Err(Error::invalid("worker count must be at least 1"));
    }
    if !(timing.max_delay >= 0.0 && timing.max_delay.is_finite()) {
        return Err(Error::invalid("steal delay must be non-negative"));
    }
    let weight = |t: usize| -> Result<f64> {
        let w = weights
            .iter()
            .find(|x| x.task_id == t)
            .ok_or_else(|| Error::invalid(format!("no weight for task {t}")))?
            .weight;
        if !(w > 0.0 && w.is_finite()) {
            return Err(Error::invalid(format!("task {t} has non-positive weight {w}")));
        }
        Ok(w)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(timing.seed);
    let n = initial.len();
    let mut queues: Vec<VecDeque<(usize, f64)>> = Vec::with_capacity(n);
    let mut trace = Trace::default();
    for (w, q) in initial.iter().enumerate() {
        let mut dq = VecDeque::new();
        for &t in q {
            dq.push_back((t, weight(t)?));
            trace.push(0.0, w, Some(t), EventKind::Dispatch);
        }
        queues.push(dq);
    }
    let mut free = vec![0.0f64; n];
    let mut active = vec![true; n];
    let mut timed = Vec::new();
    let mut steals = 0;
    let queued = |q: &VecDeque<(usize, f64)>| q.iter().map(|x| x.1).sum::<f64>();

    while let Some(w) = (0..n)
        .filter(|&w| active[w])
        .min_by(|&a, &b| free[a].total_cmp(&free[b]).then(a.cmp(&b)))
    {
        let now = free[w];
        if let Some((t, d)) = queues[w].pop_front() {
            timed.push((now, w, t, EventKind::TaskStart));
            free[w] = now + d;
            timed.push((free[w], w, t, EventKind::TaskEnd));
            continue;
        }
        let victim = (0..n)
            .filter(|&v| v != w && !queues[v].is_empty())
            .max_by(|&a, &b| queued(&queues[a]).total_cmp(&queued(&queues[b])).then(b.cmp(&a)));
        let Some(v) = victim else {
            active[w] = false;
            continue;
        };
        let delay = if timing.max_delay > 0.0 {
            rng.random_range(0.0..=timing.max_delay)
        } else {
            0.0
        };
        let &(t, d) = queues[v].back().expect("non-empty");
        // when the victim would reach its tail task
        let victim_start = free[v].max(now) + queued(&queues[v]) - d;
        if now + delay >= victim_start {
            active[w] = false;
            continue;
        }
        queues[v].pop_back();
        steals += 1;
        timed.push((now, w, t, EventKind::Steal));
        let start = now + delay;
        timed.push((start, w, t, EventKind::TaskStart));
        free[w] = start + d;
        timed.push((free[w], w, t, EventKind::TaskEnd));
    }
    let wall = timed
        .iter()
        .filter(|e| e.3 == EventKind::TaskEnd)
        .map(|e| e.0)
        .fold(0.0, f64::max);
    let rank = |k: EventKind| match k {
        EventKind::TaskEnd => 0,
        EventKind::Steal => 1,
        _ => 2,
    };
    timed.sort_by(|a, b| a.0.total_cmp(&b.0).then(rank(a.3).cmp(&rank(b.3))));
    for (ts, w, t, k) in timed {
        trace.push(ts, w, Some(t), k);
    }
    trace.push(wall, 0, None, EventKind::Gather);
    Ok(Simulation {
        wall_time: wall,
        trace,
        steals,
    })
}

/// Simulate `policy` on `worker_count` workers.
pub fn simulate_execution(
    policy: Policy,
    weights: &[TaskWeight],
    worker_count: usize,
    timing: StealTiming,
) -> Result<Simulation> {
    let plan = scheduler::plan(policy, weights, worker_count)?;
    match policy {
        Policy::WorkStealing => simulate_work_stealing(&plan.assignments, weights, timing),
        _ => simulate_static(&plan, weights),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scheduler::weights_from;

    fn example() -> Vec<TaskWeight> {
        weights_from(&[8.0, 7.0, 6.0, 5.0, 4.0])
    }

    #[test]
    fn static_simulation_matches_makespan() {
        let sim = simulate_execution(Policy::Wfd, &example(), 2, StealTiming::instant()).unwrap();
        assert_eq!(sim.wall_time, 17.0);
        sim.trace.check_two_sync().unwrap();
        let single = simulate_execution(Policy::RoundRobin, &example(), 1, StealTiming::instant()).unwrap();
        assert_eq!(single.wall_time, 30.0);
    }

    #[test]
    fn stealing_from_one_loaded_worker() {
        let initial = vec![vec![0, 1, 2, 3, 4], vec![]];
        let sim = simulate_work_stealing(&initial, &example(), StealTiming::instant()).unwrap();
        assert_eq!(sim.wall_time, 15.0);
        assert!(sim.steals > 0);
        sim.trace.check_two_sync().unwrap();
        for seed in 0..50 {
            let timing = StealTiming { max_delay: 0.5, seed };
            let sim = simulate_work_stealing(&initial, &example(), timing).unwrap();
            assert!((15.0..=17.0).contains(&sim.wall_time), "{}", sim.wall_time);
        }
    }

    #[test]
    fn real_run_covers_every_task_once() {
        let tasks: Vec<u64> = (0..13).collect();
        for policy in Policy::ALL {
            for workers in [1, 2, 4] {
                let pool = WorkerPool::new(workers, policy).with_weights(weights_from(&[1.0; 13]));
                let (reports, trace) = run_parallel(&tasks, &pool, |&t| Ok(t * t)).unwrap();
                assert_eq!(reports.len(), 13);
                for (i, r) in reports.iter().enumerate() {
                    assert_eq!(r.task_id, i);
                    assert_eq!(r.outcome, Ok((i * i) as u64));
                }
                trace.check_two_sync().unwrap();
            }
        }
    }

    #[test]
    fn failures_are_isolated() {
        let tasks: Vec<usize> = (0..6).collect();
        let pool = WorkerPool::new(3, Policy::WorkStealing);
        let (reports, trace) = run_parallel(&tasks, &pool, |&t| {
            if t == 2 {
                Err(Error::Diverged("nan".into()))
            } else if t == 4 {
                panic!("boom")
            } else {
                Ok(t)
            }
        })
        .unwrap();
        assert!(reports[2].outcome.as_ref().unwrap_err().contains("nan"));
        assert!(reports[4].outcome.as_ref().unwrap_err().contains("boom"));
        assert_eq!(reports.iter().filter(|r| r.outcome.is_ok()).count(), 4);
        trace.check_two_sync().unwrap();
    }

    #[test]
    fn stealing_drains_a_skewed_queue() {
        let tasks: Vec<usize> = (0..8).collect();
        let pool = WorkerPool::new(4, Policy::WorkStealing);
        let (_, trace) = run_parallel(&tasks, &pool, |&t| {
            std::thread::sleep(std::time::Duration::from_millis(if t % 4 == 0 { 30 } else { 1 }));
            Ok(())
        })
        .unwrap();
        trace.check_two_sync().unwrap();
        assert_eq!(trace.spans().unwrap().len(), 8);
    }

    #[test]
    fn trace_csv_round_trip() {
        let sim = simulate_execution(Policy::Wfd, &example(), 2, StealTiming::instant()).unwrap();
        let text = sim.trace.to_csv().unwrap();
        assert!(text.starts_with("timestamp_s,worker_id,task_id,kind\n"));
        assert_eq!(Trace::parse_csv(&text).unwrap(), sim.trace);
        assert!(Trace::parse_csv("a,b\n").is_err());
    }

    #[test]
    fn two_sync_violations_detected() {
        let mut t = simulate_execution(Policy::Wfd, &example(), 2, StealTiming::instant())
            .unwrap()
            .trace;
        let gather = t.events.pop().unwrap();
        assert!(t.check_two_sync().is_err());
        t.events.insert(3, gather);
        t.events.push(gather);
        assert!(t.check_two_sync().is_err());
    }
}
