//! End-to-end distillation run: identify, schedule, train
//! blocks in parallel, reassemble, fine-tune, and measure.

use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{derive_seed, Dataset};
use crate::distill::{
    accuracy, finetune, reassemble, train_block, train_block_from, weights_digest, BlockOutcome, BlockSummary, DistillTask,
    FinetuneSummary, ReplacementDecision, TrainParams,
};
use crate::error::{Error, Result};
use crate::metrics::{energy_integrate, synthetic_power_model, MetricsReport};
use crate::model::{count_macs_params, Network};
use crate::replacement::{build_candidate, CandidateKind};
use crate::runtime::{run_parallel, simulate_static, simulate_work_stealing, StealTiming, Trace, WorkerPool};
use crate::scheduler::{Policy, SchedulePlan, TaskWeight};

/// Seed stream of the fine-tuning shuffle, disjoint from block indices.
const FINETUNE_STREAM: u64 = 1 << 32;

/// Where the parallel time in a report came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimingSource {
    /// Wall clock of the real run; enough cores for every worker.
    WallClock,
    /// Per-task thread CPU time replayed through the scheduler simulation.
    Simulated,
}

/// Everything `distill` writes into report.json.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    pub model: String,
    pub policy: Policy,
    pub workers: usize,
    pub weight_source: String,
    pub teacher_eval_accuracy: f64,
    pub threshold: f64,
    pub replaced: usize,
    pub teacher_macs: u64,
    pub student_macs: u64,
    pub mac_ratio: f64,
    pub finetune: FinetuneSummary,
    pub blocks: Vec<BlockSummary>,
    pub timing_source: TimingSource,
    pub wall_clock_parallel_time: f64,
    pub metrics: MetricsReport,
    pub student_weights_sha256: String,
}

/// Result of [`distill`].
#[derive(Clone, Debug)]
pub struct DistillRun {
    /// Reassembled student before fine-tuning.
    pub assembled: Network,
    /// Fine-tuned student.
    pub student: Network,
    pub decisions: Vec<ReplacementDecision>,
    /// Trace of the real parallel run.
    pub trace: Trace,
    /// Trace replayed in simulated time.
    pub simulated_trace: Trace,
    pub report: DistillReport,
}

/// One task per replaceable block, seeded from the global seed and the
/// block index only, so results do not depend on placement.
pub fn make_tasks(teacher: &Network, cfg: &RunConfig) -> Result<Vec<DistillTask>> {
    let blocks = teacher.identify_replaceable();
    if blocks.is_empty() {
        return Err(Error::NothingToDo(format!("model `{}` has no replaceable blocks", teacher.name())));
    }
    blocks
        .into_iter()
        .map(|k| {
            let t = DistillTask {
                epochs: cfg.epochs_per_block,
                eval_every: cfg.eval_every,
                threshold: cfg.threshold.unwrap_or(0.0),
                loss_mode: cfg.loss_mode,
                lambda_local: cfg.lambda_local,
                candidate: cfg.candidate,
                batch_size: cfg.batch_size,
                lr: cfg.block_lr,
                max_steps: cfg.max_steps,
                ..DistillTask::new(k, derive_seed(cfg.global_seed, k as u64))
            };
            t.validate()?;
            Ok(t)
        })
        .collect()
}

/// Task weights for scheduling: the profile if one is given, else each
/// block's MAC count as a proxy.
pub fn task_weights(
    teacher: &Network,
    tasks: &[DistillTask],
    profile: Option<Vec<TaskWeight>>,
) -> Result<(Vec<TaskWeight>, String)> {
    if let Some(p) = profile {
        let mut ids: Vec<usize> = p.iter().map(|w| w.task_id).collect();
        ids.sort_unstable();
        if ids != (0..tasks.len()).collect::<Vec<_>>() {
            return Err(Error::invalid(format!(
                "profile must list tasks 0..{} exactly once; model `{}` has {} replaceable blocks",
                tasks.len(),
                teacher.name(),
                tasks.len()
            )));
        }
        return Ok((p, "profile".into()));
    }
    let table = count_macs_params(teacher, teacher.spec.input_shape)?;
    let weights = tasks
        .iter()
        .enumerate()
        .map(|(i, t)| TaskWeight::new(i, table.block_macs(t.block_index) as f64))
        .collect();
    Ok((weights, "mac_count".into()))
}

/// CPU seconds consumed by the calling thread.
fn thread_cpu_time() -> f64 {
    let mut ts = libc::timespec { tv_sec: 0, tv_nsec: 0 };
    // SAFETY: `ts` is a valid, writable timespec.
    let rc = unsafe { libc::clock_gettime(libc::CLOCK_THREAD_CPUTIME_ID, &mut ts) };
    if rc != 0 {
        return 0.0;
    }
    ts.tv_sec as f64 + ts.tv_nsec as f64 * 1e-9
}

/// Replay measured durations through the plan the real run used.
fn replay(plan: &SchedulePlan, measured: &[TaskWeight], seed: u64) -> Result<(f64, Trace)> {
    let sim = match plan.policy {
        Policy::WorkStealing => simulate_work_stealing(&plan.assignments, measured, StealTiming { max_delay: 0.0, seed })?,
        _ => simulate_static(plan, measured)?,
    };
    Ok((sim.wall_time, sim.trace))
}

/// Run the whole distillation. `profile` gives WFD its task weights;
/// without one WFD falls back to MAC counts.
pub fn distill(
    teacher: &Network,
    train: &Dataset,
    eval: &Dataset,
    cfg: &RunConfig,
    profile: Option<Vec<TaskWeight>>,
) -> Result<DistillRun> {
    cfg.validate()?;
    let tasks = make_tasks(teacher, cfg)?;
    if cfg.policy == Policy::Wfd && profile.is_none() {
        info!("wfd without a runtime profile: using per-block MAC counts as task weights");
    }
    let (weights, weight_source) = task_weights(teacher, &tasks, profile)?;
    let pool = WorkerPool::new(cfg.workers, cfg.policy).with_weights(weights);
    let plan = pool.plan(tasks.len())?;

    let started = Instant::now();
    let (reports, trace) = run_parallel(&tasks, &pool, |t| {
        let cpu = thread_cpu_time();
        let r = train_block(teacher, t, train, eval)?;
        Ok((r, thread_cpu_time() - cpu))
    })?;
    let wall_clock = started.elapsed().as_secs_f64();

    let mut outcomes = Vec::with_capacity(reports.len());
    let mut measured = Vec::with_capacity(reports.len());
    for r in reports {
        let k = tasks[r.task_id].block_index;
        outcomes.push(match r.outcome {
            Ok((res, cpu)) => {
                measured.push(TaskWeight::new(r.task_id, cpu));
                BlockOutcome::Trained(res)
            }
            Err(reason) => {
                measured.push(TaskWeight::new(r.task_id, (r.end - r.start).max(0.0)));
                warn!("block {k} failed: {reason}");
                BlockOutcome::Failed { block_index: k, reason }
            }
        });
    }

    let teacher_acc = accuracy(teacher, eval)?;
    let threshold = cfg.threshold.unwrap_or((teacher_acc - 0.02).max(0.0));
    let (assembled, decisions) = reassemble(teacher, &outcomes, threshold)?;
    let replaced = decisions.iter().filter(|d| d.replaced).count();
    info!("{replaced} of {} blocks replaced", decisions.len());

    let ft_params = TrainParams {
        batch_size: cfg.batch_size,
        ..TrainParams::new(cfg.finetune_epochs, cfg.finetune_lr, derive_seed(cfg.global_seed, FINETUNE_STREAM))
    };
    let (student, ft) = finetune(&assembled, train, eval, &ft_params, cfg.freeze_non_replaced)?;

    let serial_time: f64 = measured.iter().map(|w| w.weight).sum();
    let (simulated_time, simulated_trace) = replay(&plan, &measured, cfg.global_seed)?;
    let cores = std::thread::available_parallelism().map_or(1, usize::from);
    let (timing_source, parallel_time, parallel_trace) = if cores >= cfg.workers {
        (TimingSource::WallClock, trace.end_time(), &trace)
    } else {
        (TimingSource::Simulated, simulated_time, &simulated_trace)
    };
    let serial_plan = crate::scheduler::plan(Policy::RoundRobin, &measured, 1)?;
    let serial_trace = simulate_static(&serial_plan, &measured)?.trace;
    let energy = |t: &Trace| energy_integrate(&synthetic_power_model(t, cfg.idle_watts, cfg.active_watts)?);
    let metrics = MetricsReport::new(
        cfg.workers,
        serial_time,
        parallel_time,
        energy(&serial_trace)?,
        energy(parallel_trace)?,
    )?
    .with_trace(parallel_trace)?;

    let teacher_macs = count_macs_params(teacher, teacher.spec.input_shape)?.total_macs;
    let student_macs = count_macs_params(&student, student.spec.input_shape)?.total_macs;
    let blocks = outcomes
        .iter()
        .filter_map(|o| match o {
            BlockOutcome::Trained(r) => Some(r.summary()),
            BlockOutcome::Failed { .. } => None,
        })
        .collect();
    let report = DistillReport {
        model: teacher.name().to_string(),
        policy: cfg.policy,
        workers: cfg.workers,
        weight_source,
        teacher_eval_accuracy: teacher_acc,
        threshold,
        replaced,
        teacher_macs,
        student_macs,
        mac_ratio: student_macs as f64 / teacher_macs as f64,
        finetune: ft,
        blocks,
        timing_source,
        wall_clock_parallel_time: wall_clock,
        metrics,
        student_weights_sha256: weights_digest(&student)?,
    };
    Ok(DistillRun {
        assembled,
        student,
        decisions,
        trace,
        simulated_trace,
        report,
    })
}

/// One row of the candidate comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateRow {
    pub candidate: CandidateKind,
    pub params: u64,
    pub macs: u64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub loss_reduction: f64,
    pub best_accuracy: f64,
    pub diverged: bool,
    pub wall_time: f64,
}

/// Train every candidate architecture on block `k` from the same task
/// settings and tabulate cost and quality. A candidate whose training
/// diverges is reported as such rather than aborting the comparison.
pub fn compare_candidates(
    teacher: &Network,
    base: &DistillTask,
    train: &Dataset,
    eval: &Dataset,
) -> Result<Vec<CandidateRow>> {
    let k = base.block_index;
    let teacher_table = count_macs_params(teacher, teacher.spec.input_shape)?;
    let mut rows = Vec::with_capacity(CandidateKind::ALL.len());
    for kind in CandidateKind::ALL {
        let task = DistillTask {
            candidate: kind,
            ..base.clone()
        };
        let init = build_candidate(kind, teacher.replaced_conv(k)?, k, derive_seed(task.seed, 0))?;
        let cost = count_macs_params(&teacher.with_replacement(k, init.clone())?, teacher.spec.input_shape)?;
        let block_rows = cost.rows.iter().filter(|r| r.block == Some(k));
        let (macs, params) = block_rows.fold((0, 0), |(m, p), r| (m + r.macs, p + r.params));
        let row = match train_block_from(teacher, &task, init, train, eval) {
            Ok(r) => {
                let initial = r.loss_history[0];
                CandidateRow {
                    candidate: kind,
                    params,
                    macs,
                    initial_loss: initial,
                    final_loss: r.final_local_loss,
                    loss_reduction: 1.0 - r.final_local_loss / initial,
                    best_accuracy: r.best_accuracy,
                    diverged: false,
                    wall_time: r.wall_time,
                }
            }
            Err(Error::Diverged(msg)) => {
                warn!("{kind} diverged: {msg}");
                CandidateRow {
                    candidate: kind,
                    params,
                    macs,
                    initial_loss: f64::NAN,
                    final_loss: f64::NAN,
                    loss_reduction: f64::NAN,
                    best_accuracy: 0.0,
                    diverged: true,
                    wall_time: 0.0,
                }
            }
            Err(e) => return Err(e),
        };
        rows.push(row);
    }
    info!("teacher block {k} costs {} MACs", teacher_table.block_macs(k));
    Ok(rows)
}

/// Aligned text table of a candidate comparison.
pub fn candidate_table(rows: &[CandidateRow]) -> String {
    let mut out = format!(
        "{:<18} {:>8} {:>10} {:>10} {:>10} {:>9} {:>9} {:>8}\n",
        "candidate", "params", "MACs", "loss@0", "loss@end", "reduced", "top-1", "time s"
    );
    for r in rows {
        out += &format!(
            "{:<18} {:>8} {:>10} {:>10.4} {:>10.4} {:>8.1}% {:>9.4} {:>8.2}{}\n",
            r.candidate.as_str(),
            r.params,
            r.macs,
            r.initial_loss,
            r.final_loss,
            100.0 * r.loss_reduction,
            r.best_accuracy,
            r.wall_time,
            if r.diverged { "  diverged" } else { "" }
        );
    }
    out
}
