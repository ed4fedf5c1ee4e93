//! The command implementations behind the `pbkd` binary. Each returns the
//! text it wants printed; files go into the run directory.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::config::RunConfig;
use crate::data::derive_seed;
use crate::distill::weights_io::write_file;
use crate::distill::{accuracy, load_network, save_network, train_teacher, weights_digest, TeacherSummary, TrainParams};
use crate::error::{Error, Result};
use crate::metrics::{Counters, MetricsReport};
use crate::model::{count_macs_params, ModelSpec};
use crate::pipeline::distill;
use crate::runtime::Trace;
use crate::scheduler::{self, Policy};

pub const TEACHER_WEIGHTS: &str = "teacher.pbkd";
pub const STUDENT_WEIGHTS: &str = "student.pbkd";

/// Build the effective config: defaults, then the file, then flag overrides.
pub fn resolve_config(file: Option<&Path>, overrides: &[(&str, String)]) -> Result<RunConfig> {
    let mut cfg = match file {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for (k, v) in overrides {
        cfg.set(k, v).map_err(|e| Error::Config(format!("--{}: {e}", k.replace('_', "-"))))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn prepare_dir(cfg: &RunConfig) -> Result<&Path> {
    let dir = cfg.output_dir.as_path();
    fs::create_dir_all(dir)?;
    write_file(&dir.join("config-resolved.txt"), cfg.to_text().as_bytes())?;
    Ok(dir)
}

#[derive(Serialize)]
struct TeacherRun<'a> {
    #[serde(flatten)]
    summary: &'a TeacherSummary,
    weights_sha256: String,
}

/// Train a teacher; writes `teacher.pbkd` and `teacher_summary.json`.
pub fn train_teacher_cmd(cfg: &RunConfig) -> Result<String> {
    let spec = ModelSpec::load(&cfg.model)?;
    let (train, eval) = cfg.load_splits()?;
    let params = TrainParams {
        batch_size: cfg.batch_size,
        ..TrainParams::new(cfg.teacher_epochs, cfg.teacher_lr, derive_seed(cfg.global_seed, 200))
    };
    let (net, summary) = train_teacher(&spec, &train, &eval, &params)?;
    let dir = prepare_dir(cfg)?;
    save_network(&net, &dir.join(TEACHER_WEIGHTS))?;
    let digest = weights_digest(&net)?;
    write_json(
        &dir.join("teacher_summary.json"),
        &TeacherRun {
            summary: &summary,
            weights_sha256: digest.clone(),
        },
    )?;
    Ok(format!(
        "teacher `{}` trained for {} epochs\ntrain accuracy {:.4}\neval accuracy  {:.4}\nweights {} (sha256 {digest})",
        summary.model,
        summary.epochs,
        summary.train_accuracy,
        summary.eval_accuracy,
        dir.join(TEACHER_WEIGHTS).display()
    ))
}

/// Distill a trained teacher into a student; writes the full run directory.
pub fn distill_cmd(cfg: &RunConfig, teacher_path: &Path) -> Result<String> {
    let spec = ModelSpec::load(&cfg.model)?;
    let teacher = load_network(&spec, teacher_path)?;
    if teacher.identify_replaceable().is_empty() {
        return Err(Error::NothingToDo(format!("model `{}` has no replaceable blocks", spec.name)));
    }
    let profile = cfg.profile.as_deref().map(scheduler::read_profile).transpose()?;
    let (train, eval) = cfg.load_splits()?;
    let run = distill(&teacher, &train, &eval, cfg, profile)?;

    let dir = prepare_dir(cfg)?;
    save_network(&run.student, &dir.join(STUDENT_WEIGHTS))?;
    write_json(&dir.join("replacement_log.json"), &run.decisions)?;
    run.trace.write_csv(&dir.join("trace.csv"))?;
    run.simulated_trace.write_csv(&dir.join("trace-simulated.csv"))?;
    write_json(&dir.join("report.json"), &run.report)?;
    write_file(&dir.join("timeline.csv"), run.report.metrics.timeline_csv()?.as_bytes())?;

    let r = &run.report;
    let mut out = String::new();
    for d in &run.decisions {
        out += &format!(
            "block {:>2} {:<16} best {:>6} threshold {:.4} {}\n",
            d.block_index,
            d.block_name,
            d.best_accuracy.map_or("-".into(), |a| format!("{a:.4}")),
            d.threshold,
            if d.replaced { "replaced" } else { "kept" }
        );
    }
    out += &format!(
        "{} replacements; student/teacher MACs {:.4}\neval accuracy {:.4} -> {:.4} after fine-tuning\n",
        r.replaced, r.mac_ratio, r.finetune.eval_accuracy_before, r.finetune.eval_accuracy_after
    );
    out += &format!("timing {:?}\n{}\n", r.timing_source, r.metrics);
    out += &format!("student weights sha256 {}", r.student_weights_sha256);
    Ok(out)
}

#[derive(Serialize)]
struct PlanOutput<'a> {
    plan: &'a scheduler::SchedulePlan,
    makespan: Option<f64>,
    loads: Vec<f64>,
}

/// Schedule a profile and report the makespan.
pub fn plan_cmd(profile: &Path, workers: usize, policy: Policy, json: bool) -> Result<String> {
    let weights = scheduler::read_profile(profile)?;
    let plan = scheduler::plan(policy, &weights, workers)?;
    let loads = plan.loads(&weights)?;
    if json {
        return Ok(serde_json::to_string_pretty(&PlanOutput {
            plan: &plan,
            makespan: plan.predicted_makespan,
            loads,
        })?);
    }
    let mut out = String::new();
    for (w, l) in loads.iter().enumerate() {
        out += &format!("worker {w} load {l:.2}\n");
    }
    Ok(out + &plan.to_string())
}

/// MAC and parameter table of a model.
pub fn flops_cmd(model: &str, json: bool) -> Result<String> {
    let spec = ModelSpec::load(model)?;
    let net: crate::model::Network = crate::model::Network::from_spec(&spec, 0)?;
    let table = count_macs_params(&net, spec.input_shape)?;
    if json {
        return Ok(serde_json::to_string_pretty(&table)?);
    }
    Ok(table.to_string())
}

/// Metrics from serial and parallel counter traces, optionally with a
/// task trace for per-worker and per-task columns.
pub fn report_cmd(
    serial: &Path,
    parallel: &Path,
    trace: Option<&Path>,
    workers: Option<usize>,
    out_dir: Option<&Path>,
    json: bool,
) -> Result<String> {
    let s = Counters::read_csv(serial)?;
    let p = Counters::read_csv(parallel)?;
    let trace = trace.map(Trace::read_csv).transpose()?;
    let workers = workers
        .or_else(|| trace.as_ref().map(Trace::worker_count))
        .unwrap_or(1);
    let mut report = MetricsReport::from_counters(&s, &p, workers)?;
    if let Some(t) = &trace {
        report = report.with_trace(t)?;
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("report.json"), &report)?;
        write_file(&dir.join("timeline.csv"), report.timeline_csv()?.as_bytes())?;
    }
    if json {
        return Ok(serde_json::to_string_pretty(&report)?);
    }
    Ok(report.to_string())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

/// Top-1 accuracy of a weights file on one split of the configured data.
pub fn eval_cmd(cfg: &RunConfig, weights: &Path, split: Split) -> Result<String> {
    let spec = ModelSpec::load(&cfg.model)?;
    let net = load_network(&spec, weights)?;
    let (train, eval) = cfg.load_splits()?;
    let data = if split == Split::Train { &train } else { &eval };
    let acc = accuracy(&net, data)?;
    Ok(format!(
        "top-1 {acc:.4} on {} {} samples ({} replaced blocks)",
        data.len(),
        if split == Split::Train { "train" } else { "eval" },
        net.replaced_blocks().len()
    ))
}
