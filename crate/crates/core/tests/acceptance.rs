//! Acceptance criteria 1 to 9. Each test prints one PASS/FAIL line to
//! stderr (uncaptured) and then asserts. Heavy criteria hold a shared lock
//! so their timings are not distorted by each other.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pbkd::config::{DatasetSource, RunConfig};
use pbkd::data::{derive_seed, Dataset};
use pbkd::distill::weights_io::encode_network;
use pbkd::distill::weights_io::hex_digest;
use pbkd::distill::{train_teacher, DistillTask, TeacherSummary, TrainParams};
use pbkd::metrics::{greenup, speedup_efficiency, Counters};
use pbkd::model::{count_macs_params, layer_cost, ModelSpec, Network};
use pbkd::pipeline::{candidate_table, compare_candidates, distill};
use pbkd::replacement::{build_candidate, candidate_cases, CandidateKind, ReplacedConv};
use pbkd::runtime::{simulate_work_stealing, StealTiming};
use pbkd::scheduler::{self, brute_force_schedule, lpt_bound, makespan, weights_from, wfd_bin_pack, Policy};
use pbkd::tensor::gradcheck::{check_many, layer_cases, Case};
use pbkd::tensor::{LayerKind, LayerParams, Shape};

const GRAD_TOL: f64 = 1e-5;
const GRAD_POINTS: usize = 20;
const GRAD_BUDGET_S: f64 = 60.0;
const TABLE_BUDGET_S: f64 = 1.0;
const SCHED_INSTANCES: usize = 200;
const SCHED_BUDGET_S: f64 = 30.0;
const STEAL_RUNS: usize = 1000;
const STEAL_BUDGET_S: f64 = 30.0;
const TRANSPARENCY_BUDGET_S: f64 = 600.0;
const TOY_BUDGET_S: f64 = 600.0;
const TOY_TEACHER_MIN_ACC: f64 = 0.90;
const TOY_ACC_DROP: f64 = 0.03;
const TOY_MAC_RATIO: f64 = 0.5;
const CANDIDATE_MIN_REDUCTION: f64 = 0.5;

static HEAVY: Mutex<()> = Mutex::new(());

fn heavy() -> MutexGuard<'static, ()> {
    HEAVY.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(n: u32, title: &str, pass: bool, detail: String) {
    let line = format!(
        "criterion {n} {}: {title}: {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "{line}");
}

fn asset(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("assets").join(rel)
}

#[test]
fn criterion_1_gradient_correctness() {
    let _g = heavy();
    let t = Instant::now();
    let all = |seed: u64| -> pbkd::Result<Vec<Case>> {
        let mut v = layer_cases(seed)?;
        v.extend(candidate_cases(seed)?);
        Ok(v)
    };
    let checks = check_many(all, GRAD_POINTS, 1000, 1e-6, 10).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let worst = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let bad: Vec<&str> = checks
        .iter()
        .filter(|c| !(c.max_rel_error < GRAD_TOL && c.checked > 0 && c.points >= GRAD_POINTS))
        .map(|c| c.op.as_str())
        .collect();
    verdict(
        1,
        "gradient correctness",
        bad.is_empty() && secs < GRAD_BUDGET_S,
        format!(
            "{} ops x {GRAD_POINTS} points, worst rel err {worst:.2e} (< {GRAD_TOL:e}), failing {bad:?}, {secs:.1}s",
            checks.len()
        ),
    );
}

/// MACs of a 3x3/1x1 conv by walking every output position and tap.
fn enumerate_conv_macs(cin: usize, cout: usize, k: usize, stride: usize, pad: usize, h: usize, w: usize, depthwise: bool) -> u64 {
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut macs = 0u64;
    for _oy in 0..ho {
        for _ox in 0..wo {
            for _co in 0..cout {
                let inputs = if depthwise { 1 } else { cin };
                for _ci in 0..inputs {
                    for _ky in 0..k {
                        for _kx in 0..k {
                            macs += 1;
                        }
                    }
                }
            }
        }
    }
    macs
}

fn conv_params_of(block: &pbkd::replacement::ReplacementBlock, input: Shape) -> u64 {
    let mut shape = input;
    let mut total = 0;
    for l in &block.layers {
        let (out, _, p) = layer_cost(l, shape).unwrap();
        if l.kind.is_conv() {
            total += p;
        }
        shape = out;
    }
    total
}

#[test]
fn criterion_2_cost_ratios() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (c, hw) = (64usize, 32usize);
    let x = Shape::new(1, c, hw, hw);
    let conv = LayerParams::<f32>::conv(LayerKind::Conv3x3, c, c, 1, 1, &mut rng).unwrap();
    let dw = LayerParams::<f32>::depthwise(c, 1, 1, &mut rng).unwrap();
    let pw = LayerParams::<f32>::pointwise(c, c, &mut rng).unwrap();
    let (_, conv_macs, _) = layer_cost(&conv, x).unwrap();
    let (_, dw_macs, _) = layer_cost(&dw, x).unwrap();
    let (_, pw_macs, _) = layer_cost(&pw, x).unwrap();
    let oracle_ok = conv_macs == enumerate_conv_macs(c, c, 3, 1, 1, hw, hw, false)
        && dw_macs == enumerate_conv_macs(c, c, 3, 1, 1, hw, hw, true)
        && pw_macs == enumerate_conv_macs(c, c, 1, 1, 0, hw, hw, false);
    // 1/9 + 1/64 = 73/576
    let sep_ok = (dw_macs + pw_macs) * 576 == conv_macs * 73;

    let mut param_ok = true;
    let mut shown = Vec::new();
    for ch in [8usize, 16, 32, 64, 128, 256, 512] {
        let teacher_params = (9 * ch * ch) as u64;
        for (kind, units) in [(CandidateKind::TwoLayer, 2u64), (CandidateKind::ThreeLayer, 3)] {
            let b = build_candidate::<f32>(kind, ReplacedConv::new(ch, ch, 1), 0, 1).unwrap();
            let p = conv_params_of(&b, Shape::new(1, ch, 8, 8));
            // p / (9C^2) == units * (1/9 + 1/C)  <=>  p * 9C == 9C^2 * units * (C + 9) / (9C) * 9C
            param_ok &= p * (9 * ch as u64) == teacher_params * units * (ch as u64 + 9);
            if ch == 512 {
                shown.push(format!("{kind}@512 {:.4}", p as f64 / teacher_params as f64));
            }
        }
    }
    verdict(
        2,
        "cost ratios",
        oracle_ok && sep_ok && param_ok,
        format!(
            "separable/standard = {}/{} = {:.5} (73/576 exact: {sep_ok}), enumeration oracle {oracle_ok}, \
             2x and 3x(1/9+1/C) params exact for C in 8..512: {param_ok} ({}; limits 0.2222 / 0.3333)",
            dw_macs + pw_macs,
            conv_macs,
            (dw_macs + pw_macs) as f64 / conv_macs as f64,
            shown.join(", ")
        ),
    );
}

#[test]
fn criterion_3_table_recomputation() {
    let t = Instant::now();
    let f2 = |v: f64| format!("{v:.2}");
    let mut checks: Vec<(String, String, String)> = Vec::new();
    let mut push = |what: &str, got: String, want: &str| checks.push((what.into(), got, want.into()));

    let (s4, e4) = speedup_efficiency(9693.24, 2749.81, 4).unwrap();
    push("speedup 4 GPUs", f2(s4), "3.53");
    push("efficiency 4 GPUs (definitional)", f2(e4), "0.88");
    let (s2, e2) = speedup_efficiency(9693.24, 5060.97, 2).unwrap();
    push("speedup 2 GPUs", f2(s2), "1.92");
    push("efficiency 2 GPUs (definitional)", f2(e2), "0.96");
    let (s_img, e_img) = speedup_efficiency(33605.60, 16821.35, 2).unwrap();
    push("speedup imagenet 2", format!("{s_img:.3}"), "1.998");
    push("speedup imagenet 2 at 2dp", f2(s_img), "2.00");
    push("efficiency imagenet 2", format!("{e_img:.3}"), "0.999");
    push("greenup resnet", f2(greenup(1263.43, 977.39).unwrap()), "1.29");
    push("greenup vgg", f2(greenup(1061.98, 893.44).unwrap()), "1.19");
    let secs = t.elapsed().as_secs_f64();

    let failed: Vec<String> = checks
        .iter()
        .filter(|(_, g, w)| g != w)
        .map(|(n, g, w)| format!("{n}: {g} != {w}"))
        .collect();
    verdict(
        3,
        "table recomputation",
        failed.is_empty() && secs < TABLE_BUDGET_S,
        format!(
            "{} values match (efficiency = speedup / workers), \
             mismatches {failed:?}, {secs:.3}s",
            checks.len() - failed.len()
        ),
    );
}

#[test]
fn criterion_4_scheduling_oracle() {
    let _g = heavy();
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_ratio = 0.0f64;
    let mut violations = 0;
    for _ in 0..SCHED_INSTANCES {
        let n = rng.random_range(1..=12);
        let workers = rng.random_range(1..=4);
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..100.0)).collect();
        let tw = weights_from(&w);
        let m = makespan(&wfd_bin_pack(&tw, workers).unwrap(), &tw).unwrap();
        let best = brute_force_schedule(&w, workers).unwrap();
        worst_ratio = worst_ratio.max(m / best);
        if m > lpt_bound(workers) * best * (1.0 + 1e-12) {
            violations += 1;
        }
    }
    let profile = scheduler::read_profile(&asset("profiles/vgg_like.csv")).unwrap();
    let wfd = scheduler::plan(Policy::Wfd, &profile, 4).unwrap().predicted_makespan.unwrap();
    let rr = scheduler::plan(Policy::RoundRobin, &profile, 4).unwrap().predicted_makespan.unwrap();
    let secs = t.elapsed().as_secs_f64();
    verdict(
        4,
        "scheduling oracle",
        violations == 0 && wfd < rr && secs < SCHED_BUDGET_S,
        format!(
            "{SCHED_INSTANCES} instances, worst wfd/optimal {worst_ratio:.4}, bound violations {violations}; \
             vgg-like profile on 4 workers wfd {wfd:.0} < round robin {rr:.0}; {secs:.1}s"
        ),
    );
}

#[test]
fn criterion_5_work_stealing_safety() {
    let _g = heavy();
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut bad_once, mut bad_wall, mut steals) = (0, 0, 0);
    for run in 0..STEAL_RUNS {
        let n = rng.random_range(1..=16);
        let workers = rng.random_range(1..=4);
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..50.0)).collect();
        let skew = rng.random_bool(0.3);
        let mut initial = vec![Vec::new(); workers];
        for task in 0..n {
            let owner = if skew { 0 } else { rng.random_range(0..workers) };
            initial[owner].push(task);
        }
        let timing = StealTiming {
            max_delay: rng.random_range(0.0..10.0),
            seed: run as u64,
        };
        let sim = simulate_work_stealing(&initial, &weights_from(&w), timing).unwrap();
        steals += sim.steals;
        let ids: BTreeSet<usize> = match sim.trace.spans() {
            Ok(spans) if spans.len() == n => spans.iter().map(|s| s.task_id).collect(),
            _ => BTreeSet::new(),
        };
        if ids.len() != n || sim.trace.check_two_sync().is_err() {
            bad_once += 1;
        }
        if sim.wall_time > w.iter().sum::<f64>() + 1e-9 {
            bad_wall += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(
        5,
        "work-stealing safety",
        bad_once == 0 && bad_wall == 0 && secs < STEAL_BUDGET_S,
        format!(
            "{STEAL_RUNS} randomized runs, {steals} steals, exactly-once violations {bad_once}, \
             wall > serial {bad_wall}; {secs:.2}s"
        ),
    );
}

fn sha256_file(path: &Path) -> String {
    hex_digest(&std::fs::read(path).unwrap())
}

#[test]
fn criterion_6_schedule_transparency() {
    let _g = heavy();
    let t = Instant::now();
    let base = RunConfig {
        dataset: DatasetSource::Synthetic { samples: 400 },
        global_seed: 6,
        epochs_per_block: 2,
        eval_every: 2,
        finetune_epochs: 1,
        threshold: Some(0.0),
        ..RunConfig::default()
    };
    let (train, eval) = base.load_splits().unwrap();
    let spec = ModelSpec::bundled("toy_teacher").unwrap();
    let (teacher, _) = train_teacher(&spec, &train, &eval, &TrainParams::new(3, 0.05, 60)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut student_hashes = BTreeSet::new();
    let mut assembled_hashes = BTreeSet::new();
    let mut replaced = BTreeSet::new();
    let mut runs = 0;
    for workers in [1, 2, 4] {
        for policy in [Policy::RoundRobin, Policy::Wfd, Policy::WorkStealing] {
            let cfg = RunConfig {
                workers,
                policy,
                ..base.clone()
            };
            let run = distill(&teacher, &train, &eval, &cfg, None).unwrap();
            let path = dir.path().join(format!("student-{workers}-{policy}.pbkd"));
            pbkd::distill::save_network(&run.student, &path).unwrap();
            student_hashes.insert(sha256_file(&path));
            assembled_hashes.insert(hex_digest(&encode_network(&run.assembled).unwrap()));
            replaced.insert(run.report.replaced);
            runs += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let hash = student_hashes.iter().next().cloned().unwrap_or_default();
    verdict(
        6,
        "schedule transparency",
        runs == 9
            && student_hashes.len() == 1
            && assembled_hashes.len() == 1
            && replaced == BTreeSet::from([3])
            && secs < TRANSPARENCY_BUDGET_S,
        format!(
            "{runs} runs ({{1,2,4}} workers x rr/wfd/ws), {} student hash(es) {}, {} assembled hash(es), \
             replaced blocks {replaced:?}; {secs:.1}s",
            student_hashes.len(),
            &hash[..hash.len().min(16)],
            assembled_hashes.len()
        ),
    );
}

struct Toy {
    cfg: RunConfig,
    train: Dataset,
    eval: Dataset,
    teacher: Network,
    summary: TeacherSummary,
    seconds: f64,
}

/// The toy teacher shared by criteria 7 and 8, trained once.
fn toy() -> &'static Toy {
    static TOY: OnceLock<Toy> = OnceLock::new();
    TOY.get_or_init(|| {
        let t = Instant::now();
        let cfg = RunConfig {
            dataset: DatasetSource::Synthetic { samples: 2000 },
            workers: 3,
            policy: Policy::WorkStealing,
            ..RunConfig::default()
        };
        let (train, eval) = cfg.load_splits().unwrap();
        let spec = ModelSpec::bundled(&cfg.model).unwrap();
        let params = TrainParams::new(cfg.teacher_epochs, cfg.teacher_lr, derive_seed(cfg.global_seed, 200));
        let (teacher, summary) = train_teacher(&spec, &train, &eval, &params).unwrap();
        Toy {
            cfg,
            train,
            eval,
            teacher,
            summary,
            seconds: t.elapsed().as_secs_f64(),
        }
    })
}

#[test]
fn criterion_7_toy_end_to_end() {
    let _g = heavy();
    let toy = toy();
    let t = Instant::now();
    let cfg = &toy.cfg;
    assert_eq!((cfg.epochs_per_block, cfg.eval_every, cfg.finetune_epochs), (30, 2, 20));
    assert_eq!(cfg.threshold, None);
    let run = distill(&toy.teacher, &toy.train, &toy.eval, cfg, None).unwrap();
    let secs = toy.seconds + t.elapsed().as_secs_f64();
    let r = &run.report;
    let teacher_acc = toy.summary.eval_accuracy;
    let student_acc = r.finetune.eval_accuracy_after;
    let table = count_macs_params(&run.student, run.student.spec.input_shape).unwrap();
    let ratio = table.total_macs as f64 / r.teacher_macs as f64;
    verdict(
        7,
        "toy end-to-end distillation",
        teacher_acc >= TOY_TEACHER_MIN_ACC
            && student_acc >= teacher_acc - TOY_ACC_DROP
            && ratio <= TOY_MAC_RATIO
            && secs < TOY_BUDGET_S,
        format!(
            "teacher eval {teacher_acc:.4} (>= {TOY_TEACHER_MIN_ACC}), threshold {:.4}, {} of {} blocks replaced, \
             student eval {student_acc:.4} (>= teacher - {TOY_ACC_DROP}), MACs {}/{} = {ratio:.4} (<= {TOY_MAC_RATIO}); {secs:.1}s",
            r.threshold,
            r.replaced,
            run.decisions.len(),
            table.total_macs,
            r.teacher_macs
        ),
    );
}

#[test]
fn criterion_8_candidate_harness() {
    let _g = heavy();
    let toy = toy();
    let t = Instant::now();
    let k = 2;
    let task = DistillTask {
        epochs: 10,
        eval_every: 2,
        ..DistillTask::new(k, derive_seed(toy.cfg.global_seed, k as u64))
    };
    let rows = compare_candidates(&toy.teacher, &task, &toy.train, &toy.eval).unwrap();
    let table = candidate_table(&rows);
    let _ = std::io::stderr().write_all(format!("candidate comparison on block {k}:\n{table}").as_bytes());
    let ok = rows.len() == 4 && rows.iter().all(|r| !r.diverged && r.loss_reduction >= CANDIDATE_MIN_REDUCTION);
    let worst = rows.iter().map(|r| r.loss_reduction).fold(f64::INFINITY, f64::min);
    verdict(
        8,
        "candidate harness",
        ok,
        format!(
            "4 candidates on block {k}, none diverged: {}, smallest local-loss reduction {:.1}% (>= 50%); {:.1}s",
            rows.iter().all(|r| !r.diverged),
            100.0 * worst,
            t.elapsed().as_secs_f64()
        ),
    );
}

#[test]
fn criterion_9_metric_formulas() {
    let energy = Counters::read_csv(&asset("traces/energy_counter.csv")).unwrap();
    let power = energy.power(1.0).unwrap();
    let power_ok = power == vec![40.0, 60.0, 30.0, 100.0];
    let ticks = Counters::read_csv(&asset("traces/cpu_ticks.csv")).unwrap();
    let usage = ticks.usage().unwrap();
    let usage_ok = usage == vec![0.5, 0.0, 1.0];
    let ramp = Counters::read_csv(&asset("traces/power_ramp.csv")).unwrap();
    let e = ramp.energy().unwrap();
    // 0 -> 100 W linearly over 10 s: 100 * 10 / 2
    let ramp_ok = e == 100.0 * 10.0 / 2.0;
    verdict(
        9,
        "metric formulas",
        power_ok && usage_ok && ramp_ok,
        format!("power {power:?} W, utilisation {usage:?}, ramp energy {e} J (closed form 500)"),
    );
}
