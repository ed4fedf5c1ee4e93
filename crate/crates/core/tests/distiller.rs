use std::sync::OnceLock;

use pbkd::config::{DatasetSource, RunConfig};
use pbkd::data::{derive_seed, Dataset};
use pbkd::distill::{
    accuracy, block_loss, evaluate_with_student_block, finetune, reassemble, remainder_cross_entropy, train_block,
    train_teacher, weights_digest, BlockOutcome, DistillTask, LossMode, TrainParams, TrainedBlockResult,
};
use pbkd::model::{parse_model_spec, ModelSpec, Network};
use pbkd::pipeline::{distill, make_tasks};
use pbkd::replacement::{build_candidate, CandidateKind, ReplacementBlock};
use pbkd::tensor::{ops, Shape, Tensor};
use pbkd::Error;

struct Fixture {
    train: Dataset,
    eval: Dataset,
    teacher: Network,
    teacher_eval: f64,
}

fn small_cfg() -> RunConfig {
    RunConfig {
        dataset: DatasetSource::Synthetic { samples: 400 },
        global_seed: 11,
        batch_size: 16,
        ..RunConfig::default()
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let (train, eval) = small_cfg().load_splits().unwrap();
        let spec = ModelSpec::bundled("toy_teacher").unwrap();
        let params = TrainParams {
            batch_size: 16,
            ..TrainParams::new(4, 0.05, 3)
        };
        let (teacher, summary) = train_teacher(&spec, &train, &eval, &params).unwrap();
        Fixture {
            train,
            eval,
            teacher,
            teacher_eval: summary.eval_accuracy,
        }
    })
}

fn task(k: usize, seed: u64, epochs: usize) -> DistillTask {
    DistillTask {
        epochs,
        eval_every: 2,
        batch_size: 16,
        ..DistillTask::new(k, seed)
    }
}

fn zero_weights(block: &mut ReplacementBlock, beta: f32) {
    for (name, t) in block.named_weights_mut("b") {
        if name.ends_with(".weight") {
            t.data_mut().fill(0.0);
        } else if name.ends_with(".beta") {
            t.data_mut().fill(beta);
        }
    }
}

/// One 1-channel conv block whose teacher output is the constant `relu(beta)`.
fn constant_teacher(beta: f32) -> (Network, Dataset) {
    let spec = parse_model_spec(
        r#"{"name": "one_channel", "input_shape": [1, 6, 6],
            "blocks": [{"name": "c", "kind": "conv3x3", "out_channels": 1}],
            "classifier": [{"kind": "global_avg_pool"}, {"kind": "dense", "out_channels": 2}]}"#,
    )
    .unwrap();
    let mut net: Network = Network::from_spec(&spec, 5).unwrap();
    for (name, t) in net.named_weights_mut() {
        if name == "c.l0.weight" {
            t.data_mut().fill(0.0);
        } else if name.ends_with(".beta") {
            t.data_mut().fill(beta);
        }
    }
    let n = 20;
    let images: Vec<f32> = (0..n * 36).map(|i| ((i * 37) % 11) as f32 / 11.0).collect();
    let data = Dataset::new(
        Tensor::from_vec(Shape::new(n, 1, 6, 6), images).unwrap(),
        (0..n).map(|i| i % 2).collect(),
        2,
    )
    .unwrap();
    (net, data)
}

#[test]
fn functional_copy_has_zero_loss_and_does_not_move() {
    let (teacher, data) = constant_teacher(0.3);
    let mut init = build_candidate(CandidateKind::TwoLayer, teacher.replaced_conv(0).unwrap(), 0, 1).unwrap();
    zero_weights(&mut init, 0.3);
    init_matches_teacher(&teacher, &init, &data);
    let t = task(0, 1, 4);
    let r = pbkd::distill::train_block_from(&teacher, &t, init.clone(), &data, &data).unwrap();
    assert!(r.loss_history.iter().all(|&l| l == 0.0), "{:?}", r.loss_history);
    let before: Vec<Vec<f32>> = init.named_weights("b").iter().map(|(_, t)| t.data().to_vec()).collect();
    let after: Vec<Vec<f32>> = r.block.named_weights("b").iter().map(|(_, t)| t.data().to_vec()).collect();
    for (name, (a, b)) in init.named_weights("b").iter().map(|(n, _)| n).zip(before.iter().zip(&after)) {
        if !name.contains("moving") {
            assert_eq!(a, b, "{name}");
        }
    }
    assert_eq!(
        evaluate_with_student_block(&teacher, 0, &r.block, &data).unwrap(),
        accuracy(&teacher, &data).unwrap()
    );
}

fn init_matches_teacher(teacher: &Network, init: &ReplacementBlock, data: &Dataset) {
    let (x, _) = data.batch(&[0, 1, 2]);
    let want = teacher.blocks[0].infer(&x).unwrap();
    let got = init.infer(&x).unwrap();
    assert!(want.data().iter().all(|&v| v == 0.3));
    assert_eq!(want.data(), got.data());
}

#[test]
fn constant_output_block_scores_one_class_share() {
    let f = fixture();
    let k = 2;
    let mut block = build_candidate(CandidateKind::TwoLayer, f.teacher.replaced_conv(k).unwrap(), k, 4).unwrap();
    zero_weights(&mut block, 0.7);
    let acc = evaluate_with_student_block(&f.teacher, k, &block, &f.eval).unwrap();
    // every sample gets the same prediction: the score is that class's share
    let student = f.teacher.with_replacement(k, block).unwrap();
    let (x, _) = f.eval.batch(&[0]);
    let pred = ops::argmax_rows(&student.logits(&x).unwrap())[0];
    let share = f.eval.class_counts()[pred] as f64 / f.eval.len() as f64;
    assert_eq!(acc, share);
    assert!((acc - 0.10).abs() <= 0.05, "{acc}");
    assert!(acc <= f.teacher_eval);
}

#[test]
fn combined_loss_degenerates_to_its_terms() {
    let f = fixture();
    let k = 1;
    let block = build_candidate(CandidateKind::TwoLayer, f.teacher.replaced_conv(k).unwrap(), k, 8).unwrap();
    let (x, labels) = f.train.batch(&(0..16).collect::<Vec<_>>());
    let prev = f.teacher.forward_blocks(&x, 0..k).unwrap();
    let target = f.teacher.blocks[k].infer(&prev).unwrap();
    let out = block.infer(&prev).unwrap();

    let (cls, g_cls) = remainder_cross_entropy(&f.teacher, k, &out, &labels).unwrap();
    let (terms, g) = block_loss(&f.teacher, k, &out, &target, &labels, LossMode::Combined, 0.0).unwrap();
    assert_eq!(terms.total, cls);
    assert_eq!(g.data(), g_cls.data());

    let (local, g_local) = block_loss(&f.teacher, k, &out, &target, &labels, LossMode::LocalOnly, 0.0).unwrap();
    assert_eq!(local.cls, 0.0);
    let lambda = 2.5;
    let (terms, g) = block_loss(&f.teacher, k, &out, &target, &labels, LossMode::Combined, lambda).unwrap();
    assert_eq!(terms.total, lambda * local.total + cls);
    for ((a, b), c) in g.data().iter().zip(g_cls.data()).zip(g_local.data()) {
        assert_eq!(*a, b + lambda as f32 * c);
    }
}

#[test]
fn training_leaves_the_teacher_untouched_and_is_reproducible() {
    let f = fixture();
    let before = weights_digest(&f.teacher).unwrap();
    let t = task(1, 77, 2);
    let a = train_block(&f.teacher, &t, &f.train, &f.eval).unwrap();
    assert_eq!(weights_digest(&f.teacher).unwrap(), before);
    let b = train_block(&f.teacher, &t, &f.train, &f.eval).unwrap();
    assert_eq!(a.summary().loss_history, b.summary().loss_history);
    assert_eq!(a.block, b.block);
    assert!(a.final_local_loss >= 0.0);
    assert!(a.eval_history.iter().all(|(e, _)| e % t.eval_every == 0) && !a.eval_history.is_empty());
}

#[test]
fn a_block_trains_the_same_alone_or_alongside_others() {
    let f = fixture();
    let cfg = RunConfig {
        epochs_per_block: 2,
        eval_every: 2,
        finetune_epochs: 0,
        workers: 3,
        policy: pbkd::scheduler::Policy::WorkStealing,
        ..small_cfg()
    };
    let run = distill(&f.teacher, &f.train, &f.eval, &cfg, None).unwrap();
    for t in make_tasks(&f.teacher, &cfg).unwrap() {
        let alone = train_block(&f.teacher, &t, &f.train, &f.eval).unwrap().summary();
        let together = run.report.blocks.iter().find(|b| b.block_index == t.block_index).unwrap();
        assert_eq!(alone.loss_history, together.loss_history);
        assert_eq!(alone.eval_history, together.eval_history);
    }
}

#[test]
fn thirty_epochs_end_below_the_starting_loss() {
    let f = fixture();
    for k in f.teacher.identify_replaceable() {
        let t = task(k, derive_seed(11, k as u64), 30);
        let r = train_block(&f.teacher, &t, &f.train, &f.eval).unwrap();
        assert!(r.final_local_loss < r.loss_history[0], "block {k}: {:?}", r.loss_history);
    }
}

#[test]
fn local_loss_is_mostly_non_increasing() {
    let f = fixture();
    let runs = 10;
    let mut monotone = 0;
    for s in 0..runs {
        let k = s as usize % 3;
        let r = train_block(&f.teacher, &task(k, 1000 + s, 6), &f.train, &f.eval).unwrap();
        if r.loss_history.windows(2).all(|w| w[1] <= w[0]) {
            monotone += 1;
        }
    }
    assert!(monotone * 10 >= runs * 9, "{monotone}/{runs} monotone");
}

fn fake_result(f: &Fixture, k: usize, best: f64) -> BlockOutcome {
    let block = build_candidate(CandidateKind::TwoLayer, f.teacher.replaced_conv(k).unwrap(), k, 9).unwrap();
    BlockOutcome::Trained(TrainedBlockResult {
        block_index: k,
        block,
        eval_history: vec![(2, best)],
        loss_history: vec![1.0, 0.5, 0.25],
        final_local_loss: 0.25,
        best_accuracy: best,
        best_epoch: 2,
        steps: 10,
        wall_time: 0.0,
    })
}

#[test]
fn reassembly_replaces_only_strictly_better_blocks() {
    let f = fixture();
    let teacher_bytes = pbkd::distill::weights_io::encode_network(&f.teacher).unwrap();

    let none: Vec<BlockOutcome> = (0..3).map(|k| fake_result(f, k, 0.5)).collect();
    let (s, log) = reassemble(&f.teacher, &none, 0.9).unwrap();
    assert_eq!(pbkd::distill::weights_io::encode_network(&s).unwrap(), teacher_bytes);
    assert!(log.iter().all(|d| !d.replaced));

    let (s, _) = reassemble(&f.teacher, &none, 0.4).unwrap();
    assert_eq!(s.replaced_blocks(), vec![0, 1, 2]);

    // equal to the threshold is not enough
    let mixed = vec![fake_result(f, 0, 0.75), fake_result(f, 1, 0.75 + 1e-9), fake_result(f, 2, 0.75)];
    let (s, log) = reassemble(&f.teacher, &mixed, 0.75).unwrap();
    assert_eq!(s.replaced_blocks(), vec![1]);
    assert_eq!(log.iter().map(|d| d.replaced).collect::<Vec<_>>(), vec![false, true, false]);

    let failed = vec![
        fake_result(f, 0, 0.99),
        BlockOutcome::Failed {
            block_index: 1,
            reason: "loss became NaN".into(),
        },
    ];
    let (s, log) = reassemble(&f.teacher, &failed, 0.5).unwrap();
    assert_eq!(s.replaced_blocks(), vec![0]);
    assert!(log[1].note.contains("NaN") && !log[1].replaced);

    let dup = vec![fake_result(f, 0, 0.9), fake_result(f, 0, 0.9)];
    assert!(reassemble(&f.teacher, &dup, 0.5).is_err());
}

#[test]
fn finetuning_edge_cases() {
    let f = fixture();
    let bytes = |n: &Network| pbkd::distill::weights_io::encode_network(n).unwrap();
    let params = TrainParams {
        batch_size: 16,
        ..TrainParams::new(0, 0.005, 5)
    };
    let (same, s) = finetune(&f.teacher, &f.train, &f.eval, &params, false).unwrap();
    assert_eq!(bytes(&same), bytes(&f.teacher));
    assert!(s.loss_history.is_empty());

    let params = TrainParams { epochs: 3, ..params };
    let (same, _) = finetune(&f.teacher, &f.train, &f.eval, &params, true).unwrap();
    assert_eq!(bytes(&same), bytes(&f.teacher));

    let r = train_block(&f.teacher, &task(2, 5, 4), &f.train, &f.eval).unwrap();
    let student = f.teacher.with_replacement(2, r.block).unwrap();
    let (tuned, s) = finetune(&student, &f.train, &f.eval, &params, true).unwrap();
    assert!(s.train_accuracy_after >= s.train_accuracy_before, "{s:?}");
    for (k, (a, b)) in student.blocks.iter().zip(&tuned.blocks).enumerate() {
        if k != 2 {
            assert_eq!(a, b, "frozen block {k} moved");
        }
    }
    assert_eq!(student.classifier, tuned.classifier);
}

#[test]
fn bad_inputs_are_rejected() {
    let f = fixture();
    let empty = f.train.subset(&[]);
    assert!(matches!(train_block(&f.teacher, &task(0, 1, 2), &empty, &f.eval), Err(Error::Dataset(_))));
    let block = build_candidate(CandidateKind::TwoLayer, f.teacher.replaced_conv(0).unwrap(), 0, 1).unwrap();
    assert!(evaluate_with_student_block(&f.teacher, 0, &block, &empty).is_err());
    let mut poisoned = build_candidate(CandidateKind::TwoLayer, f.teacher.replaced_conv(1).unwrap(), 1, 1).unwrap();
    poisoned.named_weights_mut("b")[0].1.data_mut()[0] = f32::NAN;
    let r = pbkd::distill::train_block_from(&f.teacher, &task(1, 1, 2), poisoned, &f.train, &f.eval);
    assert!(matches!(r, Err(Error::Diverged(_))), "{r:?}");
    let bad = DistillTask { eval_every: 3, ..task(1, 1, 2) };
    assert!(train_block(&f.teacher, &bad, &f.train, &f.eval).is_err());
}
