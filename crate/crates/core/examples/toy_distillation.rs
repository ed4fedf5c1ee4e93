//! Train the toy teacher, distill every replaceable block in parallel,
//! reassemble, fine-tune, and print the report.
//!
//! cargo run --release --example toy_distillation [samples] [workers]

use pbkd::config::{DatasetSource, RunConfig};
use pbkd::data::derive_seed;
use pbkd::distill::{train_teacher, TrainParams};
use pbkd::model::ModelSpec;
use pbkd::pipeline::distill;
use pbkd::scheduler::Policy;

fn main() -> pbkd::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>().ok());
    let samples = args.next().flatten().unwrap_or(1000);
    let workers = args.next().flatten().unwrap_or(3);
    let cfg = RunConfig {
        dataset: DatasetSource::Synthetic { samples },
        workers,
        policy: Policy::WorkStealing,
        epochs_per_block: 10,
        finetune_epochs: 5,
        ..RunConfig::default()
    };
    let (train, eval) = cfg.load_splits()?;
    let spec = ModelSpec::bundled(&cfg.model)?;
    let params = TrainParams::new(cfg.teacher_epochs, cfg.teacher_lr, derive_seed(cfg.global_seed, 200));
    let (teacher, t) = train_teacher(&spec, &train, &eval, &params)?;
    println!("teacher eval accuracy {:.4}", t.eval_accuracy);

    let run = distill(&teacher, &train, &eval, &cfg, None)?;
    for d in &run.decisions {
        println!("{} -> {}", d.block_name, if d.replaced { "replaced" } else { "kept" });
    }
    let r = &run.report;
    println!(
        "student eval accuracy {:.4}, MAC ratio {:.3}\n{}",
        r.finetune.eval_accuracy_after, r.mac_ratio, r.metrics
    );
    Ok(())
}
