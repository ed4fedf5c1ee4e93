//! Train the four candidate replacement architectures on one block of a
//! freshly trained toy teacher and print a comparison table.
//!
//! cargo run --release --example candidate_blocks [samples] [epochs]

use pbkd::data::{self, derive_seed};
use pbkd::distill::{train_teacher, DistillTask, TrainParams};
use pbkd::model::ModelSpec;
use pbkd::pipeline::{candidate_table, compare_candidates};

fn main() -> pbkd::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>().ok());
    let samples = args.next().flatten().unwrap_or(1000);
    let epochs = args.next().flatten().unwrap_or(10);
    let (train, eval) = data::synthetic(samples, 1, 4)?.split_stratified(0.1, 2)?;
    let spec = ModelSpec::bundled("toy_teacher")?;
    let (teacher, summary) = train_teacher(&spec, &train, &eval, &TrainParams::new(10, 0.05, 3))?;
    println!("teacher eval accuracy {:.4}\n", summary.eval_accuracy);

    let k = 2;
    let task = DistillTask {
        epochs,
        eval_every: 2.min(epochs),
        ..DistillTask::new(k, derive_seed(42, k as u64))
    };
    let rows = compare_candidates(&teacher, &task, &train, &eval)?;
    print!("{}", candidate_table(&rows));
    Ok(())
}
