//! Round robin against worst-fit-decreasing on a task-weight profile, with
//! the brute-force optimum for reference.
//!
//! cargo run --example schedule_plans [profile.csv] [workers]

use std::path::PathBuf;

use pbkd::scheduler::{self, brute_force_schedule, lpt_bound, Policy};

fn main() -> pbkd::Result<()> {
    let mut args = std::env::args().skip(1);
    let path = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("assets/profiles/vgg_like.csv"));
    let workers: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(4);
    let weights = scheduler::read_profile(&path)?;
    for policy in [Policy::RoundRobin, Policy::Wfd] {
        let plan = scheduler::plan(policy, &weights, workers)?;
        println!("{plan}\n");
    }
    let values: Vec<f64> = weights.iter().map(|w| w.weight).collect();
    if values.len() <= 14 && workers <= 4 {
        let best = brute_force_schedule(&values, workers)?;
        println!("optimum {best:.2}; wfd guarantee {:.2}", best * lpt_bound(workers));
    }
    Ok(())
}
