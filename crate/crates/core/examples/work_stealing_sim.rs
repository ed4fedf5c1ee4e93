//! Simulated work stealing from a deliberately skewed start, with random
//! steal latency.
//!
//! cargo run --example work_stealing_sim [runs]

use pbkd::runtime::{simulate_work_stealing, StealTiming};
use pbkd::scheduler::weights_from;

fn main() -> pbkd::Result<()> {
    let runs: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let values = [210.0, 205.0, 120.0, 115.0, 70.0, 68.0, 66.0, 40.0, 38.0, 37.0, 20.0, 19.0, 19.0];
    let weights = weights_from(&values);
    let total: f64 = values.iter().sum();
    // Everything starts on worker 0.
    let initial = vec![(0..values.len()).collect(), vec![], vec![], vec![]];
    for seed in 0..runs {
        let sim = simulate_work_stealing(&initial, &weights, StealTiming { max_delay: 5.0, seed })?;
        sim.trace.check_two_sync()?;
        println!(
            "seed {seed}: wall {:.2} s of {total:.0} s serial, {} steals, busy {:?}",
            sim.wall_time,
            sim.steals,
            sim.trace.busy_fractions()?.iter().map(|b| format!("{b:.2}")).collect::<Vec<_>>()
        );
    }
    Ok(())
}
