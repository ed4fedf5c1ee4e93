//! Speedup, efficiency and greenup from the bundled counter traces, plus
//! per-interval power and utilisation.
//!
//! cargo run --example energy_metrics

use std::path::PathBuf;

use pbkd::metrics::{Counters, MetricsReport};

fn main() -> pbkd::Result<()> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("assets/traces");
    let serial = Counters::read_csv(&dir.join("serial_counters.csv"))?;
    let parallel = Counters::read_csv(&dir.join("parallel_counters.csv"))?;
    println!("{}\n", MetricsReport::from_counters(&serial, &parallel, 4)?);

    let energy = Counters::read_csv(&dir.join("energy_counter.csv"))?;
    println!("power at 1 Hz: {:?} W", energy.power(1.0)?);
    let ticks = Counters::read_csv(&dir.join("cpu_ticks.csv"))?;
    println!("utilisation: {:?}", ticks.usage()?);
    let ramp = Counters::read_csv(&dir.join("power_ramp.csv"))?;
    println!("ramp energy: {} J", ramp.energy()?);
    Ok(())
}
