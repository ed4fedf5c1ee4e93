//! Finite-difference check of every layer, loss, and replacement candidate.
//!
//! cargo run --example gradient_check [points]

use pbkd::replacement::candidate_cases;
use pbkd::tensor::gradcheck::{check_many, layer_cases, Case};

fn main() -> pbkd::Result<()> {
    let points: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let all = |seed: u64| -> pbkd::Result<Vec<Case>> {
        let mut v = layer_cases(seed)?;
        v.extend(candidate_cases(seed)?);
        Ok(v)
    };
    println!("{:<34} {:>6} {:>8} {:>6} {:>12}", "op", "points", "coords", "kinks", "max rel err");
    for c in check_many(all, points, 1, 1e-6, 10)? {
        println!(
            "{:<34} {:>6} {:>8} {:>6} {:>12.3e}",
            c.op, c.points, c.checked, c.skipped_kinks, c.max_rel_error
        );
    }
    Ok(())
}
