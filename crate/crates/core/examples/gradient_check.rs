//! Central-difference check of every op and every stage objective.
//!
//! cargo run --release --example gradient_check -- [N_SEEDS]

use dvllama::gradsuite::{run_suite, STEP, TOLERANCE};

fn main() -> dvllama::Result<()> {
    let n: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let start = std::time::Instant::now();
    let results = run_suite(0..n)?;
    println!("h = {STEP:e}, tolerance {TOLERANCE:e}, {n} seeds");
    for r in &results {
        println!(
            "{:<30} {:.2e} {}",
            r.name,
            r.max_rel_err,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    println!("{} checks in {:.1?}", results.len(), start.elapsed());
    Ok(())
}
