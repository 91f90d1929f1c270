//! Central-difference check of every analytic gradient, plus the negative
//! control with one gradient deliberately scaled.
//!
//! cargo run --release --example gradient_check -- [points]

use advcompose::gradcheck::run_gradcheck;

fn main() -> advcompose::Result<()> {
    let points = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(20);
    let report = run_gradcheck(1, points, None)?;
    for op in &report.ops {
        println!("{:<16} {:.2e} (tolerance {:.0e})", op.op, op.max_rel_error, op.tolerance);
    }
    println!("all within tolerance: {}", report.passed);

    let corrupted = run_gradcheck(1, points, Some("sequential"))?;
    println!("with a corrupted sequential gradient, failing: {:?}", corrupted.failing());
    Ok(())
}
