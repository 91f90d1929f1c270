//! Low/high local-contrast fractions across the synthetic set at several
//! flow strengths.
//!
//! cargo run --release --example contrast_scan

use advcompose::imagecore::synth_dataset;
use advcompose::theory::contrast_scan;

fn main() -> advcompose::Result<()> {
    let data = synth_dataset(1, 128, 16)?;
    let delta = 8.0 / 255.0;
    for eps in [0.05, 0.25, 1.0] {
        let scan = contrast_scan(&data, delta, eps, 64, 1)?;
        let n = scan.rows.len() as f64;
        let low = scan.rows.iter().map(|r| r.low_fraction).sum::<f64>() / n;
        let high = scan.rows.iter().map(|r| r.high_fraction).sum::<f64>() / n;
        println!(
            "eps {eps:<5} mean low {low:.3}  mean high {high:.3}  every image has both: {}  violations: {}",
            scan.all_have_both, scan.disjointness_violations
        );
    }
    Ok(())
}
