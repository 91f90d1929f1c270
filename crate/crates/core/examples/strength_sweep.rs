//! Accuracy and perceptual distance of the combined delta+flow attack over
//! a grid of bounds, each point warm-started from its tighter neighbours.
//!
//! cargo run --release --example strength_sweep

use advcompose::attacks::{builtin_attack, strength_sweep};
use advcompose::classifier::{train, ConvNet, TrainConfig};
use advcompose::imagecore::synth_dataset;

fn main() -> advcompose::Result<()> {
    let data = synth_dataset(1, 200, 16)?;
    let eval = synth_dataset(2, 10, 16)?;
    let mut net = ConvNet::new(data.shape().expect("non-empty"), 3, 1)?;
    train(&mut net, &data, &TrainConfig::default())?;

    let deltas: Vec<f64> = [0.0, 2.0, 4.0, 8.0].iter().map(|d| d / 255.0).collect();
    let flows = [0.0, 0.4, 0.8, 1.6];
    let r = strength_sweep(&net, &eval, &builtin_attack("delta+stadv").expect("builtin"), &deltas, &flows)?;

    println!("accuracy (rows: delta*255, columns: flow px)");
    print!("{:>6}", "");
    for f in &flows {
        print!("{f:>8}");
    }
    println!();
    for (i, d) in deltas.iter().enumerate() {
        print!("{:>6.0}", d * 255.0);
        for j in 0..flows.len() {
            print!("{:>8.3}", r.cells[i * flows.len() + j].accuracy);
        }
        println!();
    }
    let last = r.cells.last().expect("non-empty grid");
    println!("loosest point: mean lpips_style {:.4}, mean 1-ssim {:.4}",
        last.mean_lpips_style.unwrap_or(0.0), last.mean_one_minus_ssim.unwrap_or(0.0));
    Ok(())
}
