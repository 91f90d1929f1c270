//! Runs each builtin attack on one image and writes the perturbed and
//! magnified-difference images.
//!
//! cargo run --release --example single_attack -- [out_dir]

use std::path::PathBuf;

use advcompose::attacks::{builtin_attack, run_attack, BUILTIN_ATTACKS};
use advcompose::classifier::{train, ConvNet, TrainConfig};
use advcompose::imagecore::{diff_image, save_ppm, synth_dataset};

fn main() -> advcompose::Result<()> {
    let dir = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("attacks"));
    std::fs::create_dir_all(&dir).expect("output directory");
    let data = synth_dataset(1, 100, 16)?;
    let mut net = ConvNet::new(data.shape().expect("non-empty"), 3, 1)?;
    train(&mut net, &data, &TrainConfig::default())?;

    let probe = synth_dataset(9, 1, 16)?;
    let (x, label) = (&probe.images[0], probe.labels[0]);
    save_ppm(x, dir.join("original.ppm"))?;
    for name in BUILTIN_ATTACKS {
        let cfg = builtin_attack(name).expect("builtin");
        let r = run_attack(&net, x, label, &cfg)?;
        println!(
            "{name:<12} success {:<5} predicted {} iterations {:>3} linf {:.4} l2 {:.4}",
            r.success, r.predicted, r.iterations, r.metrics.linf, r.metrics.l2
        );
        let stem = name.replace('+', "_");
        save_ppm(&r.perturbed, dir.join(format!("{stem}.ppm")))?;
        save_ppm(&diff_image(x, &r.perturbed, 5.0)?, dir.join(format!("{stem}.diff.ppm")))?;
    }
    println!("images in {}", dir.display());
    Ok(())
}
