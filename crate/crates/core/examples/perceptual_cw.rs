//! Perceptual Carlini-Wagner on a delta-hardened net: the delta+flow
//! parameterisation against plain delta, under both perceptual metrics.
//!
//! cargo run --release --example perceptual_cw -- [samples]

use std::time::Instant;

use advcompose::attacks::{builtin_attack, perceptual_pair, PerceptualConfig, PerceptualMetric};
use advcompose::classifier::{adversarial_train, Classifier, ConvNet, TrainConfig};
use advcompose::imagecore::synth_dataset;
use rayon::prelude::*;

fn main() -> advcompose::Result<()> {
    let samples: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(12);
    let train_set = synth_dataset(1, 200, 16)?;
    let eval_set = synth_dataset(2, samples.div_ceil(3), 16)?;
    let mut net = ConvNet::new(train_set.shape().expect("non-empty"), 3, 1)?;
    adversarial_train(&mut net, &train_set, &TrainConfig::hardening(builtin_attack("delta").expect("builtin")))?;

    for metric in [PerceptualMetric::LpipsStyle, PerceptualMetric::Ssim] {
        let t = Instant::now();
        let cfg = PerceptualConfig { metric, ..PerceptualConfig::default() };
        let pairs: Vec<_> = (0..eval_set.len())
            .into_par_iter()
            .filter(|&i| net.predict(&eval_set.images[i]).ok() == Some(eval_set.labels[i]))
            .map(|i| perceptual_pair(&net, &eval_set.images[i], eval_set.labels[i], &cfg))
            .collect::<advcompose::Result<_>>()?;
        let both: Vec<_> = pairs.iter().filter(|(a, b)| a.success && b.success).collect();
        let value = |r: &advcompose::attacks::AttackResult| match metric {
            PerceptualMetric::LpipsStyle => r.metrics.lpips_style.unwrap_or(f64::NAN),
            PerceptualMetric::Ssim => 1.0 - r.metrics.ssim.unwrap_or(f64::NAN),
        };
        let n = both.len().max(1) as f64;
        let mean_a = both.iter().map(|(a, _)| value(a)).sum::<f64>() / n;
        let mean_b = both.iter().map(|(_, b)| value(b)).sum::<f64>() / n;
        println!(
            "{metric:?}: {} of {} successful; delta {mean_a:.5}, delta+flow {mean_b:.5} ({:.1?})",
            both.len(),
            pairs.len(),
            t.elapsed()
        );
    }
    Ok(())
}
