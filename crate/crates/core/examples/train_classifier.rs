//! Trains the small conv net on the synthetic shapes, reports held-out
//! accuracy and round-trips the checkpoint.
//!
//! cargo run --release --example train_classifier -- [out.ckpt]

use advcompose::classifier::{evaluate, load_checkpoint, save_checkpoint, train, ConvNet, TrainConfig};
use advcompose::imagecore::synth_dataset;

fn main() -> advcompose::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| std::env::temp_dir().join("synth.ckpt").display().to_string());
    let train_set = synth_dataset(1, 200, 16)?;
    let held_out = synth_dataset(2, 100, 16)?;
    let mut net = ConvNet::new(train_set.shape().expect("non-empty"), train_set.num_classes, 1)?;
    println!("{} parameters", net.num_params());

    let report = train(&mut net, &train_set, &TrainConfig::default())?;
    for e in report.epochs.iter().step_by(5) {
        println!("epoch {:>2}  loss {:.4}  train acc {:.3}", e.epoch, e.mean_loss, e.train_accuracy);
    }
    println!("held-out accuracy {:.3}", evaluate(&net, &held_out)?.accuracy);

    save_checkpoint(&net, &out)?;
    assert_eq!(load_checkpoint(&out)?, net);
    println!("saved {out}");
    Ok(())
}
