//! Trains an undefended, a delta-trained and a flow-trained net on the
//! synthetic shapes and prints their accuracy under each attack.
//!
//! cargo run --release --example defense_matrix -- [eval_per_class]

use std::time::Instant;

use advcompose::attacks::{builtin_attack, defense_matrix};
use advcompose::classifier::{adversarial_train, evaluate, train, ConvNet, TrainConfig};
use advcompose::imagecore::synth_dataset;

fn main() -> advcompose::Result<()> {
    let per_class: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(20);
    let train_set = synth_dataset(1, 200, 16)?;
    let eval_set = synth_dataset(2, per_class, 16)?;
    let shape = train_set.shape().expect("non-empty");

    let mut nets = Vec::new();
    for (name, adv) in [("undefended", None), ("delta-trained", Some("delta")), ("stadv-trained", Some("stadv"))] {
        let t = Instant::now();
        let mut net = ConvNet::new(shape, train_set.num_classes, 1)?;
        match adv {
            None => train(&mut net, &train_set, &TrainConfig::default())?,
            Some(a) => adversarial_train(&mut net, &train_set, &TrainConfig::hardening(builtin_attack(a).expect("builtin")))?,
        };
        let clean = evaluate(&net, &eval_set)?;
        println!("{name}: clean eval accuracy {:.4} ({:.1?})", clean.accuracy, t.elapsed());
        nets.push((name.to_string(), net));
    }

    let attacks: Vec<_> = ["identity", "delta", "stadv", "delta+stadv"]
        .iter()
        .map(|a| builtin_attack(a).expect("builtin"))
        .collect();
    let t = Instant::now();
    let named: Vec<_> = nets.iter().map(|(n, m)| (n.clone(), m)).collect();
    let report = defense_matrix(&named, &eval_set, &attacks)?;
    print!("{}", report.to_csv());
    println!("matrix on {} samples took {:.1?}", eval_set.len(), t.elapsed());
    Ok(())
}
