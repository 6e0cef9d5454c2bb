use han_core::data::{batch_tensors, synth_corpus, StyleKind, StyleTransform};
use han_core::tensor::profile;
use han_core::training::{TrainConfig, Trainer};
use std::time::Instant;

fn main() {
    let pairs = synth_corpus(16, StyleTransform::named(StyleKind::Thicken), 3);
    let cfg = TrainConfig { batch_size: 8, steps: 10, seed: 1, ..TrainConfig::default() };
    let mut trainer = Trainer::new(cfg, &pairs).unwrap();
    let (src, dst) = batch_tensors(&pairs, &(0..8).collect::<Vec<_>>());
    trainer.train_step(&src, &dst, 0).unwrap();
    profile::set_enabled(true);
    profile::reset();
    let t = Instant::now();
    let n = 3;
    for _ in 0..n {
        trainer.train_step(&src, &dst, 0).unwrap();
    }
    let total = t.elapsed().as_secs_f64();
    println!("total: {:.2} s/step", total / n as f64);
    let mut accounted = 0.0;
    for (label, secs, calls) in profile::report() {
        println!("{label:<22} {:>8.3} s  {calls:>5} calls", secs / n as f64);
        accounted += secs;
    }
    println!("unaccounted: {:.3} s/step", (total - accounted) / n as f64);
}
