use han_core::data::{batch_tensors, synth_corpus, StyleKind, StyleTransform};
use han_core::training::{Trainer, TrainConfig};
use std::time::Instant;

fn main() {
    let pairs = synth_corpus(16, StyleTransform::named(StyleKind::Thicken), 3);
    let cfg = TrainConfig { batch_size: 8, steps: 10, seed: 1, ..TrainConfig::default() };
    let mut trainer = Trainer::new(cfg, &pairs).unwrap();
    let (src, dst) = batch_tensors(&pairs, &(0..8).collect::<Vec<_>>());
    // warmup
    trainer.train_step(&src, &dst, 0).unwrap();
    let t = Instant::now();
    let n = 5;
    for _ in 0..n {
        trainer.train_step(&src, &dst, 0).unwrap();
    }
    println!("batch-8 train_step: {:.2} s/step", t.elapsed().as_secs_f64() / n as f64);

    // eval-mode forward throughput (for RMSE evaluations)
    let t = Instant::now();
    let m = 5;
    for _ in 0..m {
        han_core::training::transfer_infer(&trainer.model, &src).unwrap();
    }
    println!("batch-8 eval forward: {:.3} s/batch", t.elapsed().as_secs_f64() / m as f64);
}
