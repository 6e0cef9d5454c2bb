use han_core::data::{synth_corpus, StyleKind, StyleTransform};
use han_core::eval::model_rmse;
use han_core::training::{assemble_batch, TrainConfig, Trainer};
use han_core::data::epoch_batches;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2e-4);
    let max_steps: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(500);
    let pairs = synth_corpus(16, StyleTransform::named(StyleKind::Thicken), 42);
    let cfg = TrainConfig {
        batch_size: 8,
        steps: max_steps,
        seed: 7,
        learning_rate: lr,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(cfg.clone(), &pairs).unwrap();
    let started = Instant::now();
    let mut step = 0u64;
    'outer: loop {
        let per_epoch = pairs.len().div_ceil(cfg.batch_size) as u64;
        let epoch = step / per_epoch;
        let batches = epoch_batches(pairs.len(), cfg.batch_size, cfg.seed, epoch);
        for batch in &batches {
            if step >= max_steps {
                break 'outer;
            }
            let (src, dst) = assemble_batch(&pairs, batch, &cfg, epoch);
            let rec = trainer.train_step(&src, &dst, epoch).unwrap();
            step = rec.step;
            if step % 25 == 0 {
                let rmse = model_rmse(&trainer.model, &pairs, 16).unwrap();
                println!(
                    "step {step} t={:.0}s pixel={:.4} rmse={:.2} gen4={:.3} dis4={:.3}",
                    started.elapsed().as_secs_f64(),
                    rec.pixel,
                    rmse,
                    rec.gen[3],
                    rec.dis[3]
                );
                if rmse < 20.0 && rec.pixel < 0.05 {
                    println!("criteria met at step {step} after {:.0}s", started.elapsed().as_secs_f64());
                    break 'outer;
                }
            }
        }
    }
    println!("done at step {step} in {:.0}s", started.elapsed().as_secs_f64());
}
