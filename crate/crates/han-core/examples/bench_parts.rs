use han_core::data::{batch_tensors, synth_corpus, StyleKind, StyleTransform};
use han_core::model::HanModel;
use han_core::tensor::{concat_batch, BatchNormMode, Tensor};
use std::time::Instant;

fn time<T>(name: &str, f: impl FnOnce() -> T) -> T {
    let t = Instant::now();
    let r = f();
    println!("{name}: {:.3} s", t.elapsed().as_secs_f64());
    r
}

fn main() {
    let pairs = synth_corpus(16, StyleTransform::named(StyleKind::Thicken), 3);
    let model = HanModel::new(1);
    let (src, dst) = batch_tensors(&pairs, &(0..8).collect::<Vec<_>>());

    // no-grad generator forward
    let gp = model.generator_parameters();
    gp.set_trainable_enabled(false);
    time("gen fwd (no grad)", || model.transfer_forward(&src, BatchNormMode::Train).unwrap());
    gp.set_trainable_enabled(true);

    let outs = time("gen fwd (tape)", || model.transfer_forward(&src, BatchNormMode::Train).unwrap());
    let t1u = outs.t1.upsample_nearest(4).unwrap();
    let t2u = outs.t2.upsample_nearest(2).unwrap();
    let fakes = concat_batch(&[t1u, t2u, outs.t3.clone()]).unwrap();
    let loss = time("gen loss graph", || {
        han_core::losses::pixel_loss(&outs.t3_logits, &dst, 0.8).unwrap()
    });
    time("gen bwd", || loss.backward());

    let fakes_d = fakes.detach();
    let (_, _real) = time("D fwd real(8)", || model.discriminate(&dst, BatchNormMode::Train).unwrap());
    let (_, fake_scores) =
        time("D fwd fakes(24)", || model.discriminate(&fakes_d, BatchNormMode::Train).unwrap());
    let dloss = fake_scores.0[3].mean_all();
    time("D bwd", || dloss.backward());
    let gemm_probe = {
        let a: Vec<f64> = (0..512 * 576).map(|i| (i % 7) as f64).collect();
        let b: Vec<f64> = (0..576 * 1024).map(|i| (i % 5) as f64).collect();
        let mut c = vec![0.0; 512 * 1024];
        let t = Instant::now();
        for _ in 0..5 {
            han_core::tensor::gemm::gemm(
                512, 576, 1024,
                han_core::tensor::gemm::MatRef::row_major(&a, 576),
                han_core::tensor::gemm::MatRef::row_major(&b, 1024),
                &mut c,
            );
        }
        2.0 * 512.0 * 576.0 * 1024.0 * 5.0 / t.elapsed().as_secs_f64() / 1e9
    };
    println!("gemm probe: {gemm_probe:.1} GF/s");
    let x = Tensor::constant(&[8, 64, 32, 32], vec![0.3; 8 * 64 * 32 * 32]).unwrap();
    let t = Instant::now();
    for _ in 0..20 {
        let _ = x.elu();
    }
    println!("elu on [8,64,32,32] x20: {:.3} s", t.elapsed().as_secs_f64());
}
