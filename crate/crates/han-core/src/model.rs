//! The three networks: an 8-layer encoder, a staged decoder that emits
//! intermediate characters T1/T2 alongside the final T3, and a 4-layer
//! discriminator with a classification branch after every trunk layer.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::nn::{Activation, ConvBlock, ConvSpec, ParameterSet};
use crate::tensor::{BatchNormMode, Result, Tensor, TensorError};

pub const GLYPH_EXTENT: usize = 64;

fn conv(ci: usize, co: usize, k: usize, s: usize, p: usize, act: Activation) -> ConvSpec {
    ConvSpec {
        in_channels: ci,
        out_channels: co,
        kernel: k,
        stride: s,
        padding: p,
        transpose: false,
        norm: true,
        activation: act,
    }
}

fn deconv(ci: usize, co: usize, act: Activation) -> ConvSpec {
    ConvSpec {
        in_channels: ci,
        out_channels: co,
        kernel: 4,
        stride: 2,
        padding: 1,
        transpose: true,
        norm: true,
        activation: act,
    }
}

fn head(ci: usize, act: Activation) -> ConvSpec {
    ConvSpec {
        in_channels: ci,
        out_channels: 1,
        kernel: 1,
        stride: 1,
        padding: 0,
        transpose: false,
        norm: false,
        activation: act,
    }
}

fn expect_glyph_batch(x: &Tensor) -> Result<()> {
    match *x.shape() {
        [_, 1, GLYPH_EXTENT, GLYPH_EXTENT] => Ok(()),
        _ => Err(TensorError::ShapeMismatch(
            x.shape().to_vec(),
            vec![0, 1, GLYPH_EXTENT, GLYPH_EXTENT],
        )),
    }
}

/// 8 Conv-BatchNorm-ELU layers; layers 1, 3, 5, 7 downsample by stride 2
/// (64 -> 32 -> 16 -> 8 -> 4) with channels 64, 64, 128, 128, 256, 256, 512, 512.
pub struct Encoder {
    blocks: Vec<ConvBlock>,
}

/// Feature maps captured just before each downsampling layer, resolution
/// 64, 32, 16, 8. These feed the decoder's skip junctions.
pub struct SkipFeatures(pub [Tensor; 4]);

impl Encoder {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let a = Activation::Elu;
        let blocks = vec![
            ConvBlock::new("encoder.e1", conv(1, 64, 4, 2, 1, a), rng),
            ConvBlock::new("encoder.e2", conv(64, 64, 3, 1, 1, a), rng),
            ConvBlock::new("encoder.e3", conv(64, 128, 4, 2, 1, a), rng),
            ConvBlock::new("encoder.e4", conv(128, 128, 3, 1, 1, a), rng),
            ConvBlock::new("encoder.e5", conv(128, 256, 4, 2, 1, a), rng),
            ConvBlock::new("encoder.e6", conv(256, 256, 3, 1, 1, a), rng),
            ConvBlock::new("encoder.e7", conv(256, 512, 4, 2, 1, a), rng),
            ConvBlock::new("encoder.e8", conv(512, 512, 3, 1, 1, a), rng),
        ];
        Encoder { blocks }
    }

    pub fn forward(&self, x: &Tensor, mode: BatchNormMode) -> Result<(Tensor, SkipFeatures)> {
        expect_glyph_batch(x)?;
        let mut skips: Vec<Tensor> = Vec::with_capacity(4);
        let mut cur = x.clone();
        for (i, block) in self.blocks.iter().enumerate() {
            if block.stride == 2 {
                skips.push(cur.clone());
            }
            cur = block.forward(&cur, mode)?;
            debug_assert!(i != 7 || cur.shape() == [x.shape()[0], 512, 4, 4]);
        }
        let skips: [Tensor; 4] = skips.try_into().map_err(|_| TensorError::EmptyConcat).unwrap();
        Ok((cur, SkipFeatures(skips)))
    }

    fn register(&self, params: &mut ParameterSet) {
        for b in &self.blocks {
            b.register(params);
        }
    }
}

/// Generated images from the staged decoder. `t1`/`t2` come from intermediate
/// resolutions through sigmoid heads; `t3` is the sigmoid of `t3_logits`.
pub struct StagedOutputs {
    pub t1: Tensor,
    pub t2: Tensor,
    pub t3_logits: Tensor,
    pub t3: Tensor,
}

/// Four upsampling stages. Each stage refines with two stride-1
/// Conv-BatchNorm-ReLU layers, doubles the resolution with a transposed
/// convolution, then concatenates the mirror-resolution encoder feature.
/// Auxiliary 1x1 heads read the 16x16 and 32x32 junctions as images.
pub struct StagedDecoder {
    refine: Vec<ConvBlock>, // d1a, d1b, d2a, d2b, d3a, d3b, d4a, d4b
    up: Vec<ConvBlock>,     // u1..u4
    t1_head: ConvBlock,
    t2_head: ConvBlock,
    t3_head: ConvBlock,
}

impl StagedDecoder {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let a = Activation::Relu;
        let refine = vec![
            ConvBlock::new("decoder.d1a", conv(512, 256, 3, 1, 1, a), rng),
            ConvBlock::new("decoder.d1b", conv(256, 256, 3, 1, 1, a), rng),
            ConvBlock::new("decoder.d2a", conv(512, 128, 3, 1, 1, a), rng),
            ConvBlock::new("decoder.d2b", conv(128, 128, 3, 1, 1, a), rng),
            ConvBlock::new("decoder.d3a", conv(256, 64, 3, 1, 1, a), rng),
            ConvBlock::new("decoder.d3b", conv(64, 64, 3, 1, 1, a), rng),
            ConvBlock::new("decoder.d4a", conv(128, 32, 3, 1, 1, a), rng),
            ConvBlock::new("decoder.d4b", conv(32, 32, 3, 1, 1, a), rng),
        ];
        let up = vec![
            ConvBlock::new("decoder.u1", deconv(256, 256, a), rng),
            ConvBlock::new("decoder.u2", deconv(128, 128, a), rng),
            ConvBlock::new("decoder.u3", deconv(64, 64, a), rng),
            ConvBlock::new("decoder.u4", deconv(32, 32, a), rng),
        ];
        StagedDecoder {
            refine,
            up,
            t1_head: ConvBlock::new("decoder.t1_head", head(256, Activation::Sigmoid), rng),
            t2_head: ConvBlock::new("decoder.t2_head", head(128, Activation::Sigmoid), rng),
            t3_head: ConvBlock::new("decoder.t3_head", head(33, Activation::None), rng),
        }
    }

    pub fn forward(
        &self,
        bottleneck: &Tensor,
        skips: &SkipFeatures,
        mode: BatchNormMode,
    ) -> Result<StagedOutputs> {
        let [skip64, skip32, skip16, skip8] = &skips.0;
        let mut cur = bottleneck.clone();
        let mut t1 = None;
        let mut t2 = None;
        for stage in 0..4 {
            cur = self.refine[2 * stage].forward(&cur, mode)?;
            cur = self.refine[2 * stage + 1].forward(&cur, mode)?;
            cur = self.up[stage].forward(&cur, mode)?;
            let skip = match stage {
                0 => skip8,
                1 => skip16,
                2 => skip32,
                _ => skip64,
            };
            cur = cur.concat_channels(skip)?;
            match stage {
                1 => t1 = Some(self.t1_head.forward(&cur, mode)?),
                2 => t2 = Some(self.t2_head.forward(&cur, mode)?),
                _ => {}
            }
        }
        let t3_logits = self.t3_head.forward(&cur, mode)?;
        let t3 = t3_logits.sigmoid();
        Ok(StagedOutputs { t1: t1.unwrap(), t2: t2.unwrap(), t3_logits, t3 })
    }

    fn register(&self, params: &mut ParameterSet) {
        for b in &self.refine {
            b.register(params);
        }
        for b in &self.up {
            b.register(params);
        }
        self.t1_head.register(params);
        self.t2_head.register(params);
        self.t3_head.register(params);
    }
}

/// Trunk activations after each discriminator layer; spatial extents halve
/// 32, 16, 8, 4.
pub struct BranchFeatures(pub [Tensor; 4]);

/// Per-branch real/fake probabilities, each of shape [n] in (0, 1).
pub struct BranchScores(pub [Tensor; 4]);

/// 4 stride-2 trunk layers (channels 64, 128, 256, 512); after layer i a
/// branch head maps features to one probability per image via a 1x1
/// convolution, global spatial mean and sigmoid.
pub struct HierarchicalDiscriminator {
    trunk: Vec<ConvBlock>,
    heads: Vec<ConvBlock>,
}

impl HierarchicalDiscriminator {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let a = Activation::Elu;
        let trunk = vec![
            ConvBlock::new("discriminator.c1", conv(1, 64, 4, 2, 1, a), rng),
            ConvBlock::new("discriminator.c2", conv(64, 128, 4, 2, 1, a), rng),
            ConvBlock::new("discriminator.c3", conv(128, 256, 4, 2, 1, a), rng),
            ConvBlock::new("discriminator.c4", conv(256, 512, 4, 2, 1, a), rng),
        ];
        let heads = vec![
            ConvBlock::new("discriminator.head1", head(64, Activation::None), rng),
            ConvBlock::new("discriminator.head2", head(128, Activation::None), rng),
            ConvBlock::new("discriminator.head3", head(256, Activation::None), rng),
            ConvBlock::new("discriminator.head4", head(512, Activation::None), rng),
        ];
        HierarchicalDiscriminator { trunk, heads }
    }

    /// Probability-per-image from branch `i` given that branch's features.
    pub fn head_score(&self, i: usize, features: &Tensor, mode: BatchNormMode) -> Result<Tensor> {
        let logits = self.heads[i].forward(features, mode)?;
        Ok(logits.mean_axes(&[1, 2, 3])?.sigmoid())
    }

    pub fn forward(
        &self,
        image: &Tensor,
        mode: BatchNormMode,
    ) -> Result<(BranchFeatures, BranchScores)> {
        expect_glyph_batch(image)?;
        let mut features: Vec<Tensor> = Vec::with_capacity(4);
        let mut scores: Vec<Tensor> = Vec::with_capacity(4);
        let mut cur = image.clone();
        for (i, block) in self.trunk.iter().enumerate() {
            cur = block.forward(&cur, mode)?;
            features.push(cur.clone());
            scores.push(self.head_score(i, &cur, mode)?);
        }
        Ok((
            BranchFeatures(features.try_into().map_err(|_| TensorError::EmptyConcat).unwrap()),
            BranchScores(scores.try_into().map_err(|_| TensorError::EmptyConcat).unwrap()),
        ))
    }

    fn register(&self, params: &mut ParameterSet) {
        for b in &self.trunk {
            b.register(params);
        }
        for b in &self.heads {
            b.register(params);
        }
    }
}

/// Transfer network plus discriminator with their parameter registries.
pub struct HanModel {
    pub encoder: Encoder,
    pub decoder: StagedDecoder,
    pub discriminator: HierarchicalDiscriminator,
}

impl HanModel {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        HanModel {
            encoder: Encoder::new(&mut rng),
            decoder: StagedDecoder::new(&mut rng),
            discriminator: HierarchicalDiscriminator::new(&mut rng),
        }
    }

    /// Map source glyphs [n, 1, 64, 64] in [0, 1] to staged outputs.
    pub fn transfer_forward(&self, source: &Tensor, mode: BatchNormMode) -> Result<StagedOutputs> {
        let (bottleneck, skips) = self.encoder.forward(source, mode)?;
        self.decoder.forward(&bottleneck, &skips, mode)
    }

    pub fn discriminate(
        &self,
        image: &Tensor,
        mode: BatchNormMode,
    ) -> Result<(BranchFeatures, BranchScores)> {
        self.discriminator.forward(image, mode)
    }

    /// Encoder + decoder parameters (the generator side).
    pub fn generator_parameters(&self) -> ParameterSet {
        let mut p = ParameterSet::new();
        self.encoder.register(&mut p);
        self.decoder.register(&mut p);
        p
    }

    pub fn discriminator_parameters(&self) -> ParameterSet {
        let mut p = ParameterSet::new();
        self.discriminator.register(&mut p);
        p
    }

    pub fn all_parameters(&self) -> ParameterSet {
        let mut p = ParameterSet::new();
        self.encoder.register(&mut p);
        self.decoder.register(&mut p);
        self.discriminator.register(&mut p);
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_batch(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..n * 64 * 64).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::constant(&[n, 1, 64, 64], data).unwrap()
    }

    #[test]
    fn staged_output_shapes() {
        let model = HanModel::new(1);
        let x = random_batch(2, 10);
        let out = model.transfer_forward(&x, BatchNormMode::Eval).unwrap();
        assert_eq!(out.t1.shape(), &[2, 1, 16, 16]);
        assert_eq!(out.t2.shape(), &[2, 1, 32, 32]);
        assert_eq!(out.t3_logits.shape(), &[2, 1, 64, 64]);
        assert_eq!(out.t3.shape(), &[2, 1, 64, 64]);
        assert!(out.t3.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let model = HanModel::new(2);
        let x = random_batch(1, 11);
        let a = model.transfer_forward(&x, BatchNormMode::Eval).unwrap();
        let b = model.transfer_forward(&x, BatchNormMode::Eval).unwrap();
        for (u, v) in a.t3.data().iter().zip(b.t3.data().iter()) {
            assert_eq!(u.to_bits(), v.to_bits());
        }
    }

    #[test]
    fn wrong_extent_is_rejected() {
        let model = HanModel::new(3);
        let x = Tensor::zeros(&[1, 1, 32, 32]);
        assert!(model.transfer_forward(&x, BatchNormMode::Eval).is_err());
        assert!(model.discriminate(&x, BatchNormMode::Eval).is_err());
    }

    #[test]
    fn gradient_of_t3_reaches_every_encoder_parameter() {
        let model = HanModel::new(4);
        let x = random_batch(1, 12);
        let mut encoder_params = ParameterSet::new();
        model.encoder.register(&mut encoder_params);
        let out = model.transfer_forward(&x, BatchNormMode::Train).unwrap();
        out.t3.mean_all().backward();
        for (name, t) in encoder_params.trainable() {
            assert!(t.has_grad(), "no gradient reached {name}");
        }
    }

    #[test]
    fn all_three_outputs_cover_every_generator_parameter() {
        let model = HanModel::new(4);
        let x = random_batch(1, 12);
        let params = model.generator_parameters();
        let out = model.transfer_forward(&x, BatchNormMode::Train).unwrap();
        let loss = out
            .t3
            .mean_all()
            .add(&out.t1.mean_all())
            .unwrap()
            .add(&out.t2.mean_all())
            .unwrap();
        loss.backward();
        for (name, t) in params.trainable() {
            assert!(t.has_grad(), "no gradient reached {name}");
        }
    }

    #[test]
    fn parameter_counts_are_pinned() {
        let model = HanModel::new(5);
        assert_eq!(model.generator_parameters().trainable_values(), 5_892_736 + 4_134_532);
        assert_eq!(model.discriminator_parameters().trainable_values(), 2_757_380);
    }

    #[test]
    fn zeroed_skips_change_t3() {
        let model = HanModel::new(6);
        let x = random_batch(1, 13);
        let (bottleneck, skips) = model.encoder.forward(&x, BatchNormMode::Eval).unwrap();
        let normal = model.decoder.forward(&bottleneck, &skips, BatchNormMode::Eval).unwrap();
        let zeroed = SkipFeatures(skips.0.clone().map(|s| Tensor::zeros(s.shape())));
        let ablated = model.decoder.forward(&bottleneck, &zeroed, BatchNormMode::Eval).unwrap();
        let diff: f64 = normal
            .t3
            .data()
            .iter()
            .zip(ablated.t3.data().iter())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-6, "skip junctions appear disconnected (diff {diff})");
    }

    #[test]
    fn discriminator_scores_in_open_unit_interval() {
        let model = HanModel::new(7);
        let x = random_batch(3, 14);
        let (features, scores) = model.discriminate(&x, BatchNormMode::Eval).unwrap();
        let extents = [32, 16, 8, 4];
        for (i, f) in features.0.iter().enumerate() {
            assert_eq!(f.shape()[2], extents[i]);
        }
        for s in &scores.0 {
            assert_eq!(s.shape(), &[3]);
            assert!(s.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn fresh_discriminator_sits_near_half() {
        let model = HanModel::new(8);
        let x = random_batch(64, 15);
        let (_, scores) = model.discriminate(&x, BatchNormMode::Eval).unwrap();
        for s in &scores.0 {
            for &v in s.data().iter() {
                assert!((v - 0.5).abs() < 0.2, "fresh score {v} far from 0.5");
            }
        }
    }

    #[test]
    fn branch_heads_are_functions_of_their_features() {
        let model = HanModel::new(9);
        let x = random_batch(2, 16);
        let (features, scores) = model.discriminate(&x, BatchNormMode::Eval).unwrap();
        for i in 0..4 {
            let redo = model
                .discriminator
                .head_score(i, &features.0[i], BatchNormMode::Eval)
                .unwrap();
            assert_eq!(redo.to_vec(), scores.0[i].to_vec());
        }
    }

    #[test]
    fn permuting_the_batch_permutes_scores() {
        let model = HanModel::new(10);
        let a = random_batch(1, 17);
        let b = random_batch(1, 18);
        let ab = crate::tensor::concat_batch(&[a.clone(), b.clone()]).unwrap();
        let ba = crate::tensor::concat_batch(&[b, a]).unwrap();
        let (_, s_ab) = model.discriminate(&ab, BatchNormMode::Eval).unwrap();
        let (_, s_ba) = model.discriminate(&ba, BatchNormMode::Eval).unwrap();
        for i in 0..4 {
            let x = s_ab.0[i].to_vec();
            let y = s_ba.0[i].to_vec();
            assert!((x[0] - y[1]).abs() < 1e-12);
            assert!((x[1] - y[0]).abs() < 1e-12);
        }
    }
}
