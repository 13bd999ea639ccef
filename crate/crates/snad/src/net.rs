//! Shape-faithful toy networks: the encoder/decoder generator and the
//! multi-patch discriminator.
//!
//! The generator is a LinkNet-style encoder/decoder: residual blocks with
//! stride-2 downsampling convolutions on the way in, SNAD blocks with
//! additive skip links on the way out, texture branches on the two decoder
//! stages, and a sigmoid head that keeps the output image in `[0, 1]`.
//!
//! The discriminator stacks dual-branch blocks (parallel 4x4 and 3x3
//! stride-2 convolutions) whose weights all pass through spectral
//! normalization on every forward, and exposes three patch logit maps
//! (8x8, 4x4, 2x2 at the 32x32 reference input) plus a dense global logit.

use crate::error::{Error, Result};
use crate::loss::DiscOutputs;
use crate::masks::MaskPyramid;
use crate::norm::{
    jacobi_top_singular_value, power_iterate, snad_block_t, NormMode, SnadBlockParams,
    SpectralState, DEFAULT_EPS, SIGMA_FLOOR,
};
use crate::params::{ConvLayer, Init, ParamSet};
use crate::rng::stream;
use crate::tape::{GradTape, Var};
use crate::tensor::ConvSpec;
use crate::texture::{texture_branch, TexBranchParams};
use rand::Rng;

// ── Generator ────────────────────────────────────────────────────────

/// Toy generator hyperparameters.
#[derive(Clone, Debug)]
pub struct GeneratorConfig {
    /// Square input edge; must be divisible by 4.
    pub input_size: usize,
    /// Channel plan for the three encoder stages.
    pub channels: [usize; 3],
    /// Which normalizer runs inside the decoder blocks (the ablation axis).
    pub norm_mode: NormMode,
    pub eps: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            input_size: 32,
            channels: [16, 32, 64],
            norm_mode: NormMode::Separable,
            eps: DEFAULT_EPS,
        }
    }
}

/// Two stacked residual units.
#[derive(Clone, Debug)]
struct ResBlock {
    conv_a: ConvLayer,
    conv_b: ConvLayer,
    conv_c: ConvLayer,
    conv_d: ConvLayer,
}

impl ResBlock {
    fn init(set: &mut ParamSet, prefix: &str, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        let spec = ConvSpec::same(channels, channels, 3)?;
        Ok(ResBlock {
            conv_a: ConvLayer::init(set, &format!("{prefix}.conv_a"), spec.clone(), Init::He, rng),
            conv_b: ConvLayer::init(set, &format!("{prefix}.conv_b"), spec.clone(), Init::He, rng),
            conv_c: ConvLayer::init(set, &format!("{prefix}.conv_c"), spec.clone(), Init::He, rng),
            conv_d: ConvLayer::init(set, &format!("{prefix}.conv_d"), spec, Init::He, rng),
        })
    }

    fn forward(&self, tape: &mut GradTape, vars: &[Var], x: Var) -> Result<Var> {
        let h = self.conv_a.forward(tape, vars, x)?;
        let r = tape.relu(h);
        let u = self.conv_b.forward(tape, vars, r)?;
        let y = tape.add(x, u)?;
        let h2 = self.conv_c.forward(tape, vars, y)?;
        let r2 = tape.relu(h2);
        let u2 = self.conv_d.forward(tape, vars, r2)?;
        tape.add(y, u2)
    }
}

/// Generator outputs: the deblurred estimate and the per-stage texture
/// predictions, both resampled to image resolution.
#[derive(Debug)]
pub struct GenOutputs {
    pub image: Var,
    pub textures: Vec<Var>,
}

/// The toy deblurring generator.
#[derive(Clone, Debug)]
pub struct ToyGenerator {
    pub config: GeneratorConfig,
    pub params: ParamSet,
    stem: ConvLayer,
    enc1: ResBlock,
    down1: ConvLayer,
    enc2: ResBlock,
    down2: ConvLayer,
    enc3: ResBlock,
    dec1: SnadBlockParams,
    tex1: TexBranchParams,
    dec2: SnadBlockParams,
    tex2: TexBranchParams,
    head: ConvLayer,
}

impl ToyGenerator {
    pub fn init(config: GeneratorConfig, seed: u64) -> Result<Self> {
        if !config.input_size.is_multiple_of(4) {
            return Err(Error::InvalidArgument {
                what: "generator input size",
                detail: format!("must be a multiple of 4, got {}", config.input_size),
            });
        }
        let mut rng = stream(seed, "generator-init");
        let mut set = ParamSet::new();
        let [c0, c1, c2] = config.channels;
        let stem = ConvLayer::init(&mut set, "g.stem", ConvSpec::same(c0, 3, 3)?, Init::He, &mut rng);
        let enc1 = ResBlock::init(&mut set, "g.enc1", c0, &mut rng)?;
        let down1 = ConvLayer::init(
            &mut set,
            "g.down1",
            ConvSpec::new(c1, c0, 3, 3, 2, 1)?,
            Init::He,
            &mut rng,
        );
        let enc2 = ResBlock::init(&mut set, "g.enc2", c1, &mut rng)?;
        let down2 = ConvLayer::init(
            &mut set,
            "g.down2",
            ConvSpec::new(c2, c1, 3, 3, 2, 1)?,
            Init::He,
            &mut rng,
        );
        let enc3 = ResBlock::init(&mut set, "g.enc3", c2, &mut rng)?;
        let dec1 = SnadBlockParams::init(&mut set, "g.dec1", c2, c1, config.norm_mode, &mut rng)?;
        let tex1 = TexBranchParams::init(&mut set, "g.tex1", c1, &mut rng)?;
        let dec2 = SnadBlockParams::init(&mut set, "g.dec2", c1, c0, config.norm_mode, &mut rng)?;
        let tex2 = TexBranchParams::init(&mut set, "g.tex2", c0, &mut rng)?;
        let head = ConvLayer::init(&mut set, "g.head", ConvSpec::same(3, c0, 3)?, Init::He, &mut rng);
        Ok(ToyGenerator {
            config,
            params: set,
            stem,
            enc1,
            down1,
            enc2,
            down2,
            enc3,
            dec1,
            tex1,
            dec2,
            tex2,
            head,
        })
    }

    /// Mask resolutions the decoder needs precomputed.
    pub fn mask_sizes(&self) -> [usize; 2] {
        [self.config.input_size / 4, self.config.input_size / 2]
    }

    /// Runs the generator on a blurred `(B, 3, S, S)` batch. `vars` must come
    /// from registering `self.params` on `tape`.
    pub fn forward(
        &self,
        tape: &mut GradTape,
        vars: &[Var],
        blurred: Var,
        pyramid: &MaskPyramid,
    ) -> Result<GenOutputs> {
        let s = self.config.input_size;
        let shape = tape.shape(blurred);
        if shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(Error::shape(
                "generator input",
                format!("(B, 3, {s}, {s})"),
                format!("{shape:?}"),
            ));
        }
        let eps = self.config.eps;
        let quarter = pyramid.at(s / 4)?;
        let half = pyramid.at(s / 2)?;

        let x0 = self.stem.forward(tape, vars, blurred)?;
        let x0 = tape.relu(x0);
        let e1 = self.enc1.forward(tape, vars, x0)?;
        let d1 = self.down1.forward(tape, vars, e1)?;
        let d1 = tape.relu(d1);
        let e2 = self.enc2.forward(tape, vars, d1)?;
        let d2 = self.down2.forward(tape, vars, e2)?;
        let d2 = tape.relu(d2);
        let e3 = self.enc3.forward(tape, vars, d2)?;

        let u1 = snad_block_t(tape, e3, quarter, &self.dec1, vars, eps)?;
        let u1 = tape.add(u1, e2)?;
        let (f1, t1) = texture_branch(tape, u1, &self.tex1, vars)?;

        let u2 = snad_block_t(tape, f1, half, &self.dec2, vars, eps)?;
        let u2 = tape.add(u2, e1)?;
        let (f2, t2) = texture_branch(tape, u2, &self.tex2, vars)?;

        let logits = self.head.forward(tape, vars, f2)?;
        let image = tape.sigmoid(logits);

        // Texture predictions for the loss, both at image resolution.
        let t1_full = tape.bilinear2x(t1);
        Ok(GenOutputs {
            image,
            textures: vec![t1_full, t2],
        })
    }
}

// ── Discriminator ────────────────────────────────────────────────────

/// Parallel 4x4 / 3x3 stride-2 branches, concatenated.
#[derive(Clone, Debug)]
struct DualBranchBlock {
    branch4: ConvLayer,
    branch3: ConvLayer,
}

impl DualBranchBlock {
    fn init(
        set: &mut ParamSet,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let half = out_channels / 2;
        Ok(DualBranchBlock {
            branch4: ConvLayer::init(
                set,
                &format!("{prefix}.branch4"),
                ConvSpec::new(half, in_channels, 4, 4, 2, 1)?,
                Init::He,
                rng,
            ),
            branch3: ConvLayer::init(
                set,
                &format!("{prefix}.branch3"),
                ConvSpec::new(out_channels - half, in_channels, 3, 3, 2, 1)?,
                Init::He,
                rng,
            ),
        })
    }
}

/// Reference discriminator input edge.
pub const DISC_INPUT_SIZE: usize = 32;

/// Multi-patch discriminator with spectral-normalized convolutions.
pub struct ToyDiscriminator {
    pub params: ParamSet,
    blocks: Vec<DualBranchBlock>,
    head8: ConvLayer,
    head4: ConvLayer,
    head2: ConvLayer,
    global: ConvLayer,
    /// Persistent power-iteration state per convolution, in forward order.
    sn_states: Vec<SpectralState>,
    /// Weight index behind each entry of `sn_states`.
    sn_weights: Vec<usize>,
    /// Singular-value estimates used by the most recent forward.
    last_sigmas: Vec<f64>,
}

impl ToyDiscriminator {
    pub fn init(seed: u64) -> Result<Self> {
        let mut rng = stream(seed, "discriminator-init");
        let mut set = ParamSet::new();
        let plan = [(3, 16), (16, 32), (32, 64), (64, 64)];
        let mut blocks = Vec::new();
        for (i, (cin, cout)) in plan.iter().enumerate() {
            blocks.push(DualBranchBlock::init(
                &mut set,
                &format!("d.block{}", i + 1),
                *cin,
                *cout,
                &mut rng,
            )?);
        }
        let head8 = ConvLayer::init(&mut set, "d.head8", ConvSpec::same(1, 32, 3)?, Init::He, &mut rng);
        let head4 = ConvLayer::init(&mut set, "d.head4", ConvSpec::same(1, 64, 3)?, Init::He, &mut rng);
        let head2 = ConvLayer::init(&mut set, "d.head2", ConvSpec::same(1, 64, 3)?, Init::He, &mut rng);
        // Dense layer over the 2x2 bottom features, as a full-extent conv.
        let global = ConvLayer::init(
            &mut set,
            "d.global",
            ConvSpec::new(1, 64, 2, 2, 1, 0)?,
            Init::He,
            &mut rng,
        );

        let mut disc = ToyDiscriminator {
            params: set,
            blocks,
            head8,
            head4,
            head2,
            global,
            sn_states: Vec::new(),
            sn_weights: Vec::new(),
            last_sigmas: Vec::new(),
        };
        let layers = disc.conv_layers();
        for (i, layer) in layers.iter().enumerate() {
            let rows = disc.params.get(layer.weight).shape()[0];
            disc.sn_states.push(SpectralState::init(
                rows,
                crate::rng::derive_seed(seed, &format!("sn-{i}")),
            ));
            disc.sn_weights.push(layer.weight);
        }
        disc.last_sigmas = vec![1.0; disc.sn_weights.len()];
        Ok(disc)
    }

    /// Every convolution layer, in forward order. All of them are spectrally
    /// normalized each forward.
    fn conv_layers(&self) -> Vec<ConvLayer> {
        let mut layers = Vec::new();
        for block in &self.blocks {
            layers.push(block.branch4.clone());
            layers.push(block.branch3.clone());
        }
        layers.push(self.head8.clone());
        layers.push(self.head4.clone());
        layers.push(self.head2.clone());
        layers.push(self.global.clone());
        layers
    }

    /// Runs the discriminator on a `(B, 3, 32, 32)` batch, updating the
    /// persistent power-iteration state of every convolution.
    pub fn forward(&mut self, tape: &mut GradTape, vars: &[Var], image: Var) -> Result<DiscOutputs<Var>> {
        let shape = tape.shape(image);
        if shape[1] != 3 || shape[2] != DISC_INPUT_SIZE || shape[3] != DISC_INPUT_SIZE {
            return Err(Error::shape(
                "discriminator input",
                format!("(B, 3, {DISC_INPUT_SIZE}, {DISC_INPUT_SIZE})"),
                format!("{shape:?}"),
            ));
        }
        let sn_conv = |tape: &mut GradTape,
                           layer: &ConvLayer,
                           state: &mut SpectralState,
                           last_sigma: &mut f64,
                           x: Var|
         -> Result<Var> {
            let weight = tape.value(vars[layer.weight]).clone();
            let mut est = power_iterate(&weight, state, 1);
            if est.sigma < SIGMA_FLOOR {
                est.sigma = SIGMA_FLOOR;
            }
            *last_sigma = est.sigma;
            let normalized = tape.spectral_scale(vars[layer.weight], est.u, est.v, est.sigma);
            tape.conv2d(x, normalized, Some(vars[layer.bias]), &layer.spec)
        };

        let states = &mut self.sn_states;
        let sigmas = &mut self.last_sigmas;
        let mut x = image;
        let mut features = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            let a = sn_conv(tape, &block.branch4, &mut states[2 * i], &mut sigmas[2 * i], x)?;
            let a = tape.relu(a);
            let b = sn_conv(tape, &block.branch3, &mut states[2 * i + 1], &mut sigmas[2 * i + 1], x)?;
            let b = tape.relu(b);
            x = tape.concat_channels(&[a, b])?;
            features.push(x);
        }
        let n = self.blocks.len() * 2;
        let patch8 = sn_conv(tape, &self.head8, &mut states[n], &mut sigmas[n], features[1])?;
        let patch4 = sn_conv(tape, &self.head4, &mut states[n + 1], &mut sigmas[n + 1], features[2])?;
        let patch2 = sn_conv(tape, &self.head2, &mut states[n + 2], &mut sigmas[n + 2], features[3])?;
        let global = sn_conv(tape, &self.global, &mut states[n + 3], &mut sigmas[n + 3], features[3])?;
        Ok(DiscOutputs {
            patch8,
            patch4,
            patch2,
            global,
        })
    }

    /// Ratio of each convolution's true top singular value to the estimate
    /// its last forward divided by. Near 1 once the persistent state has
    /// converged.
    pub fn spectral_report(&self) -> Vec<f64> {
        self.sn_weights
            .iter()
            .zip(&self.last_sigmas)
            .map(|(&w, &sigma)| jacobi_top_singular_value(self.params.get(w)) / sigma)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::{LabelMap, RegionClass};
    use crate::rng::uniform_tensor;
    use crate::testutil::rng;
    use crate::Tensor;

    fn toy_labels(b: usize, s: usize) -> Vec<LabelMap> {
        (0..b)
            .map(|i| {
                let mut map = LabelMap::filled(s, s, RegionClass::Back);
                for y in 0..s {
                    for x in 0..s {
                        match (x + y + i) % 4 {
                            0 => map.set_class(x, y, RegionClass::Skin),
                            1 => map.set_class(x, y, RegionClass::Hair),
                            2 => map.set_class(x, y, RegionClass::Facial),
                            _ => {}
                        }
                    }
                }
                map
            })
            .collect()
    }

    fn pyramid_for(gen: &ToyGenerator, b: usize) -> MaskPyramid {
        let labels = toy_labels(b, gen.config.input_size);
        MaskPyramid::build(&labels, &gen.mask_sizes()).unwrap()
    }

    #[test]
    fn generator_preserves_shape_and_range() {
        let gen = ToyGenerator::init(GeneratorConfig::default(), 0).unwrap();
        let pyramid = pyramid_for(&gen, 1);
        let mut tape = GradTape::new();
        let vars = gen.params.register(&mut tape);
        let x = tape.constant(uniform_tensor([1, 3, 32, 32], &mut rng(121), 0.0, 1.0));
        let out = gen.forward(&mut tape, &vars, x, &pyramid).unwrap();
        assert_eq!(tape.shape(out.image), [1, 3, 32, 32]);
        let img = tape.value(out.image);
        assert!(img.all_finite());
        assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        // Texture predictions arrive at image resolution.
        for &t in &out.textures {
            assert_eq!(tape.shape(t), [1, 3, 32, 32]);
        }
    }

    #[test]
    fn generator_rejects_missing_mask_scale() {
        let gen = ToyGenerator::init(GeneratorConfig::default(), 0).unwrap();
        let labels = toy_labels(1, 32);
        // Only one of the two required scales.
        let pyramid = MaskPyramid::build(&labels, &[16]).unwrap();
        let mut tape = GradTape::new();
        let vars = gen.params.register(&mut tape);
        let x = tape.constant(Tensor::zeros([1, 3, 32, 32]));
        let err = gen.forward(&mut tape, &vars, x, &pyramid).unwrap_err();
        assert!(err.to_string().contains("8x8"), "{err}");
    }

    #[test]
    fn generator_supports_reduced_sizes() {
        let config = GeneratorConfig {
            input_size: 16,
            channels: [4, 6, 8],
            ..GeneratorConfig::default()
        };
        let gen = ToyGenerator::init(config, 3).unwrap();
        let pyramid = pyramid_for(&gen, 1);
        let mut tape = GradTape::new();
        let vars = gen.params.register(&mut tape);
        let x = tape.constant(uniform_tensor([1, 3, 16, 16], &mut rng(122), 0.0, 1.0));
        let out = gen.forward(&mut tape, &vars, x, &pyramid).unwrap();
        assert_eq!(tape.shape(out.image), [1, 3, 16, 16]);
    }

    #[test]
    fn every_parameter_is_registered_once() {
        let gen = ToyGenerator::init(GeneratorConfig::default(), 1).unwrap();
        let mut tape = GradTape::new();
        let vars = gen.params.register(&mut tape);
        assert_eq!(vars.len(), gen.params.len());
        assert_eq!(tape.param_count(), gen.params.len());
        let mut names: Vec<&str> = tape.params().map(|(n, _)| n).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), gen.params.len(), "duplicate parameter names");
    }

    #[test]
    fn discriminator_emits_documented_head_shapes() {
        let mut disc = ToyDiscriminator::init(7).unwrap();
        let mut tape = GradTape::new();
        let vars = disc.params.register(&mut tape);
        let x = tape.constant(uniform_tensor([2, 3, 32, 32], &mut rng(123), 0.0, 1.0));
        let out = disc.forward(&mut tape, &vars, x).unwrap();
        assert_eq!(tape.shape(out.patch8), [2, 1, 8, 8]);
        assert_eq!(tape.shape(out.patch4), [2, 1, 4, 4]);
        assert_eq!(tape.shape(out.patch2), [2, 1, 2, 2]);
        assert_eq!(tape.shape(out.global), [2, 1, 1, 1]);
    }

    #[test]
    fn discriminator_rejects_wrong_input_size() {
        let mut disc = ToyDiscriminator::init(7).unwrap();
        let mut tape = GradTape::new();
        let vars = disc.params.register(&mut tape);
        let x = tape.constant(Tensor::zeros([1, 3, 16, 16]));
        assert!(disc.forward(&mut tape, &vars, x).is_err());
    }

    #[test]
    fn different_images_get_different_logits() {
        let mut disc = ToyDiscriminator::init(9).unwrap();
        let mut tape = GradTape::new();
        let vars = disc.params.register(&mut tape);
        let mut r = rng(124);
        let a = tape.constant(uniform_tensor([1, 3, 32, 32], &mut r, 0.0, 1.0));
        let b = tape.constant(uniform_tensor([1, 3, 32, 32], &mut r, 0.0, 1.0));
        let oa = disc.forward(&mut tape, &vars, a).unwrap();
        let ob = disc.forward(&mut tape, &vars, b).unwrap();
        assert_ne!(tape.value(oa.global).item(), tape.value(ob.global).item());
    }

    #[test]
    fn spectral_estimates_converge_over_forwards() {
        let mut disc = ToyDiscriminator::init(11).unwrap();
        let x_val = uniform_tensor([1, 3, 32, 32], &mut rng(125), 0.0, 1.0);
        for _ in 0..100 {
            let mut tape = GradTape::new();
            let vars = disc.params.register(&mut tape);
            let x = tape.constant(x_val.clone());
            disc.forward(&mut tape, &vars, x).unwrap();
        }
        for (i, ratio) in disc.spectral_report().iter().enumerate() {
            assert!((0.9..=1.1).contains(ratio), "conv {i}: sigma ratio {ratio}");
        }
    }
}
