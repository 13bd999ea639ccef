//! Laplacian texture extraction and the texture prediction branch.
//!
//! The extractor is a fixed (not learned) depthwise Laplacian stencil over
//! the three color channels of the target image; its response is the
//! supervision signal for the decoder's texture heads. The branch grafts two
//! convolutions onto a shallow decoder feature map and splits into a texture
//! prediction and a residual that is added back onto the features.

use crate::error::{Error, Result};
use crate::params::{ConvLayer, Init, ParamSet};
use crate::tape::{GradTape, Var};
use crate::tensor::{conv2d, ConvSpec, PadMode, Tensor};
use rand::Rng;

/// Which discrete Laplacian stencil the extractor applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LaplacianStencil {
    /// `[0 1 0; 1 -4 1; 0 1 0]`, the default.
    FourNeighbor,
    /// `[1 1 1; 1 -8 1; 1 1 1]`.
    EightNeighbor,
}

impl LaplacianStencil {
    fn taps(self) -> [f64; 9] {
        match self {
            LaplacianStencil::FourNeighbor => [0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0],
            LaplacianStencil::EightNeighbor => [1.0, 1.0, 1.0, 1.0, -8.0, 1.0, 1.0, 1.0, 1.0],
        }
    }
}

/// Per-channel Laplacian response of a 3-channel image tensor, replicate
/// padded so edges see their own values.
pub fn extract_texture(image: &Tensor, stencil: LaplacianStencil) -> Result<Tensor> {
    if image.channels() != 3 {
        return Err(Error::shape(
            "texture extractor channels",
            "3",
            image.channels().to_string(),
        ));
    }
    let spec = ConvSpec::depthwise(3, 3, 1)?.with_pad_mode(PadMode::Replicate);
    let taps = stencil.taps();
    let weights = Tensor::from_fn([3, 1, 3, 3], |_, _, h, w| taps[h * 3 + w]);
    conv2d(image, &spec, &weights, None)
}

/// Texture branch parameters: two shared convolutions, then a texture head
/// predicting the 3-channel response and a residual head added back onto the
/// features. Both heads start at zero, so the branch is initially the
/// identity on features with a zero texture prediction.
#[derive(Clone, Debug)]
pub struct TexBranchParams {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub texture_head: ConvLayer,
    pub residual_head: ConvLayer,
}

impl TexBranchParams {
    pub fn init(set: &mut ParamSet, prefix: &str, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(TexBranchParams {
            conv1: ConvLayer::init(
                set,
                &format!("{prefix}.conv1"),
                ConvSpec::same(channels, channels, 3)?,
                Init::He,
                rng,
            ),
            conv2: ConvLayer::init(
                set,
                &format!("{prefix}.conv2"),
                ConvSpec::same(channels, channels, 3)?,
                Init::He,
                rng,
            ),
            texture_head: ConvLayer::init(
                set,
                &format!("{prefix}.texture_head"),
                ConvSpec::same(3, channels, 3)?,
                Init::Zero,
                rng,
            ),
            residual_head: ConvLayer::init(
                set,
                &format!("{prefix}.residual_head"),
                ConvSpec::same(channels, channels, 3)?,
                Init::Zero,
                rng,
            ),
        })
    }
}

/// Runs the branch: `features + residual` plus the texture prediction, both
/// differentiable.
pub fn texture_branch(
    tape: &mut GradTape,
    features: Var,
    params: &TexBranchParams,
    vars: &[Var],
) -> Result<(Var, Var)> {
    let h1 = params.conv1.forward(tape, vars, features)?;
    let r1 = tape.relu(h1);
    let h2 = params.conv2.forward(tape, vars, r1)?;
    let r2 = tape.relu(h2);
    let texture = params.texture_head.forward(tape, vars, r2)?;
    let residual = params.residual_head.forward(tape, vars, r2)?;
    let out = tape.add(features, residual)?;
    Ok((out, texture))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradient_multi;
    use crate::testutil::{rand_tensor, rng};

    #[test]
    fn constant_image_has_zero_texture() {
        let x = Tensor::full([1, 3, 8, 8], 0.6);
        let t = extract_texture(&x, LaplacianStencil::FourNeighbor).unwrap();
        assert!(t.max_abs() < 1e-12);
    }

    #[test]
    fn impulse_reads_the_stencil_back() {
        let mut x = Tensor::zeros([1, 3, 5, 5]);
        x.set(0, 1, 2, 2, 1.0);
        let t = extract_texture(&x, LaplacianStencil::FourNeighbor).unwrap();
        assert_eq!(t.at(0, 1, 2, 2), -4.0);
        for (h, w) in [(1, 2), (3, 2), (2, 1), (2, 3)] {
            assert_eq!(t.at(0, 1, h, w), 1.0);
        }
        assert_eq!(t.at(0, 1, 1, 1), 0.0);
        // Other channels untouched: depthwise.
        assert_eq!(t.at(0, 0, 2, 2), 0.0);
    }

    #[test]
    fn linear_ramp_has_zero_interior_response() {
        let x = Tensor::from_fn([1, 3, 8, 8], |_, _, h, w| 0.1 * h as f64 + 0.05 * w as f64);
        let t = extract_texture(&x, LaplacianStencil::FourNeighbor).unwrap();
        for c in 0..3 {
            for h in 1..7 {
                for w in 1..7 {
                    assert!(t.at(0, c, h, w).abs() < 1e-12, "({c},{h},{w})");
                }
            }
        }
    }

    #[test]
    fn extraction_is_linear() {
        let mut r = rng(91);
        let x = rand_tensor([1, 3, 6, 6], &mut r);
        let y = rand_tensor([1, 3, 6, 6], &mut r);
        let (a, b) = (1.7, -0.4);
        let lhs = extract_texture(&x.scale(a).add(&y.scale(b)).unwrap(), LaplacianStencil::FourNeighbor).unwrap();
        let rhs = extract_texture(&x, LaplacianStencil::FourNeighbor)
            .unwrap()
            .scale(a)
            .add(&extract_texture(&y, LaplacianStencil::FourNeighbor).unwrap().scale(b))
            .unwrap();
        assert!(lhs.sub(&rhs).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn replicate_padded_response_sums_to_zero() {
        // Every neighbor difference appears once with each sign, and clamped
        // taps difference a pixel against itself, so the total response is
        // exactly zero: the whole-image mean is boundary-free.
        let mut r = rng(92);
        for _ in 0..10 {
            let x = rand_tensor([1, 3, 9, 7], &mut r);
            let t = extract_texture(&x, LaplacianStencil::FourNeighbor).unwrap();
            assert!(t.mean().abs() < 1e-10, "mean {}", t.mean());
        }
    }

    #[test]
    fn wrong_channel_count_rejected() {
        let x = Tensor::zeros([1, 2, 4, 4]);
        assert!(extract_texture(&x, LaplacianStencil::FourNeighbor).is_err());
    }

    #[test]
    fn branch_is_identity_at_init() {
        let mut r = rng(93);
        let mut set = ParamSet::new();
        let params = TexBranchParams::init(&mut set, "tex", 4, &mut r).unwrap();
        let x = rand_tensor([1, 4, 6, 6], &mut r);
        let mut tape = GradTape::new();
        let vars = set.register(&mut tape);
        let xv = tape.constant(x.clone());
        let (out, tex) = texture_branch(&mut tape, xv, &params, &vars).unwrap();
        assert!(tape.value(out).sub(&x).unwrap().max_abs() < 1e-15);
        assert!(tape.value(tex).max_abs() < 1e-15);
        assert_eq!(tape.shape(tex), [1, 3, 6, 6]);
    }

    #[test]
    fn branch_gradients_match_fd() {
        let mut r = rng(94);
        let mut set = ParamSet::new();
        let params = TexBranchParams::init(&mut set, "tex", 3, &mut r).unwrap();
        // Move heads off zero so both outputs carry generic gradients.
        *set.get_mut(params.texture_head.weight) = rand_tensor([3, 3, 3, 3], &mut r).scale(0.2);
        *set.get_mut(params.residual_head.weight) = rand_tensor([3, 3, 3, 3], &mut r).scale(0.2);
        let x = rand_tensor([1, 3, 4, 4], &mut r);
        let target = rand_tensor([1, 3, 4, 4], &mut r);
        let points: Vec<Tensor> = set.iter().map(|e| e.value.clone()).collect();
        let err = check_gradient_multi(
            |tape, vars| {
                let xv = tape.constant(x.clone());
                let tv = tape.constant(target.clone());
                let (out, tex) = texture_branch(tape, xv, &params, vars)?;
                let d1 = tape.sub(out, tv)?;
                let s1 = tape.mul(d1, d1)?;
                let a = tape.mean_all(s1);
                let s2 = tape.mul(tex, tex)?;
                let b = tape.mean_all(s2);
                tape.add(a, b)
            },
            &points,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }
}
