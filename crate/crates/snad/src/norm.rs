//! Separable normalization, adaptive denormalization, and friends.
//!
//! Separable normalization (SN) standardizes the foreground-masked and
//! background-masked parts of a feature map independently and adds the two
//! standardized regions back together. It carries **no** learned affine
//! transform; all trainable parameters of a SNAD layer live in the adaptive
//! denormalization (AD) convolutions, which predict per-pixel scale and shift
//! maps from the one-hot label map. When both regions are standardized, the
//! whole slice ends up standard too: the [`decomposition_oracle`] checks the
//! exact mean/variance composition identity behind that claim.
//!
//! Batch and instance normalization (also affine-free) are provided as
//! baselines for the ablation axis, plus power-iteration spectral
//! normalization for discriminator weights with a Jacobi SVD as its
//! independent oracle.

use crate::error::{Error, Result};
use crate::masks::{BatchMasks, RegionMasks};
use crate::params::{ConvLayer, ConvTransposeLayer, Init, ParamSet};
use crate::rng::stream;
use crate::tape::{GradTape, Var};
use crate::tensor::{check_mask_shape, masked_mean_var, ConvSpec, MaskedStats, Tensor};
use rand::Rng;

/// Epsilon inside the variance square root.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Foreground/background statistics gathered by one SN pass.
#[derive(Clone, Debug)]
pub struct SnStats {
    pub foreground: MaskedStats,
    pub background: MaskedStats,
    pub eps: f64,
}

/// Which standardization formula to apply per region.
///
/// `Standardize` is the production path. `SquaredResidual` keeps the square
/// on the centered term; it exists only so the invariant suite can
/// demonstrate that it fails to zero-center and is not a viable reading.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SnVariant {
    Standardize,
    SquaredResidual,
}

fn check_partition(fg: &Tensor, bg: &Tensor) -> Result<()> {
    if fg.shape() != bg.shape() {
        return Err(Error::shape(
            "foreground/background masks",
            format!("{:?}", fg.shape()),
            format!("{:?}", bg.shape()),
        ));
    }
    for (a, b) in fg.data().iter().zip(bg.data()) {
        if (a + b - 1.0).abs() > 0.0 {
            return Err(Error::InvalidArgument {
                what: "region masks",
                detail: "foreground and background must partition every pixel".into(),
            });
        }
    }
    Ok(())
}

/// Eager separable normalization over mask tensors shaped `(1|B, 1, H, W)`.
///
/// Each region is centered and divided by `sqrt(var + eps)` inside its mask;
/// the off-mask part of each region term is zero, so the two terms sum to the
/// full normalized map. Empty regions pass through as zeros with the `(0, 1)`
/// sentinel in the returned stats.
pub fn sn_apply(
    x: &Tensor,
    fg: &Tensor,
    bg: &Tensor,
    eps: f64,
    variant: SnVariant,
) -> Result<(Tensor, SnStats)> {
    if eps <= 0.0 {
        return Err(Error::InvalidArgument {
            what: "sn epsilon",
            detail: format!("must be > 0, got {eps}"),
        });
    }
    check_mask_shape(x, fg, "sn foreground mask")?;
    check_partition(fg, bg)?;
    let fg_stats = masked_mean_var(x, fg)?;
    let bg_stats = masked_mean_var(x, bg)?;

    let [batch, channels, h, w] = x.shape();
    let mut out = Tensor::zeros(x.shape());
    for (mask, stats) in [(fg, &fg_stats), (bg, &bg_stats)] {
        let mask_b = mask.batch();
        for b in 0..batch {
            let mb = if mask_b == 1 { 0 } else { b };
            for c in 0..channels {
                let mu = stats.mean_at(b, c, channels);
                let inv_sigma = 1.0 / (stats.var_at(b, c, channels) + eps).sqrt();
                for hh in 0..h {
                    for ww in 0..w {
                        let m = mask.at(mb, 0, hh, ww);
                        if m == 0.0 {
                            continue;
                        }
                        let centered = x.at(b, c, hh, ww) - mu;
                        let term = match variant {
                            SnVariant::Standardize => centered * inv_sigma,
                            SnVariant::SquaredResidual => centered * centered * inv_sigma,
                        };
                        let i = out.index(b, c, hh, ww);
                        out.data_mut()[i] += m * term;
                    }
                }
            }
        }
    }
    Ok((
        out,
        SnStats {
            foreground: fg_stats,
            background: bg_stats,
            eps,
        },
    ))
}

/// Separable normalization of `x` under a single [`RegionMasks`] set (shared
/// across the batch).
pub fn sn_forward(x: &Tensor, masks: &RegionMasks, eps: f64) -> Result<(Tensor, SnStats)> {
    sn_apply(
        x,
        &masks.foreground.to_tensor(),
        &masks.background.to_tensor(),
        eps,
        SnVariant::Standardize,
    )
}

/// One region's standardization as a differentiable composite:
/// `mask * (x - mu) / sqrt(var + eps)` with `mu`, `var` the masked moments.
fn region_normalize_t(tape: &mut GradTape, x: Var, mask: &Tensor, eps: f64) -> Result<Var> {
    check_mask_shape(tape.value(x), mask, "sn mask")?;
    let [_, _, h, w] = mask.shape();
    let mask_b = mask.batch();
    // Reciprocal pixel counts per batch row; zero for empty regions so the
    // whole term collapses to zero instead of dividing by zero.
    let mut inv = Tensor::zeros([mask_b, 1, 1, 1]);
    for b in 0..mask_b {
        let mut n = 0.0;
        for hh in 0..h {
            for ww in 0..w {
                n += mask.at(b, 0, hh, ww);
            }
        }
        inv.set(b, 0, 0, 0, if n == 0.0 { 0.0 } else { 1.0 / n });
    }
    let m = tape.constant(mask.clone());
    let inv_n = tape.constant(inv);

    let xm = tape.mul_chan(x, m)?;
    let sums = tape.sum_hw(xm);
    let mu = tape.mul_bcast(sums, inv_n)?;
    let centered = tape.sub_bcast(x, mu)?;
    let centered_masked = tape.mul_chan(centered, m)?;
    let sq = tape.mul(centered_masked, centered_masked)?;
    let sq_sum = tape.sum_hw(sq);
    let var = tape.mul_bcast(sq_sum, inv_n)?;
    let var_eps = tape.add_scalar(var, eps);
    let sigma = tape.sqrt(var_eps);
    let inv_sigma = tape.recip(sigma);
    tape.mul_bcast(centered_masked, inv_sigma)
}

/// Differentiable separable normalization. Gradients flow through the
/// data-dependent masked statistics.
pub fn sn_forward_t(tape: &mut GradTape, x: Var, fg: &Tensor, bg: &Tensor, eps: f64) -> Result<Var> {
    check_partition(fg, bg)?;
    let f = region_normalize_t(tape, x, fg, eps)?;
    let b = region_normalize_t(tape, x, bg, eps)?;
    tape.add(f, b)
}

/// Affine-free batch normalization: per-channel statistics over `(B, H, W)`.
pub fn batch_normalize_t(tape: &mut GradTape, x: Var, eps: f64) -> Result<Var> {
    let [b, _, h, w] = tape.shape(x);
    let n = (b * h * w) as f64;
    let s_hw = tape.sum_hw(x);
    let s = tape.sum_batch(s_hw);
    let mu = tape.scale(s, 1.0 / n);
    let centered = tape.sub_bcast(x, mu)?;
    let sq = tape.mul(centered, centered)?;
    let sq_hw = tape.sum_hw(sq);
    let sq_b = tape.sum_batch(sq_hw);
    let var = tape.scale(sq_b, 1.0 / n);
    let var_eps = tape.add_scalar(var, eps);
    let sigma = tape.sqrt(var_eps);
    let inv = tape.recip(sigma);
    tape.mul_bcast(centered, inv)
}

/// Affine-free instance normalization: per-`(b, c)` statistics over `(H, W)`.
pub fn instance_normalize_t(tape: &mut GradTape, x: Var, eps: f64) -> Result<Var> {
    let [_, _, h, w] = tape.shape(x);
    let n = (h * w) as f64;
    let s_hw = tape.sum_hw(x);
    let mu = tape.scale(s_hw, 1.0 / n);
    let centered = tape.sub_bcast(x, mu)?;
    let sq = tape.mul(centered, centered)?;
    let sq_hw = tape.sum_hw(sq);
    let var = tape.scale(sq_hw, 1.0 / n);
    let var_eps = tape.add_scalar(var, eps);
    let sigma = tape.sqrt(var_eps);
    let inv = tape.recip(sigma);
    tape.mul_bcast(centered, inv)
}

/// Eager batch normalization (no affine), for bias probes.
pub fn bn_apply(x: &Tensor, eps: f64) -> Tensor {
    let mut tape = GradTape::new();
    let v = tape.constant(x.clone());
    let out = batch_normalize_t(&mut tape, v, eps).expect("bn shapes");
    tape.value(out).clone()
}

/// Eager instance normalization (no affine), for bias probes.
pub fn in_apply(x: &Tensor, eps: f64) -> Tensor {
    let mut tape = GradTape::new();
    let v = tape.constant(x.clone());
    let out = instance_normalize_t(&mut tape, v, eps).expect("in shapes");
    tape.value(out).clone()
}

// ── Adaptive denormalization ─────────────────────────────────────────

/// AD parameters: a shared convolution over the one-hot label map feeding a
/// scale head and a shift head.
///
/// The scale head predicts an offset from 1, and both heads start at zero, so
/// a freshly initialized AD is the identity denormalization.
#[derive(Clone, Debug)]
pub struct AdParams {
    pub shared: ConvLayer,
    pub scale_head: ConvLayer,
    pub shift_head: ConvLayer,
}

/// Hidden width of the shared AD convolution.
pub const AD_HIDDEN: usize = 16;

impl AdParams {
    /// Builds AD for features with `channels` channels. The shared conv maps
    /// the 4 label classes to [`AD_HIDDEN`] channels with a random init; the
    /// heads are zero-initialized.
    pub fn init(set: &mut ParamSet, prefix: &str, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(AdParams {
            shared: ConvLayer::init(
                set,
                &format!("{prefix}.shared"),
                ConvSpec::same(AD_HIDDEN, 4, 3)?,
                Init::He,
                rng,
            ),
            scale_head: ConvLayer::init(
                set,
                &format!("{prefix}.scale_head"),
                ConvSpec::same(channels, AD_HIDDEN, 3)?,
                Init::Zero,
                rng,
            ),
            shift_head: ConvLayer::init(
                set,
                &format!("{prefix}.shift_head"),
                ConvSpec::same(channels, AD_HIDDEN, 3)?,
                Init::Zero,
                rng,
            ),
        })
    }
}

/// Adaptive denormalization: `out = normalized * (1 + scale(P)) + shift(P)`
/// with per-pixel maps predicted from the one-hot label map.
pub fn ad_forward_t(
    tape: &mut GradTape,
    normalized: Var,
    one_hot: Var,
    params: &AdParams,
    vars: &[Var],
) -> Result<Var> {
    let ns = tape.shape(normalized);
    let os = tape.shape(one_hot);
    if os[2] != ns[2] || os[3] != ns[3] {
        return Err(Error::shape(
            "ad label resolution",
            format!("{}x{}", ns[2], ns[3]),
            format!("{}x{}", os[2], os[3]),
        ));
    }
    let hidden = params.shared.forward(tape, vars, one_hot)?;
    let scale_offset = params.scale_head.forward(tape, vars, hidden)?;
    let shift = params.shift_head.forward(tape, vars, hidden)?;
    let scale = tape.add_scalar(scale_offset, 1.0);
    let scaled = tape.mul(normalized, scale)?;
    tape.add(scaled, shift)
}

/// SN followed by AD.
pub fn snad_layer_t(
    tape: &mut GradTape,
    x: Var,
    masks: &BatchMasks,
    params: &AdParams,
    vars: &[Var],
    eps: f64,
) -> Result<Var> {
    let one_hot = tape.constant(masks.one_hot.clone());
    let normalized = sn_forward_t(tape, x, &masks.foreground, &masks.background, eps)?;
    ad_forward_t(tape, normalized, one_hot, params, vars)
}

/// Which normalization runs inside a SNAD layer; the ablation axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Separable,
    Batch,
    Instance,
}

impl NormMode {
    pub fn as_str(self) -> &'static str {
        match self {
            NormMode::Separable => "sn-ad",
            NormMode::Batch => "bn-ad",
            NormMode::Instance => "in-ad",
        }
    }
}

/// Normalization-then-AD with a selectable normalizer.
pub fn norm_ad_forward_t(
    tape: &mut GradTape,
    x: Var,
    masks: &BatchMasks,
    params: &AdParams,
    vars: &[Var],
    eps: f64,
    mode: NormMode,
) -> Result<Var> {
    let one_hot = tape.constant(masks.one_hot.clone());
    let normalized = match mode {
        NormMode::Separable => sn_forward_t(tape, x, &masks.foreground, &masks.background, eps)?,
        NormMode::Batch => batch_normalize_t(tape, x, eps)?,
        NormMode::Instance => instance_normalize_t(tape, x, eps)?,
    };
    ad_forward_t(tape, normalized, one_hot, params, vars)
}

/// Batch-normalization + AD baseline.
pub fn bn_ad_forward_t(
    tape: &mut GradTape,
    x: Var,
    masks: &BatchMasks,
    params: &AdParams,
    vars: &[Var],
    eps: f64,
) -> Result<Var> {
    norm_ad_forward_t(tape, x, masks, params, vars, eps, NormMode::Batch)
}

/// Instance-normalization + AD baseline.
pub fn in_ad_forward_t(
    tape: &mut GradTape,
    x: Var,
    masks: &BatchMasks,
    params: &AdParams,
    vars: &[Var],
    eps: f64,
) -> Result<Var> {
    norm_ad_forward_t(tape, x, masks, params, vars, eps, NormMode::Instance)
}

// ── SNAD block ───────────────────────────────────────────────────────

/// One decoder block: two SNAD layers interleaved with convolutions, a skip
/// concatenation of the first SNAD output, then a 2x upsampling stage.
#[derive(Clone, Debug)]
pub struct SnadBlockParams {
    pub snad1: AdParams,
    pub snad2: AdParams,
    pub conv_a: ConvLayer,
    pub conv_b: ConvLayer,
    pub upsample: ConvTransposeLayer,
    pub conv_out: ConvLayer,
    pub norm_mode: NormMode,
}

impl SnadBlockParams {
    pub fn init(
        set: &mut ParamSet,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        norm_mode: NormMode,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mid = in_channels;
        Ok(SnadBlockParams {
            snad1: AdParams::init(set, &format!("{prefix}.snad1"), in_channels, rng)?,
            snad2: AdParams::init(set, &format!("{prefix}.snad2"), mid, rng)?,
            conv_a: ConvLayer::init(
                set,
                &format!("{prefix}.conv_a"),
                ConvSpec::same(mid, in_channels, 3)?,
                Init::He,
                rng,
            ),
            conv_b: ConvLayer::init(
                set,
                &format!("{prefix}.conv_b"),
                ConvSpec::same(mid, mid, 3)?,
                Init::He,
                rng,
            ),
            // kernel 4 / stride 2 / pad 1 doubles the spatial size exactly.
            upsample: ConvTransposeLayer::init(
                set,
                &format!("{prefix}.upsample"),
                mid + in_channels,
                out_channels,
                4,
                2,
                1,
                Init::He,
                rng,
            ),
            conv_out: ConvLayer::init(
                set,
                &format!("{prefix}.conv_out"),
                ConvSpec::same(out_channels, out_channels, 3)?,
                Init::He,
                rng,
            ),
            norm_mode,
        })
    }
}

/// Runs a SNAD block: `(SNAD -> ReLU -> conv) x2`, concatenate the first
/// SNAD output, then `ReLU -> transposed conv (stride 2) -> conv`. Spatial
/// dims double.
pub fn snad_block_t(
    tape: &mut GradTape,
    x: Var,
    masks: &BatchMasks,
    params: &SnadBlockParams,
    vars: &[Var],
    eps: f64,
) -> Result<Var> {
    let mode = params.norm_mode;
    let s1 = norm_ad_forward_t(tape, x, masks, &params.snad1, vars, eps, mode)?;
    let r1 = tape.relu(s1);
    let a = params.conv_a.forward(tape, vars, r1)?;
    let s2 = norm_ad_forward_t(tape, a, masks, &params.snad2, vars, eps, mode)?;
    let r2 = tape.relu(s2);
    let b = params.conv_b.forward(tape, vars, r2)?;
    let cat = tape.concat_channels(&[b, s1])?;
    let r3 = tape.relu(cat);
    let up = params.upsample.forward(tape, vars, r3)?;
    params.conv_out.forward(tape, vars, up)
}

// ── Decomposition oracle ─────────────────────────────────────────────

/// Residuals of the whole-slice mean/variance composition identity.
#[derive(Clone, Copy, Debug)]
pub struct DecompositionResiduals {
    pub mean_residual: f64,
    pub var_residual: f64,
}

/// Checks, by brute force over one `(1, 1, H, W)` slice, that the whole-slice
/// mean and variance decompose into the masked region statistics:
///
/// ```text
/// mu      = (n_b/n) mu_b + (n_f/n) mu_f
/// sigma^2 = (n_f/n) s_f^2 + (n_b/n) s_b^2 + (n_f n_b / n^2)(mu_b - mu_f)^2
/// ```
///
/// Both regions must be nonempty.
pub fn decomposition_oracle(x: &Tensor, mask: &Tensor) -> Result<DecompositionResiduals> {
    let [b, c, h, w] = x.shape();
    if b != 1 || c != 1 {
        return Err(Error::shape(
            "decomposition slice",
            "(1, 1, H, W)",
            format!("{:?}", x.shape()),
        ));
    }
    check_mask_shape(x, mask, "decomposition mask")?;

    let n = (h * w) as f64;
    let mut n_f = 0.0;
    for v in mask.data() {
        n_f += v;
    }
    let n_b = n - n_f;
    if n_f == 0.0 {
        return Err(Error::EmptyRegion("foreground has no pixels"));
    }
    if n_b == 0.0 {
        return Err(Error::EmptyRegion("background has no pixels"));
    }

    // Whole-slice moments, straight off the raw data.
    let mu: f64 = x.data().iter().sum::<f64>() / n;
    let var: f64 = x.data().iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;

    let inv_mask = mask.map(|m| 1.0 - m);
    let fg = masked_mean_var(x, mask)?;
    let bg = masked_mean_var(x, &inv_mask)?;
    let (mu_f, var_f) = (fg.mean[0], fg.var[0]);
    let (mu_b, var_b) = (bg.mean[0], bg.var[0]);

    let composed_mu = (n_b / n) * mu_b + (n_f / n) * mu_f;
    let composed_var = (n_f / n) * var_f
        + (n_b / n) * var_b
        + (n_f * n_b / (n * n)) * (mu_b - mu_f) * (mu_b - mu_f);

    Ok(DecompositionResiduals {
        mean_residual: (mu - composed_mu).abs(),
        var_residual: (var - composed_var).abs(),
    })
}

// ── Normalization-bias probe ─────────────────────────────────────────

/// Worst per-region residual mean left behind by each normalizer.
#[derive(Clone, Copy, Debug)]
pub struct BiasProbe {
    pub sn: f64,
    pub bn: f64,
    pub instance: f64,
}

/// Measures how much per-region mean each normalizer leaves behind: after
/// normalizing `x`, the bias is the largest masked-mean magnitude over both
/// regions and all `(b, c)` slices.
pub fn region_bias_probe(x: &Tensor, fg: &Tensor, bg: &Tensor, eps: f64) -> Result<BiasProbe> {
    let (sn_out, _) = sn_apply(x, fg, bg, eps, SnVariant::Standardize)?;
    let bn_out = bn_apply(x, eps);
    let in_out = in_apply(x, eps);
    let bias = |t: &Tensor| -> Result<f64> {
        let mut worst = 0.0f64;
        for mask in [fg, bg] {
            let stats = masked_mean_var(t, mask)?;
            for (slot, &m) in stats.mean.iter().enumerate() {
                if !stats.empty[slot] {
                    worst = worst.max(m.abs());
                }
            }
        }
        Ok(worst)
    };
    Ok(BiasProbe {
        sn: bias(&sn_out)?,
        bn: bias(&bn_out)?,
        instance: bias(&in_out)?,
    })
}

// ── Spectral normalization ───────────────────────────────────────────

/// Floor applied to the singular-value estimate before dividing.
pub const SIGMA_FLOOR: f64 = 1e-12;

/// Persistent left-singular-vector estimate for one weight matrix.
#[derive(Clone, Debug)]
pub struct SpectralState {
    pub u: Vec<f64>,
}

impl SpectralState {
    /// Random unit vector of the given length.
    pub fn init(rows: usize, seed: u64) -> Self {
        let mut rng = stream(seed, "spectral-u");
        let mut u: Vec<f64> = (0..rows).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for v in &mut u {
            *v /= norm;
        }
        SpectralState { u }
    }
}

/// Power-iteration estimate of the top singular value, with the witness pair.
#[derive(Clone, Debug)]
pub struct SpectralEstimate {
    pub sigma: f64,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

/// Runs `iters` power iterations on the `(rows, numel/rows)` reshape of
/// `weight`, updating `state.u` in place.
pub fn power_iterate(weight: &Tensor, state: &mut SpectralState, iters: usize) -> SpectralEstimate {
    let rows = weight.shape()[0];
    let cols = weight.numel() / rows;
    let w = weight.data();
    debug_assert_eq!(state.u.len(), rows, "spectral state size");

    let mut u = state.u.clone();
    let mut v = vec![0.0; cols];
    for _ in 0..iters {
        // v = normalize(W^T u)
        for (j, slot) in v.iter_mut().enumerate() {
            let mut acc = 0.0;
            for i in 0..rows {
                acc += w[i * cols + j] * u[i];
            }
            *slot = acc;
        }
        if !normalize(&mut v) {
            return SpectralEstimate {
                sigma: 0.0,
                u,
                v,
            };
        }
        // u = normalize(W v)
        for (i, slot) in u.iter_mut().enumerate() {
            let mut acc = 0.0;
            for j in 0..cols {
                acc += w[i * cols + j] * v[j];
            }
            *slot = acc;
        }
        if !normalize(&mut u) {
            return SpectralEstimate {
                sigma: 0.0,
                u,
                v,
            };
        }
    }
    let mut sigma = 0.0;
    for i in 0..rows {
        for j in 0..cols {
            sigma += u[i] * w[i * cols + j] * v[j];
        }
    }
    state.u = u.clone();
    SpectralEstimate { sigma, u, v }
}

fn normalize(v: &mut [f64]) -> bool {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-300 {
        return false;
    }
    for x in v.iter_mut() {
        *x /= norm;
    }
    true
}

/// Divides `weight` by the power-iteration estimate of its top singular
/// value (floored at [`SIGMA_FLOOR`]); `state.u` persists across calls. A
/// zero matrix comes back unchanged.
pub fn spectral_normalize(
    weight: &Tensor,
    state: &mut SpectralState,
    iters: usize,
) -> (Tensor, SpectralEstimate) {
    let mut est = power_iterate(weight, state, iters);
    if est.sigma < SIGMA_FLOOR {
        est.sigma = SIGMA_FLOOR;
    }
    (weight.scale(1.0 / est.sigma), est)
}

/// Random matrix with a planted dominant direction: Gaussian entries plus a
/// rank-1 spike at `spike` times the unit noise scale.
///
/// Plain iid matrices have their top singular values clustered at the bulk
/// edge, so no fixed small iteration count can pin the top one to 1%; a
/// spike restores the spectral gap that power iteration's convergence rate
/// depends on, matching the decaying spectra of trained layers. Used by the
/// spectral verification suites.
pub fn spiked_matrix(rows: usize, cols: usize, spike: f64, seed: u64) -> Tensor {
    let mut rng = stream(seed, "spiked-matrix");
    let noise = crate::rng::normal_tensor([rows, cols, 1, 1], &mut rng, 1.0 / (cols as f64).sqrt());
    let mut a: Vec<f64> = (0..rows).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    let mut b: Vec<f64> = (0..cols).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    normalize(&mut a);
    normalize(&mut b);
    Tensor::from_fn([rows, cols, 1, 1], |i, j, _, _| {
        noise.at(i, j, 0, 0) + spike * a[i] * b[j]
    })
}

/// Brute-force top singular value via cyclic Jacobi on the smaller Gram
/// matrix. Independent of the power-iteration path; used as its oracle.
pub fn jacobi_top_singular_value(weight: &Tensor) -> f64 {
    let rows = weight.shape()[0];
    let cols = weight.numel() / rows;
    let w = weight.data();
    // Gram on the smaller side keeps the eigenproblem tiny.
    let k = rows.min(cols);
    let mut g = vec![0.0f64; k * k];
    if rows <= cols {
        for a in 0..k {
            for b in a..k {
                let mut acc = 0.0;
                for j in 0..cols {
                    acc += w[a * cols + j] * w[b * cols + j];
                }
                g[a * k + b] = acc;
                g[b * k + a] = acc;
            }
        }
    } else {
        for a in 0..k {
            for b in a..k {
                let mut acc = 0.0;
                for i in 0..rows {
                    acc += w[i * cols + a] * w[i * cols + b];
                }
                g[a * k + b] = acc;
                g[b * k + a] = acc;
            }
        }
    }

    // Cyclic Jacobi sweeps until the off-diagonal mass is negligible.
    for _ in 0..100 {
        let mut off = 0.0f64;
        for p in 0..k {
            for q in (p + 1)..k {
                off = off.max(g[p * k + q].abs());
            }
        }
        let scale = (0..k).map(|i| g[i * k + i].abs()).fold(1e-300, f64::max);
        if off <= 1e-14 * scale {
            break;
        }
        for p in 0..k {
            for q in (p + 1)..k {
                let apq = g[p * k + q];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = g[p * k + p];
                let aqq = g[q * k + q];
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for i in 0..k {
                    if i == p || i == q {
                        continue;
                    }
                    let aip = g[i * k + p];
                    let aiq = g[i * k + q];
                    g[i * k + p] = c * aip - s * aiq;
                    g[p * k + i] = g[i * k + p];
                    g[i * k + q] = s * aip + c * aiq;
                    g[q * k + i] = g[i * k + q];
                }
                g[p * k + p] = app - t * apq;
                g[q * k + q] = aqq + t * apq;
                g[p * k + q] = 0.0;
                g[q * k + p] = 0.0;
            }
        }
    }
    let top = (0..k).map(|i| g[i * k + i]).fold(0.0f64, f64::max);
    top.max(0.0).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradient, check_gradient_multi};
    use crate::testutil::{rand_tensor, rng};

    fn halves_masks(b: usize, h: usize, w: usize) -> (Tensor, Tensor) {
        let fg = Tensor::from_fn([b, 1, h, w], |_, _, hh, _| if hh < h / 2 { 1.0 } else { 0.0 });
        let bg = fg.map(|v| 1.0 - v);
        (fg, bg)
    }

    #[test]
    fn constant_regions_normalize_to_zero() {
        let (fg, bg) = halves_masks(1, 6, 6);
        let x = Tensor::from_fn([1, 2, 6, 6], |_, _, h, _| if h < 3 { 5.0 } else { 2.0 });
        let (out, _) = sn_apply(&x, &fg, &bg, DEFAULT_EPS, SnVariant::Standardize).unwrap();
        assert!(out.max_abs() < 1e-12, "max {}", out.max_abs());
    }

    #[test]
    fn masked_moments_are_standard_after_sn() {
        let mut r = rng(71);
        let x = rand_tensor([2, 3, 8, 8], &mut r);
        let (fg, bg) = halves_masks(2, 8, 8);
        let (out, _) = sn_apply(&x, &fg, &bg, DEFAULT_EPS, SnVariant::Standardize).unwrap();
        for mask in [&fg, &bg] {
            let stats = masked_mean_var(&out, mask).unwrap();
            for slot in 0..stats.mean.len() {
                assert!(stats.mean[slot].abs() < 1e-10, "mean {}", stats.mean[slot]);
                assert!(
                    (stats.var[slot] - 1.0).abs() < 1e-3,
                    "var {}",
                    stats.var[slot]
                );
            }
        }
    }

    #[test]
    fn whole_slice_is_standard_after_sn() {
        let mut r = rng(72);
        let x = rand_tensor([1, 1, 16, 16], &mut r);
        let (fg, bg) = halves_masks(1, 16, 16);
        let (out, _) = sn_apply(&x, &fg, &bg, DEFAULT_EPS, SnVariant::Standardize).unwrap();
        let mu = out.mean();
        let var = out.data().iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / out.numel() as f64;
        assert!(mu.abs() < 1e-10, "mu {mu}");
        assert!((var - 1.0).abs() < 1e-3, "var {var}");
        // And the composition identity holds on the normalized slice.
        let res = decomposition_oracle(&out, &fg).unwrap();
        assert!(res.mean_residual < 1e-9 && res.var_residual < 1e-9);
    }

    #[test]
    fn squared_residual_variant_fails_to_center() {
        // The comparison flag: keeping the square on the centered term does
        // not produce zero-mean output, which is why it is not the
        // production path.
        let mut r = rng(73);
        let x = rand_tensor([1, 1, 8, 8], &mut r);
        let (fg, bg) = halves_masks(1, 8, 8);
        let (out, _) = sn_apply(&x, &fg, &bg, DEFAULT_EPS, SnVariant::SquaredResidual).unwrap();
        let stats = masked_mean_var(&out, &fg).unwrap();
        assert!(
            stats.mean[0].abs() > 1e-3,
            "squared variant unexpectedly centered: {}",
            stats.mean[0]
        );
    }

    #[test]
    fn empty_region_passes_through_as_zeros() {
        let x = Tensor::full([1, 1, 4, 4], 3.0);
        let fg = Tensor::full([1, 1, 4, 4], 1.0);
        let bg = Tensor::zeros([1, 1, 4, 4]);
        let (out, stats) = sn_apply(&x, &fg, &bg, DEFAULT_EPS, SnVariant::Standardize).unwrap();
        assert!(stats.background.empty.iter().all(|&e| e));
        assert_eq!(stats.background.mean[0], 0.0);
        assert_eq!(stats.background.var[0], 1.0);
        // Constant foreground standardizes to zero; empty background adds zero.
        assert!(out.max_abs() < 1e-12);
    }

    #[test]
    fn mask_shape_mismatch_rejected() {
        let x = Tensor::zeros([1, 1, 4, 4]);
        let fg = Tensor::zeros([1, 1, 2, 2]);
        let bg = Tensor::zeros([1, 1, 2, 2]);
        assert!(sn_apply(&x, &fg, &bg, DEFAULT_EPS, SnVariant::Standardize).is_err());
    }

    #[test]
    fn tape_and_eager_sn_agree() {
        let mut r = rng(74);
        let x = rand_tensor([2, 2, 6, 6], &mut r);
        let (fg, bg) = halves_masks(2, 6, 6);
        let (eager, _) = sn_apply(&x, &fg, &bg, DEFAULT_EPS, SnVariant::Standardize).unwrap();
        let mut tape = GradTape::new();
        let xv = tape.constant(x);
        let out = sn_forward_t(&mut tape, xv, &fg, &bg, DEFAULT_EPS).unwrap();
        let diff = tape.value(out).sub(&eager).unwrap().max_abs();
        assert!(diff < 1e-12, "eager/tape drift {diff}");
    }

    #[test]
    fn sn_gradient_matches_fd() {
        let mut r = rng(75);
        let x = rand_tensor([1, 2, 4, 4], &mut r);
        let (fg, bg) = halves_masks(1, 4, 4);
        let err = check_gradient(
            |tape, v| {
                let n = sn_forward_t(tape, v, &fg, &bg, DEFAULT_EPS)?;
                let w = tape.sigmoid(n);
                Ok(tape.mean_all(w))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn sn_carries_no_trainable_parameters() {
        let mut tape = GradTape::new();
        let x = tape.constant(rand_tensor([1, 2, 4, 4], &mut rng(76)));
        let (fg, bg) = halves_masks(1, 4, 4);
        sn_forward_t(&mut tape, x, &fg, &bg, DEFAULT_EPS).unwrap();
        assert_eq!(tape.param_count(), 0);
    }

    fn batch_masks_for(b: usize, s: usize) -> BatchMasks {
        use crate::masks::{LabelMap, MaskPyramid, RegionClass};
        let mut labels = Vec::new();
        for i in 0..b {
            let mut map = LabelMap::filled(s, s, RegionClass::Back);
            for y in 0..s {
                for x in 0..s {
                    if (x + y + i) % 3 == 0 {
                        map.set_class(x, y, RegionClass::Skin);
                    } else if (x * y + i) % 5 == 0 {
                        map.set_class(x, y, RegionClass::Facial);
                    } else if y < s / 4 {
                        map.set_class(x, y, RegionClass::Hair);
                    }
                }
            }
            labels.push(map);
        }
        let pyr = MaskPyramid::build(&labels, &[s]).unwrap();
        pyr.at(s).unwrap().clone()
    }

    #[test]
    fn ad_is_identity_at_init() {
        let mut r = rng(77);
        let masks = batch_masks_for(1, 4);
        let mut set = ParamSet::new();
        let params = AdParams::init(&mut set, "ad", 2, &mut r).unwrap();
        let x = rand_tensor([1, 2, 4, 4], &mut r);

        let mut tape = GradTape::new();
        let vars = set.register(&mut tape);
        let xv = tape.constant(x.clone());
        let oh = tape.constant(masks.one_hot.clone());
        let out = ad_forward_t(&mut tape, xv, oh, &params, &vars).unwrap();
        let diff = tape.value(out).sub(&x).unwrap().max_abs();
        assert!(diff < 1e-15, "identity drift {diff}");
    }

    #[test]
    fn ad_scale_zero_returns_shift_only() {
        // Forcing the effective scale to zero (offset head = -1) makes the
        // output ignore the normalized features entirely.
        let mut r = rng(78);
        let masks = batch_masks_for(1, 4);
        let mut set = ParamSet::new();
        let params = AdParams::init(&mut set, "ad", 2, &mut r).unwrap();
        *set.get_mut(params.scale_head.bias) = Tensor::full([1, 2, 1, 1], -1.0);
        let shift = Tensor::full([1, 2, 1, 1], 0.25);
        *set.get_mut(params.shift_head.bias) = shift;

        let x = rand_tensor([1, 2, 4, 4], &mut r);
        let mut tape = GradTape::new();
        let vars = set.register(&mut tape);
        let xv = tape.constant(x);
        let oh = tape.constant(masks.one_hot.clone());
        let out = ad_forward_t(&mut tape, xv, oh, &params, &vars).unwrap();
        for v in tape.value(out).data() {
            assert!((v - 0.25).abs() < 1e-12, "{v}");
        }
    }

    #[test]
    fn ad_resolution_mismatch_rejected() {
        let mut r = rng(79);
        let masks = batch_masks_for(1, 8);
        let mut set = ParamSet::new();
        let params = AdParams::init(&mut set, "ad", 2, &mut r).unwrap();
        let mut tape = GradTape::new();
        let vars = set.register(&mut tape);
        let x = tape.constant(rand_tensor([1, 2, 4, 4], &mut r));
        let oh = tape.constant(masks.one_hot.clone());
        assert!(ad_forward_t(&mut tape, x, oh, &params, &vars).is_err());
    }

    #[test]
    fn ad_gradients_match_fd() {
        let mut r = rng(80);
        let masks = batch_masks_for(1, 4);
        let mut set = ParamSet::new();
        let params = AdParams::init(&mut set, "ad", 2, &mut r).unwrap();
        // Nudge the heads off the zero init so their gradients are generic.
        *set.get_mut(params.scale_head.weight) = rand_tensor([2, AD_HIDDEN, 3, 3], &mut r).scale(0.1);
        *set.get_mut(params.shift_head.weight) = rand_tensor([2, AD_HIDDEN, 3, 3], &mut r).scale(0.1);

        let x = rand_tensor([1, 2, 4, 4], &mut r);
        let points: Vec<Tensor> = set.iter().map(|e| e.value.clone()).collect();
        let err = check_gradient_multi(
            |tape, vars| {
                let xv = tape.constant(x.clone());
                let oh = tape.constant(masks.one_hot.clone());
                let out = ad_forward_t(tape, xv, oh, &params, vars)?;
                let sq = tape.mul(out, out)?;
                Ok(tape.mean_all(sq))
            },
            &points,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn snad_layer_composes_sn_then_ad() {
        let mut r = rng(81);
        let masks = batch_masks_for(1, 4);
        let mut set = ParamSet::new();
        let params = AdParams::init(&mut set, "snad", 2, &mut r).unwrap();
        let x = rand_tensor([1, 2, 4, 4], &mut r);

        let mut tape = GradTape::new();
        let vars = set.register(&mut tape);
        let xv = tape.constant(x.clone());
        let out = snad_layer_t(&mut tape, xv, &masks, &params, &vars, DEFAULT_EPS).unwrap();

        // With identity AD the layer equals bare SN.
        let (sn_only, _) = sn_apply(
            &x,
            &masks.foreground,
            &masks.background,
            DEFAULT_EPS,
            SnVariant::Standardize,
        )
        .unwrap();
        let diff = tape.value(out).sub(&sn_only).unwrap().max_abs();
        assert!(diff < 1e-12, "{diff}");

        // Feeding the output through a second layer keeps the shape contract.
        let out2 = snad_layer_t(&mut tape, out, &masks, &params, &vars, DEFAULT_EPS).unwrap();
        assert_eq!(tape.shape(out2), [1, 2, 4, 4]);
    }

    #[test]
    fn snad_layer_gradient_matches_fd() {
        let mut r = rng(82);
        let masks = batch_masks_for(1, 4);
        let mut set = ParamSet::new();
        let params = AdParams::init(&mut set, "snad", 2, &mut r).unwrap();
        let x = rand_tensor([1, 2, 4, 4], &mut r);
        let err = check_gradient(
            |tape, v| {
                let vars: Vec<Var> = set.register(tape);
                let out = snad_layer_t(tape, v, &masks, &params, &vars, DEFAULT_EPS)?;
                let s = tape.sigmoid(out);
                Ok(tape.mean_all(s))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn block_doubles_spatial_size() {
        let mut r = rng(83);
        let masks = batch_masks_for(1, 4);
        let mut set = ParamSet::new();
        let params =
            SnadBlockParams::init(&mut set, "block", 8, 4, NormMode::Separable, &mut r).unwrap();
        let mut tape = GradTape::new();
        let vars = set.register(&mut tape);
        let x = tape.constant(rand_tensor([1, 8, 4, 4], &mut r));
        let out = snad_block_t(&mut tape, x, &masks, &params, &vars, DEFAULT_EPS).unwrap();
        assert_eq!(tape.shape(out), [1, 4, 8, 8]);
    }

    #[test]
    fn block_maps_zero_to_zero() {
        let mut r = rng(84);
        let masks = batch_masks_for(1, 4);
        let mut set = ParamSet::new();
        let params =
            SnadBlockParams::init(&mut set, "block", 4, 4, NormMode::Separable, &mut r).unwrap();
        let mut tape = GradTape::new();
        let vars = set.register(&mut tape);
        let x = tape.constant(Tensor::zeros([1, 4, 4, 4]));
        let out = snad_block_t(&mut tape, x, &masks, &params, &vars, DEFAULT_EPS).unwrap();
        assert!(tape.value(out).max_abs() < 1e-12);
    }

    #[test]
    fn block_gradient_matches_fd() {
        let mut r = rng(85);
        let masks = batch_masks_for(1, 4);
        let mut set = ParamSet::new();
        let params =
            SnadBlockParams::init(&mut set, "block", 3, 2, NormMode::Separable, &mut r).unwrap();
        let x = rand_tensor([1, 3, 4, 4], &mut r);
        let err = check_gradient(
            |tape, v| {
                let vars = set.register(tape);
                let out = snad_block_t(tape, v, &masks, &params, &vars, DEFAULT_EPS)?;
                let s = tape.sigmoid(out);
                Ok(tape.mean_all(s))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn instance_norm_zeroes_constant_tensors() {
        let x = Tensor::full([2, 3, 4, 4], 0.8);
        let out = in_apply(&x, DEFAULT_EPS);
        assert!(out.max_abs() < 1e-12);
    }

    #[test]
    fn bn_leaves_region_bias_on_mixed_batches() {
        // Two constant-but-different images: BN centers the batch, so each
        // image keeps a nonzero offset, the bias SN removes.
        let mut x = Tensor::zeros([2, 1, 4, 4]);
        for h in 0..4 {
            for w in 0..4 {
                x.set(0, 0, h, w, 1.0);
                x.set(1, 0, h, w, 3.0);
            }
        }
        let out = bn_apply(&x, DEFAULT_EPS);
        // mu = 2, sigma = 1 (+eps): image one ~ -1, image two ~ +1.
        assert!((out.at(0, 0, 0, 0) + 1.0).abs() < 1e-3);
        assert!((out.at(1, 0, 0, 0) - 1.0).abs() < 1e-3);
    }

    #[test]
    fn bias_ordering_sn_below_in_below_bn() {
        // Region means differ by >= 1 and per-sample magnitudes differ, so
        // batch statistics are the most wrong, instance statistics are
        // intermediate, and separable statistics are exact.
        let mut r = rng(86);
        let (fg, bg) = halves_masks(2, 8, 8);
        let x = Tensor::from_fn([2, 1, 8, 8], |b, _, h, _| {
            let noise = (crate::rng::uniform_tensor([1, 1, 1, 1], &mut r, -0.05, 0.05)).item();
            let scale = if b == 0 { 1.0 } else { 3.0 };
            if h < 4 {
                scale + noise
            } else {
                -scale + noise
            }
        });
        let probe = region_bias_probe(&x, &fg, &bg, DEFAULT_EPS).unwrap();
        assert!(probe.sn < 1e-8, "sn bias {}", probe.sn);
        assert!(probe.sn < probe.instance, "{probe:?}");
        assert!(probe.instance <= probe.bn, "{probe:?}");
    }

    #[test]
    fn decomposition_residuals_vanish() {
        let mut r = rng(87);
        for _ in 0..100 {
            let x = rand_tensor([1, 1, 16, 16], &mut r).scale(3.0);
            let mask = Tensor::from_fn([1, 1, 16, 16], |_, _, h, w| {
                if (h * 31 + w * 17) % 3 == 0 {
                    1.0
                } else {
                    0.0
                }
            });
            let res = decomposition_oracle(&x, &mask).unwrap();
            assert!(res.mean_residual < 1e-9, "{}", res.mean_residual);
            assert!(res.var_residual < 1e-9, "{}", res.var_residual);
        }
    }

    #[test]
    fn decomposition_requires_both_regions() {
        let x = Tensor::zeros([1, 1, 4, 4]);
        assert!(decomposition_oracle(&x, &Tensor::zeros([1, 1, 4, 4])).is_err());
        assert!(decomposition_oracle(&x, &Tensor::full([1, 1, 4, 4], 1.0)).is_err());
    }

    #[test]
    fn matched_region_statistics_have_no_cross_term() {
        // When both regions carry the same values, the means match and the
        // cross term contributes nothing: variance is the weighted average.
        let x = Tensor::from_fn([1, 1, 4, 4], |_, _, h, w| ((h * 4 + w) % 4) as f64);
        let mask = Tensor::from_fn([1, 1, 4, 4], |_, _, h, _| if h % 2 == 0 { 1.0 } else { 0.0 });
        let fg = masked_mean_var(&x, &mask).unwrap();
        let inv = mask.map(|m| 1.0 - m);
        let bg = masked_mean_var(&x, &inv).unwrap();
        assert!((fg.mean[0] - bg.mean[0]).abs() < 1e-12);
        let res = decomposition_oracle(&x, &mask).unwrap();
        assert!(res.var_residual < 1e-12);
    }

    #[test]
    fn power_iteration_nails_diagonal_spectrum() {
        // diag(3, 1): top singular value is exactly 3.
        let w = Tensor::from_vec([2, 2, 1, 1], vec![3.0, 0.0, 0.0, 1.0]).unwrap();
        let mut state = SpectralState::init(2, 0);
        let (normalized, est) = spectral_normalize(&w, &mut state, 10);
        assert!((est.sigma - 3.0).abs() < 1e-6, "sigma {}", est.sigma);
        let top = jacobi_top_singular_value(&normalized);
        assert!((top - 1.0).abs() < 1e-6, "normalized top {top}");
    }

    #[test]
    fn orthogonal_matrix_is_nearly_unchanged() {
        let theta: f64 = 0.7;
        let w = Tensor::from_vec(
            [2, 2, 1, 1],
            vec![theta.cos(), -theta.sin(), theta.sin(), theta.cos()],
        )
        .unwrap();
        let mut state = SpectralState::init(2, 1);
        let (normalized, est) = spectral_normalize(&w, &mut state, 20);
        assert!((est.sigma - 1.0).abs() < 1e-9);
        let drift = normalized.sub(&w).unwrap().max_abs();
        assert!(drift < 1e-9, "{drift}");
    }

    #[test]
    fn zero_matrix_returned_unchanged() {
        let w = Tensor::zeros([3, 2, 1, 1]);
        let mut state = SpectralState::init(3, 2);
        let (normalized, est) = spectral_normalize(&w, &mut state, 5);
        assert_eq!(est.sigma, SIGMA_FLOOR);
        assert_eq!(normalized, w);
    }

    #[test]
    fn jacobi_matches_hand_svd() {
        // [[3, 0], [4, 0]] has singular values (5, 0).
        let w = Tensor::from_vec([2, 2, 1, 1], vec![3.0, 0.0, 4.0, 0.0]).unwrap();
        assert!((jacobi_top_singular_value(&w) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn power_iteration_tracks_jacobi_on_random_matrices() {
        for trial in 0..20u64 {
            let rows = 4 + (trial as usize % 13);
            let cols = 9 + ((trial as usize * 3) % 28);
            let w = spiked_matrix(rows, cols, 4.0, 500 + trial);
            let mut state = SpectralState::init(rows, trial);
            let (normalized, _) = spectral_normalize(&w, &mut state, 5);
            let top = jacobi_top_singular_value(&normalized);
            assert!(
                (0.99..=1.01).contains(&top),
                "trial {trial}: normalized top {top}"
            );
        }
    }
}
