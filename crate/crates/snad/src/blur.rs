//! Motion-blur kernels and the degradation model `y = x (*) k + noise`.
//!
//! Two kernel families: a straight-line kernel (sub-pixel bilinear splatting
//! of unit-spaced points along a direction) and a trajectory kernel that
//! rasterizes a seeded 2‑D random walk with inertia, Gaussian jitter and
//! rare impulsive direction changes. Both normalize to unit mass. Blurring
//! uses edge-replicate padding so borders keep their brightness, and clamps
//! to `[0, 1]` after the seeded Gaussian noise, matching 8-bit semantics.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::stream;
use crate::tensor::{conv2d, ConvSpec, PadMode, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Where a kernel came from.
#[derive(Clone, Debug, PartialEq)]
pub enum KernelKind {
    /// Single-tap identity kernel.
    Identity,
    /// Straight line through the center at the given angle (degrees).
    Linear { angle_degrees: f64 },
    /// Rasterized random walk.
    Trajectory { seed: u64 },
}

/// Odd-sized, nonnegative, unit-mass point spread function.
#[derive(Clone, Debug, PartialEq)]
pub struct BlurKernel {
    size: usize,
    weights: Vec<f64>,
    pub kind: KernelKind,
}

impl BlurKernel {
    /// Side length (always odd).
    pub fn size(&self) -> usize {
        self.size
    }

    /// Row-major `size * size` weights.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.size + col]
    }

    /// The 1x1 kernel that leaves images untouched.
    pub fn identity() -> Self {
        BlurKernel {
            size: 1,
            weights: vec![1.0],
            kind: KernelKind::Identity,
        }
    }

    /// `(1, 1, k, k)` tensor view of the weights.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec([1, 1, self.size, self.size], self.weights.clone()).expect("kernel size")
    }

    /// Grayscale visualization with weights scaled by `255 / max`.
    pub fn to_image(&self) -> Image {
        let peak = self.weights.iter().cloned().fold(0.0, f64::max).max(1e-300);
        let mut img = Image::new(self.size, self.size, 1).expect("1 channel");
        for r in 0..self.size {
            for c in 0..self.size {
                img.set_sample(c, r, 0, (self.at(r, c) / peak * 255.0).round() as u8);
            }
        }
        img
    }

    fn from_unnormalized(size: usize, mut weights: Vec<f64>, kind: KernelKind) -> Self {
        let total: f64 = weights.iter().sum();
        debug_assert!(total > 0.0, "kernel collected no mass");
        for w in &mut weights {
            *w /= total;
        }
        BlurKernel {
            size,
            weights,
            kind,
        }
    }
}

/// Splats unit mass at a continuous point into the 2x2 neighboring cells.
fn splat(weights: &mut [f64], size: usize, row: f64, col: f64, mass: f64) {
    let r0 = row.floor();
    let c0 = col.floor();
    let tr = row - r0;
    let tc = col - c0;
    for (dr, dc, w) in [
        (0.0, 0.0, (1.0 - tr) * (1.0 - tc)),
        (0.0, 1.0, (1.0 - tr) * tc),
        (1.0, 0.0, tr * (1.0 - tc)),
        (1.0, 1.0, tr * tc),
    ] {
        let r = r0 + dr;
        let c = c0 + dc;
        if r >= 0.0 && c >= 0.0 && (r as usize) < size && (c as usize) < size && w > 0.0 {
            weights[r as usize * size + c as usize] += mass * w;
        }
    }
}

/// Straight-line motion kernel: `size` points at unit spacing along the
/// direction `angle_degrees`, bilinearly splatted and normalized to sum 1.
///
/// At angle 0 the points land on integer cells, so a size-3 kernel is exactly
/// `(1/3, 1/3, 1/3)` across the middle row.
pub fn linear_kernel(size: usize, angle_degrees: f64) -> Result<BlurKernel> {
    if size.is_multiple_of(2) || size < 3 {
        return Err(Error::InvalidArgument {
            what: "linear kernel size",
            detail: format!("must be odd and >= 3, got {size}"),
        });
    }
    let theta = angle_degrees.to_radians();
    let (dy, dx) = (-theta.sin(), theta.cos());
    let center = (size as f64 - 1.0) / 2.0;
    let mut weights = vec![0.0; size * size];
    for i in 0..size {
        let t = i as f64 - center;
        splat(&mut weights, size, center + t * dy, center + t * dx, 1.0);
    }
    Ok(BlurKernel::from_unnormalized(
        size,
        weights,
        KernelKind::Linear {
            angle_degrees,
        },
    ))
}

/// Random-walk parameters behind [`trajectory_kernel`].
#[derive(Clone, Debug)]
pub struct TrajectoryParams {
    pub steps: usize,
    /// Velocity carry-over per step.
    pub inertia: f64,
    /// Per-step Gaussian jitter, as a fraction of the kernel size.
    pub jitter_scale: f64,
    /// Probability of an impulsive direction change at a step.
    pub impulse_prob: f64,
}

impl Default for TrajectoryParams {
    fn default() -> Self {
        TrajectoryParams {
            steps: 64,
            inertia: 0.7,
            jitter_scale: 0.3,
            impulse_prob: 0.05,
        }
    }
}

/// A continuous 2-D camera-shake path.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub points: Vec<(f64, f64)>,
    pub params: TrajectoryParams,
}

impl Trajectory {
    /// Simulates the walk for a kernel of the given size.
    pub fn simulate(seed: u64, size: usize, params: TrajectoryParams) -> Self {
        let mut rng = stream(seed, "trajectory");
        let sigma = params.jitter_scale * size as f64 / (params.steps as f64).sqrt();
        let normal = Normal::new(0.0, sigma).expect("positive sigma");
        let mut points = Vec::with_capacity(params.steps + 1);
        let mut pos = (0.0f64, 0.0f64);
        let mut vel = (0.0f64, 0.0f64);
        points.push(pos);
        for _ in 0..params.steps {
            let jitter = (normal.sample(&mut rng), normal.sample(&mut rng));
            vel.0 = params.inertia * vel.0 + jitter.0;
            vel.1 = params.inertia * vel.1 + jitter.1;
            if rng.random::<f64>() < params.impulse_prob {
                // Re-aim the accumulated speed in a fresh direction.
                let speed = (vel.0 * vel.0 + vel.1 * vel.1).sqrt();
                let phi = rng.random::<f64>() * std::f64::consts::TAU;
                vel = (speed * phi.cos(), speed * phi.sin());
            }
            pos.0 += vel.0;
            pos.1 += vel.1;
            points.push(pos);
        }
        Trajectory { points, params }
    }

    /// Centers the path on its centroid and scales it to sit inside the
    /// kernel grid, then deposits mass along each segment.
    fn rasterize(&self, size: usize, kind: KernelKind) -> BlurKernel {
        let n = self.points.len() as f64;
        let cx = self.points.iter().map(|p| p.0).sum::<f64>() / n;
        let cy = self.points.iter().map(|p| p.1).sum::<f64>() / n;
        let max_extent = self
            .points
            .iter()
            .map(|p| (p.0 - cx).abs().max((p.1 - cy).abs()))
            .fold(0.0, f64::max);
        let half = (size as f64 - 1.0) / 2.0;
        let scale = 0.85 * half / max_extent.max(1e-9);
        let center = half;
        let mapped: Vec<(f64, f64)> = self
            .points
            .iter()
            .map(|p| (center + (p.0 - cx) * scale, center + (p.1 - cy) * scale))
            .collect();

        let mut weights = vec![0.0; size * size];
        for pair in mapped.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            let len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
            let substeps = (len / 0.5).ceil().max(1.0) as usize;
            for s in 0..substeps {
                let t = (s as f64 + 0.5) / substeps as f64;
                let x = a.0 + (b.0 - a.0) * t;
                let y = a.1 + (b.1 - a.1) * t;
                // Mass proportional to segment length: uniform speed deposit.
                splat(&mut weights, size, y, x, len / substeps as f64);
            }
        }
        BlurKernel::from_unnormalized(size, weights, kind)
    }
}

/// Seeded trajectory kernel with an odd size drawn from `size_range`
/// (inclusive). Deterministic per seed.
pub fn trajectory_kernel(seed: u64, size_range: (usize, usize)) -> Result<BlurKernel> {
    trajectory_kernel_with(seed, size_range, TrajectoryParams::default())
}

pub fn trajectory_kernel_with(
    seed: u64,
    size_range: (usize, usize),
    params: TrajectoryParams,
) -> Result<BlurKernel> {
    let (lo, hi) = size_range;
    if lo % 2 == 0 || hi % 2 == 0 || lo < 3 || hi < lo {
        return Err(Error::InvalidArgument {
            what: "trajectory size range",
            detail: format!("need odd lo <= hi with lo >= 3, got [{lo}, {hi}]"),
        });
    }
    let mut size_rng = stream(seed, "kernel-size");
    let choices = (hi - lo) / 2 + 1;
    let size = lo + 2 * size_rng.random_range(0..choices);
    let traj = Trajectory::simulate(seed, size, params);
    Ok(traj.rasterize(size, KernelKind::Trajectory { seed }))
}

/// Applies `y = clamp(x (*) k + eta, 0, 1)` with edge-replicate padding and
/// `eta ~ N(0, sigma^2)` drawn from `stream(seed, "blur-noise")`.
///
/// `clean` is `(B, C, H, W)` in `[0, 1]`; the same kernel blurs every channel.
pub fn apply_blur(clean: &Tensor, kernel: &BlurKernel, noise_sigma: f64, seed: u64) -> Result<Tensor> {
    if noise_sigma < 0.0 {
        return Err(Error::InvalidArgument {
            what: "noise sigma",
            detail: format!("must be >= 0, got {noise_sigma}"),
        });
    }
    let channels = clean.channels();
    let k = kernel.size();
    let spec = ConvSpec::depthwise(channels, k, (k - 1) / 2)?.with_pad_mode(PadMode::Replicate);
    let weights = Tensor::from_fn([channels, 1, k, k], |_, _, r, c| kernel.at(r, c));
    let mut out = conv2d(clean, &spec, &weights, None)?;

    if noise_sigma > 0.0 {
        let mut rng = stream(seed, "blur-noise");
        let normal = Normal::new(0.0, noise_sigma).expect("positive sigma");
        for v in out.data_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    Ok(out.map(|v| v.clamp(0.0, 1.0)))
}

/// Anisotropic total variation: sum of absolute horizontal and vertical
/// neighbor differences over all `(b, c)` slices.
pub fn total_variation(t: &Tensor) -> f64 {
    let [b, c, h, w] = t.shape();
    let mut tv = 0.0;
    for bi in 0..b {
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    if wi + 1 < w {
                        tv += (t.at(bi, ci, hi, wi + 1) - t.at(bi, ci, hi, wi)).abs();
                    }
                    if hi + 1 < h {
                        tv += (t.at(bi, ci, hi + 1, wi) - t.at(bi, ci, hi, wi)).abs();
                    }
                }
            }
        }
    }
    tv
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::uniform_tensor;
    use crate::testutil::rng;

    #[test]
    fn horizontal_line_is_exact_thirds() {
        let k = linear_kernel(3, 0.0).unwrap();
        for c in 0..3 {
            assert!((k.at(1, c) - 1.0 / 3.0).abs() < 1e-12);
        }
        for r in [0, 2] {
            for c in 0..3 {
                assert_eq!(k.at(r, c), 0.0);
            }
        }
    }

    #[test]
    fn diagonal_kernel_lives_on_the_antidiagonal_band() {
        let k = linear_kernel(25, 45.0).unwrap();
        let total: f64 = k.weights().iter().sum();
        assert!((total - 1.0).abs() < 1e-6);
        let mut off_band = 0.0;
        for r in 0..25 {
            for c in 0..25 {
                // 45 degrees with y up means mass along r + c = 24.
                if (r as isize + c as isize - 24).unsigned_abs() > 1 {
                    off_band += k.at(r, c);
                }
            }
        }
        assert!(off_band < 1e-12, "mass off the band: {off_band}");
    }

    #[test]
    fn any_linear_kernel_is_normalized() {
        for (size, angle) in [(3, 13.0), (5, 90.0), (25, 45.0), (9, -30.5), (13, 77.3)] {
            let k = linear_kernel(size, angle).unwrap();
            let total: f64 = k.weights().iter().sum();
            assert!((total - 1.0).abs() < 1e-6, "size {size} angle {angle}");
            assert!(k.weights().iter().all(|&w| w >= 0.0));
        }
    }

    #[test]
    fn even_size_rejected() {
        assert!(linear_kernel(4, 0.0).is_err());
    }

    #[test]
    fn trajectory_is_deterministic() {
        let a = trajectory_kernel(7, (13, 29)).unwrap();
        let b = trajectory_kernel(7, (13, 29)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn trajectory_paths_are_finite_with_enough_points() {
        for seed in 0..20 {
            let t = Trajectory::simulate(seed, 21, TrajectoryParams::default());
            assert!(t.points.len() >= 2);
            assert!(t.points.iter().all(|p| p.0.is_finite() && p.1.is_finite()));
        }
    }

    #[test]
    fn trajectory_kernels_meet_contracts() {
        for seed in 0..200 {
            let k = trajectory_kernel(seed, (13, 29)).unwrap();
            assert!(k.size() % 2 == 1 && (13..=29).contains(&k.size()));
            let total: f64 = k.weights().iter().sum();
            assert!((total - 1.0).abs() < 1e-6, "seed {seed}: sum {total}");
            assert!(k.weights().iter().all(|&w| w >= 0.0));
        }
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let x = uniform_tensor([1, 3, 8, 8], &mut rng(51), 0.0, 1.0);
        let y = apply_blur(&x, &BlurKernel::identity(), 0.0, 0).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn constant_image_stays_constant() {
        let x = Tensor::full([1, 3, 16, 16], 0.42);
        let k = trajectory_kernel(3, (13, 15)).unwrap();
        let y = apply_blur(&x, &k, 0.0, 0).unwrap();
        for v in y.data() {
            assert!((v - 0.42).abs() < 1e-9, "{v}");
        }
    }

    #[test]
    fn noise_is_reproducible() {
        let x = uniform_tensor([1, 3, 8, 8], &mut rng(52), 0.0, 1.0);
        let k = linear_kernel(5, 45.0).unwrap();
        let a = apply_blur(&x, &k, 0.03, 99).unwrap();
        let b = apply_blur(&x, &k, 0.03, 99).unwrap();
        assert_eq!(a.data(), b.data());
        let c = apply_blur(&x, &k, 0.03, 100).unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn negative_sigma_rejected() {
        let x = Tensor::zeros([1, 1, 4, 4]);
        assert!(apply_blur(&x, &BlurKernel::identity(), -0.1, 0).is_err());
    }

    #[test]
    fn blur_contracts_total_variation() {
        let mut r = rng(53);
        for trial in 0..50 {
            let x = uniform_tensor([1, 1, 24, 24], &mut r, 0.0, 1.0);
            let k = trajectory_kernel(trial, (13, 17)).unwrap();
            let y = apply_blur(&x, &k, 0.0, 0).unwrap();
            assert!(
                total_variation(&y) <= total_variation(&x) + 1e-9,
                "trial {trial}"
            );
        }
    }

    #[test]
    fn mean_preserved_on_large_random_images() {
        // Border re-weighting from replicate padding is the only mean leak;
        // it shrinks roughly like 1/size. At 192 the worst drift over the
        // full kernel size range measures ~5e-4, inside the 1e-3 budget.
        let mut r = rng(54);
        for trial in 0..5 {
            let x = uniform_tensor([1, 1, 192, 192], &mut r, 0.0, 1.0);
            let k = trajectory_kernel(trial, (13, 29)).unwrap();
            let y = apply_blur(&x, &k, 0.0, 0).unwrap();
            assert!(
                (x.mean() - y.mean()).abs() < 1e-3,
                "trial {trial}: drift {}",
                (x.mean() - y.mean()).abs()
            );
        }
    }
}
