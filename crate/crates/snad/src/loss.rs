//! Training objectives: focal, multi-region reconstruction, texture, and
//! relativistic adversarial losses.
//!
//! Every loss has a differentiable tape form (`*_t`) and, where a plain
//! number is handy, an eager wrapper that runs a scratch tape. The weighted
//! totals use the published coefficients: reconstruction regions at
//! 12/10/8/6, adversarial heads at 0.2/0.4/0.8/1.0 ordered by growing
//! receptive field, and the generator total `120 * rec + 0.1 * adv + tex`.

use crate::error::{Error, Result};
use crate::masks::{BatchMasks, LabelMap, RegionClass};
use crate::tape::{GradTape, Var};
use crate::tensor::Tensor;

/// Probability floor inside the focal log.
pub const FOCAL_PROB_FLOOR: f64 = 1e-12;

/// Every loss coefficient in one bundle.
#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    /// Reconstruction region weights.
    pub rec_skin: f64,
    pub rec_facial: f64,
    pub rec_hair: f64,
    pub rec_back: f64,
    /// Adversarial head weights, by receptive field: the 8x8 patch map sees
    /// the least context, the global head the most.
    pub adv_patch8: f64,
    pub adv_patch4: f64,
    pub adv_patch2: f64,
    pub adv_global: f64,
    /// Generator total: `total_rec * rec + total_adv * adv + tex`.
    pub total_rec: f64,
    pub total_adv: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            rec_skin: 12.0,
            rec_facial: 10.0,
            rec_hair: 8.0,
            rec_back: 6.0,
            adv_patch8: 0.2,
            adv_patch4: 0.4,
            adv_patch2: 0.8,
            adv_global: 1.0,
            total_rec: 120.0,
            total_adv: 0.1,
            focal_alpha: 1.0,
            focal_gamma: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.rec_skin,
            self.rec_facial,
            self.rec_hair,
            self.rec_back,
            self.adv_patch8,
            self.adv_patch4,
            self.adv_patch2,
            self.adv_global,
            self.total_rec,
            self.total_adv,
            self.focal_alpha,
        ];
        if !all.iter().all(|&w| w > 0.0) {
            return Err(Error::InvalidArgument {
                what: "loss weights",
                detail: "all weights must be > 0".into(),
            });
        }
        Ok(())
    }

    fn rec_weight(&self, class: RegionClass) -> f64 {
        match class {
            RegionClass::Skin => self.rec_skin,
            RegionClass::Facial => self.rec_facial,
            RegionClass::Hair => self.rec_hair,
            RegionClass::Back => self.rec_back,
        }
    }
}

/// The discriminator's four outputs: three patch logit maps plus one global
/// scalar logit. Generic so it can carry tape variables or plain tensors.
#[derive(Clone, Debug)]
pub struct DiscOutputs<T> {
    /// `(B, 1, 8, 8)` at the reference input size.
    pub patch8: T,
    /// `(B, 1, 4, 4)`.
    pub patch4: T,
    /// `(B, 1, 2, 2)`.
    pub patch2: T,
    /// `(B, 1, 1, 1)`.
    pub global: T,
}

impl<T> DiscOutputs<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> DiscOutputs<U> {
        DiscOutputs {
            patch8: f(&self.patch8),
            patch4: f(&self.patch4),
            patch2: f(&self.patch2),
            global: f(&self.global),
        }
    }
}

// ── Focal loss ───────────────────────────────────────────────────────

/// Focal loss value plus the number of probability floor hits.
#[derive(Clone, Copy, Debug)]
pub struct FocalOutcome {
    pub loss: f64,
    pub clamped: usize,
}

/// Differentiable focal loss `-alpha (1 - p_t)^gamma log(p_t)` averaged over
/// pixels, where `p_t` is the probability assigned to the true class.
/// Returns the loss variable and how many pixels hit the probability floor.
pub fn focal_loss_t(
    tape: &mut GradTape,
    probs: Var,
    one_hot: &Tensor,
    alpha: f64,
    gamma: f64,
) -> Result<(Var, usize)> {
    let ps = tape.shape(probs);
    if one_hot.shape() != ps {
        return Err(Error::shape(
            "focal one-hot labels",
            format!("{ps:?}"),
            format!("{:?}", one_hot.shape()),
        ));
    }
    let labels = tape.constant(one_hot.clone());
    let picked = tape.mul(probs, labels)?;
    let p_true = tape.sum_chan(picked);
    let clamped = tape
        .value(p_true)
        .data()
        .iter()
        .filter(|&&p| p <= FOCAL_PROB_FLOOR)
        .count();
    let floored = tape.clamp_min(p_true, FOCAL_PROB_FLOOR);
    let log_p = tape.log(floored);
    let neg_p = tape.scale(floored, -1.0);
    let one_minus = tape.add_scalar(neg_p, 1.0);
    let focus = tape.pow_const(one_minus, gamma);
    let weighted = tape.mul(focus, log_p)?;
    let scaled = tape.scale(weighted, -alpha);
    Ok((tape.mean_all(scaled), clamped))
}

/// Eager focal loss for a single labeled image. `probs` is `(1, 4, H, W)`
/// with per-pixel class distributions in `(0, 1]` summing to 1.
pub fn focal_loss(probs: &Tensor, labels: &LabelMap, alpha: f64, gamma: f64) -> Result<FocalOutcome> {
    let [b, c, h, w] = probs.shape();
    if b != 1 || c != 4 || h != labels.height || w != labels.width {
        return Err(Error::shape(
            "focal probabilities",
            format!("(1, 4, {}, {})", labels.height, labels.width),
            format!("{:?}", probs.shape()),
        ));
    }
    for hh in 0..h {
        for ww in 0..w {
            let row: f64 = (0..4).map(|cc| probs.at(0, cc, hh, ww)).sum();
            if (row - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidArgument {
                    what: "focal probabilities",
                    detail: format!("row at ({hh}, {ww}) sums to {row}, expected 1"),
                });
            }
        }
    }
    let one_hot = labels.one_hot();
    let mut tape = GradTape::new();
    let p = tape.constant(probs.clone());
    let (loss, clamped) = focal_loss_t(&mut tape, p, &one_hot, alpha, gamma)?;
    Ok(FocalOutcome {
        loss: tape.value(loss).item(),
        clamped,
    })
}

// ── Multi-region reconstruction loss ─────────────────────────────────

/// One region's term: per sample, the masked L1 difference summed over
/// channels and pixels, divided by `(mask pixels x channels)`, then averaged
/// over the batch. A uniform offset of `delta` inside the region therefore
/// contributes exactly `delta`. Samples with an empty region contribute 0.
fn region_term_t(tape: &mut GradTape, generated: Var, target: Var, region: &Tensor) -> Result<Var> {
    let [batch, channels, h, w] = tape.shape(generated);
    let mask_b = region.batch();
    let mut coef = Tensor::zeros([mask_b, 1, 1, 1]);
    for b in 0..mask_b {
        let mut n = 0.0;
        for hh in 0..h {
            for ww in 0..w {
                n += region.at(b, 0, hh, ww);
            }
        }
        let v = if n == 0.0 { 0.0 } else { 1.0 / (n * channels as f64) };
        coef.set(b, 0, 0, 0, v);
    }
    let m = tape.constant(region.clone());
    let diff = tape.sub(generated, target)?;
    let a = tape.abs(diff);
    let masked = tape.mul_chan(a, m)?;
    let per_bc = tape.sum_hw(masked);
    let per_b = tape.sum_chan(per_bc);
    let coef_v = tape.constant(coef);
    let scaled = tape.mul_bcast(per_b, coef_v)?;
    let total = tape.sum_all(scaled);
    Ok(tape.scale(total, 1.0 / batch as f64))
}

/// Weighted multi-region reconstruction loss over the four label regions.
pub fn region_rec_loss_t(
    tape: &mut GradTape,
    generated: Var,
    target: Var,
    masks: &BatchMasks,
    weights: &LossWeights,
) -> Result<Var> {
    if tape.shape(generated) != tape.shape(target) {
        return Err(Error::shape(
            "reconstruction operands",
            format!("{:?}", tape.shape(generated)),
            format!("{:?}", tape.shape(target)),
        ));
    }
    let mut total: Option<Var> = None;
    for class in RegionClass::ALL {
        let term = region_term_t(tape, generated, target, masks.region(class))?;
        let weighted = tape.scale(term, weights.rec_weight(class));
        total = Some(match total {
            Some(t) => tape.add(t, weighted)?,
            None => weighted,
        });
    }
    Ok(total.expect("four regions"))
}

/// Eager form of [`region_rec_loss_t`].
pub fn region_rec_loss(
    generated: &Tensor,
    target: &Tensor,
    masks: &BatchMasks,
    weights: &LossWeights,
) -> Result<f64> {
    let mut tape = GradTape::new();
    let g = tape.constant(generated.clone());
    let t = tape.constant(target.clone());
    let loss = region_rec_loss_t(&mut tape, g, t, masks, weights)?;
    Ok(tape.value(loss).item())
}

// ── Texture loss ─────────────────────────────────────────────────────

/// Sum over color channels (and stages) of the mean absolute difference
/// between extracted and predicted texture maps.
pub fn texture_loss_t(tape: &mut GradTape, targets: &[Tensor], predictions: &[Var]) -> Result<Var> {
    if targets.len() != predictions.len() || targets.is_empty() {
        return Err(Error::InvalidArgument {
            what: "texture loss stages",
            detail: format!(
                "need matching nonzero counts, got {} targets / {} predictions",
                targets.len(),
                predictions.len()
            ),
        });
    }
    let mut total: Option<Var> = None;
    for (target, &pred) in targets.iter().zip(predictions) {
        let ps = tape.shape(pred);
        if target.shape() != ps {
            return Err(Error::shape(
                "texture stage",
                format!("{:?}", target.shape()),
                format!("{ps:?}"),
            ));
        }
        let [b, _, h, w] = ps;
        let t = tape.constant(target.clone());
        let diff = tape.sub(pred, t)?;
        let a = tape.abs(diff);
        let s = tape.sum_all(a);
        // Mean over batch and pixels, summed over channels.
        let term = tape.scale(s, 1.0 / (b * h * w) as f64);
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    Ok(total.expect("nonempty stages"))
}

/// Eager form of [`texture_loss_t`] for equal-length stage lists.
pub fn texture_loss(targets: &[Tensor], predictions: &[Tensor]) -> Result<f64> {
    let mut tape = GradTape::new();
    let preds: Vec<Var> = predictions.iter().map(|p| tape.constant(p.clone())).collect();
    let loss = texture_loss_t(&mut tape, targets, &preds)?;
    Ok(tape.value(loss).item())
}

// ── Relativistic adversarial losses ──────────────────────────────────

/// `-E[log sigmoid(a - b)]` for one head, with patch maps averaged over
/// their spatial logits. Computed as `mean(softplus(b - a))`.
fn relativistic_head_t(tape: &mut GradTape, a: Var, b: Var) -> Result<Var> {
    let diff = tape.sub(a, b)?;
    let neg = tape.scale(diff, -1.0);
    let sp = tape.softplus(neg);
    Ok(tape.mean_all(sp))
}

/// Generator-side relativistic loss: pushes fake logits above real logits on
/// every head; heads weighted by receptive field.
pub fn relativistic_g_loss_t(
    tape: &mut GradTape,
    d_fake: &DiscOutputs<Var>,
    d_real: &DiscOutputs<Var>,
    weights: &LossWeights,
) -> Result<Var> {
    relativistic_weighted_t(tape, d_fake, d_real, weights)
}

/// Discriminator-side relativistic loss: the same expression with the roles
/// swapped inside the sigmoid.
pub fn relativistic_d_loss_t(
    tape: &mut GradTape,
    d_fake: &DiscOutputs<Var>,
    d_real: &DiscOutputs<Var>,
    weights: &LossWeights,
) -> Result<Var> {
    relativistic_weighted_t(tape, d_real, d_fake, weights)
}

fn relativistic_weighted_t(
    tape: &mut GradTape,
    favored: &DiscOutputs<Var>,
    other: &DiscOutputs<Var>,
    weights: &LossWeights,
) -> Result<Var> {
    let heads = [
        (favored.patch8, other.patch8, weights.adv_patch8),
        (favored.patch4, other.patch4, weights.adv_patch4),
        (favored.patch2, other.patch2, weights.adv_patch2),
        (favored.global, other.global, weights.adv_global),
    ];
    let mut total: Option<Var> = None;
    for (a, b, w) in heads {
        let head = relativistic_head_t(tape, a, b)?;
        let weighted = tape.scale(head, w);
        total = Some(match total {
            Some(t) => tape.add(t, weighted)?,
            None => weighted,
        });
    }
    Ok(total.expect("four heads"))
}

/// Eager generator-side relativistic loss over plain tensors.
pub fn relativistic_g_loss(
    d_fake: &DiscOutputs<Tensor>,
    d_real: &DiscOutputs<Tensor>,
    weights: &LossWeights,
) -> Result<f64> {
    let mut tape = GradTape::new();
    let f = d_fake.map(|t| tape.constant(t.clone()));
    let r = d_real.map(|t| tape.constant(t.clone()));
    let loss = relativistic_g_loss_t(&mut tape, &f, &r, weights)?;
    Ok(tape.value(loss).item())
}

/// Eager discriminator-side relativistic loss over plain tensors.
pub fn relativistic_d_loss(
    d_fake: &DiscOutputs<Tensor>,
    d_real: &DiscOutputs<Tensor>,
    weights: &LossWeights,
) -> Result<f64> {
    let mut tape = GradTape::new();
    let f = d_fake.map(|t| tape.constant(t.clone()));
    let r = d_real.map(|t| tape.constant(t.clone()));
    let loss = relativistic_d_loss_t(&mut tape, &f, &r, weights)?;
    Ok(tape.value(loss).item())
}

// ── Totals ───────────────────────────────────────────────────────────

/// Generator total: `total_rec * rec + total_adv * adv + tex`.
pub fn generator_total(rec: f64, adv: f64, tex: f64, weights: &LossWeights) -> f64 {
    weights.total_rec * rec + weights.total_adv * adv + tex
}

/// Tape form of [`generator_total`].
pub fn generator_total_t(
    tape: &mut GradTape,
    rec: Var,
    adv: Var,
    tex: Var,
    weights: &LossWeights,
) -> Result<Var> {
    let r = tape.scale(rec, weights.total_rec);
    let a = tape.scale(adv, weights.total_adv);
    let ra = tape.add(r, a)?;
    tape.add(ra, tex)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradient, check_gradient_multi};
    use crate::masks::{LabelMap, MaskPyramid};
    use crate::testutil::{rand_tensor, rng};
    use rand::Rng;

    fn labeled_batch(b: usize, s: usize) -> (Vec<LabelMap>, BatchMasks) {
        let mut labels = Vec::new();
        for i in 0..b {
            let mut map = LabelMap::filled(s, s, RegionClass::Back);
            for y in 0..s {
                for x in 0..s {
                    match (x + 2 * y + i) % 4 {
                        0 => map.set_class(x, y, RegionClass::Skin),
                        1 => map.set_class(x, y, RegionClass::Facial),
                        2 => map.set_class(x, y, RegionClass::Hair),
                        _ => {}
                    }
                }
            }
            labels.push(map);
        }
        let masks = MaskPyramid::build(&labels, &[s]).unwrap().at(s).unwrap().clone();
        (labels, masks)
    }

    fn random_probs(s: usize, rng: &mut impl Rng) -> Tensor {
        let raw = Tensor::from_fn([1, 4, s, s], |_, _, _, _| rng.random::<f64>() + 0.1);
        let mut out = Tensor::zeros([1, 4, s, s]);
        for h in 0..s {
            for w in 0..s {
                let total: f64 = (0..4).map(|c| raw.at(0, c, h, w)).sum();
                for c in 0..4 {
                    out.set(0, c, h, w, raw.at(0, c, h, w) / total);
                }
            }
        }
        out
    }

    #[test]
    fn focal_is_zero_at_certainty() {
        let (labels, _) = labeled_batch(1, 4);
        let probs = labels[0].one_hot();
        // p_t = 1 has log 1 = 0 at every pixel.
        let out = focal_loss(&probs, &labels[0], 1.0, 2.0).unwrap();
        assert_eq!(out.loss, 0.0);
        assert_eq!(out.clamped, 0);
    }

    #[test]
    fn focal_half_probability_closed_form() {
        // One pixel with p_t = 0.5, alpha 1, gamma 2: 0.25 * ln 2.
        let map = LabelMap::filled(1, 1, RegionClass::Skin);
        let probs = Tensor::from_vec([1, 4, 1, 1], vec![0.5, 0.5, 0.0, 0.0]).unwrap();
        let out = focal_loss(&probs, &map, 1.0, 2.0).unwrap();
        assert!((out.loss - 0.25 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn focal_with_gamma_zero_is_cross_entropy() {
        let mut r = rng(101);
        let (labels, _) = labeled_batch(1, 6);
        let probs = random_probs(6, &mut r);
        let focal = focal_loss(&probs, &labels[0], 1.0, 0.0).unwrap().loss;
        // Hand cross-entropy.
        let mut ce = 0.0;
        for h in 0..6 {
            for w in 0..6 {
                let c = labels[0].class_at(w, h).channel();
                ce -= probs.at(0, c, h, w).ln();
            }
        }
        ce /= 36.0;
        assert!((focal - ce).abs() < 1e-12);
    }

    #[test]
    fn focal_floors_zero_probabilities() {
        let map = LabelMap::filled(1, 1, RegionClass::Back);
        let probs = Tensor::from_vec([1, 4, 1, 1], vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let out = focal_loss(&probs, &map, 1.0, 2.0).unwrap();
        assert_eq!(out.clamped, 1);
        assert!(out.loss.is_finite());
    }

    #[test]
    fn focal_gradient_matches_fd() {
        let mut r = rng(102);
        let (labels, _) = labeled_batch(1, 4);
        let one_hot = labels[0].one_hot();
        let probs = random_probs(4, &mut r);
        let err = check_gradient(
            |tape, p| {
                let (loss, _) = focal_loss_t(tape, p, &one_hot, 0.75, 2.0)?;
                Ok(loss)
            },
            &probs,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn rec_loss_zero_at_fixed_point() {
        let mut r = rng(103);
        let (_, masks) = labeled_batch(2, 8);
        let img = rand_tensor([2, 3, 8, 8], &mut r);
        let loss = region_rec_loss(&img, &img, &masks, &LossWeights::default()).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn rec_loss_uniform_offset_reads_back_weights() {
        // A uniform offset of delta in a single-region image yields exactly
        // weight * delta under the pixel-and-channel normalization.
        let labels = vec![LabelMap::filled(8, 8, RegionClass::Skin)];
        let masks = MaskPyramid::build(&labels, &[8]).unwrap().at(8).unwrap().clone();
        let target = Tensor::full([1, 3, 8, 8], 0.4);
        let generated = target.map(|v| v + 0.1);
        let loss = region_rec_loss(&generated, &target, &masks, &LossWeights::default()).unwrap();
        assert!((loss - 12.0 * 0.1).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn rec_loss_scales_linearly_with_weights() {
        let mut r = rng(104);
        let (_, masks) = labeled_batch(1, 8);
        let a = rand_tensor([1, 3, 8, 8], &mut r);
        let b = rand_tensor([1, 3, 8, 8], &mut r);
        let w1 = LossWeights::default();
        let mut w2 = w1;
        w2.rec_skin *= 2.0;
        w2.rec_facial *= 2.0;
        w2.rec_hair *= 2.0;
        w2.rec_back *= 2.0;
        let l1 = region_rec_loss(&a, &b, &masks, &w1).unwrap();
        let l2 = region_rec_loss(&a, &b, &masks, &w2).unwrap();
        assert!((l2 - 2.0 * l1).abs() < 1e-12);
    }

    #[test]
    fn rec_loss_empty_region_contributes_zero() {
        // All-skin label map: the other three regions are empty and guarded.
        let labels = vec![LabelMap::filled(4, 4, RegionClass::Skin)];
        let masks = MaskPyramid::build(&labels, &[4]).unwrap().at(4).unwrap().clone();
        let t = Tensor::full([1, 3, 4, 4], 0.5);
        let g = Tensor::full([1, 3, 4, 4], 0.9);
        let loss = region_rec_loss(&g, &t, &masks, &LossWeights::default()).unwrap();
        assert!((loss - 12.0 * 0.4).abs() < 1e-12);
    }

    #[test]
    fn rec_loss_gradient_matches_fd() {
        let mut r = rng(105);
        let (_, masks) = labeled_batch(1, 4);
        let target = rand_tensor([1, 3, 4, 4], &mut r);
        let gen = rand_tensor([1, 3, 4, 4], &mut r);
        let err = check_gradient(
            |tape, g| {
                let t = tape.constant(target.clone());
                region_rec_loss_t(tape, g, t, &masks, &LossWeights::default())
            },
            &gen,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn texture_loss_fixed_point_and_offset() {
        let mut r = rng(106);
        let t1 = rand_tensor([1, 3, 4, 4], &mut r);
        let t2 = rand_tensor([1, 3, 2, 2], &mut r);
        assert_eq!(
            texture_loss(&[t1.clone(), t2.clone()], &[t1.clone(), t2.clone()]).unwrap(),
            0.0
        );
        // Constant offset c: each channel term contributes |c| per stage.
        let c = 0.3;
        let l = texture_loss(std::slice::from_ref(&t1), &[t1.map(|v| v + c)]).unwrap();
        assert!((l - 3.0 * c).abs() < 1e-12, "{l}");
    }

    #[test]
    fn texture_loss_rejects_shape_mismatch() {
        let a = Tensor::zeros([1, 3, 4, 4]);
        let b = Tensor::zeros([1, 3, 2, 2]);
        assert!(texture_loss(&[a], &[b]).is_err());
    }

    #[test]
    fn texture_loss_gradient_is_sign_over_count() {
        let mut r = rng(107);
        let target = rand_tensor([1, 3, 4, 4], &mut r);
        let pred = rand_tensor([1, 3, 4, 4], &mut r);
        let mut tape = GradTape::new();
        let p = tape.param("pred", pred.clone());
        let loss = texture_loss_t(&mut tape, std::slice::from_ref(&target), &[p]).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.wrt(p);
        for i in 0..pred.numel() {
            let expected = (pred.data()[i] - target.data()[i]).signum() / 16.0;
            assert!((g.data()[i] - expected).abs() < 1e-12);
        }
        // And the finite-difference route agrees.
        let err = check_gradient(
            |tape, p| texture_loss_t(tape, std::slice::from_ref(&target), &[p]),
            &pred,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4);
    }

    fn const_outputs(v: f64) -> DiscOutputs<Tensor> {
        DiscOutputs {
            patch8: Tensor::full([1, 1, 8, 8], v),
            patch4: Tensor::full([1, 1, 4, 4], v),
            patch2: Tensor::full([1, 1, 2, 2], v),
            global: Tensor::full([1, 1, 1, 1], v),
        }
    }

    #[test]
    fn equal_logits_give_weighted_ln2() {
        let w = LossWeights::default();
        let loss = relativistic_g_loss(&const_outputs(0.7), &const_outputs(0.7), &w).unwrap();
        let expected = 2.4 * std::f64::consts::LN_2;
        assert!((loss - expected).abs() < 1e-9, "{loss} vs {expected}");
        // At equal logits the discriminator sees the same value.
        let d = relativistic_d_loss(&const_outputs(0.7), &const_outputs(0.7), &w).unwrap();
        assert!((d - loss).abs() < 1e-12);
    }

    #[test]
    fn dominant_fake_logits_drive_g_loss_to_zero() {
        let w = LossWeights::default();
        let loss = relativistic_g_loss(&const_outputs(40.0), &const_outputs(0.0), &w).unwrap();
        assert!(loss < 1e-12, "{loss}");
    }

    #[test]
    fn unit_gap_closed_form() {
        // Every head at fake - real = -1: each head softplus(1), total 2.4x.
        let w = LossWeights::default();
        let loss = relativistic_g_loss(&const_outputs(-1.0), &const_outputs(0.0), &w).unwrap();
        let softplus1 = (1.0f64.exp() + 1.0).ln();
        assert!((loss - 2.4 * softplus1).abs() < 1e-9, "{loss}");
    }

    #[test]
    fn swapping_arguments_turns_d_loss_into_g_loss() {
        let r = std::cell::RefCell::new(rng(108));
        let fake = const_outputs(0.0).map(|t| t.map(|_| r.borrow_mut().random::<f64>() - 0.5));
        let real = const_outputs(0.0).map(|t| t.map(|_| r.borrow_mut().random::<f64>() - 0.5));
        let w = LossWeights::default();
        let d = relativistic_d_loss(&fake, &real, &w).unwrap();
        let g_swapped = relativistic_g_loss(&real, &fake, &w).unwrap();
        assert!((d - g_swapped).abs() < 1e-15);
    }

    #[test]
    fn adversarial_gradients_match_fd() {
        let mut r = rng(109);
        let fake8 = rand_tensor([1, 1, 8, 8], &mut r);
        let fake4 = rand_tensor([1, 1, 4, 4], &mut r);
        let fake2 = rand_tensor([1, 1, 2, 2], &mut r);
        let fakeg = rand_tensor([1, 1, 1, 1], &mut r);
        let real = [
            rand_tensor([1, 1, 8, 8], &mut r),
            rand_tensor([1, 1, 4, 4], &mut r),
            rand_tensor([1, 1, 2, 2], &mut r),
            rand_tensor([1, 1, 1, 1], &mut r),
        ];
        let w = LossWeights::default();
        let err = check_gradient_multi(
            |tape, vars| {
                let fake = DiscOutputs {
                    patch8: vars[0],
                    patch4: vars[1],
                    patch2: vars[2],
                    global: vars[3],
                };
                let realv = DiscOutputs {
                    patch8: tape.constant(real[0].clone()),
                    patch4: tape.constant(real[1].clone()),
                    patch2: tape.constant(real[2].clone()),
                    global: tape.constant(real[3].clone()),
                };
                relativistic_d_loss_t(tape, &fake, &realv, &w)
            },
            &[fake8, fake4, fake2, fakeg],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn generator_total_reads_back_exact_weights() {
        let w = LossWeights::default();
        assert_eq!(generator_total(0.0, 0.0, 0.0, &w), 0.0);
        let total = generator_total(1.0, 1.0, 1.0, &w);
        assert!((total - 121.1).abs() < 1e-12, "{total}");
        // Linear in each argument.
        let t2 = generator_total(2.0, 1.0, 1.0, &w);
        assert!((t2 - total - 120.0).abs() < 1e-12);
    }
}
