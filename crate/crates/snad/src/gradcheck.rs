//! Finite-difference verification of tape gradients.
//!
//! Every differentiable operation in this crate is expected to agree with a
//! central-difference probe to a relative error below `1e-4` in double
//! precision. The checker here is the oracle for that contract: it evaluates
//! the function twice per probed coordinate and compares against the tape's
//! analytic gradient, scoring `|analytic - central| / max(1, |central|)`.

use crate::error::{Error, Result};
use crate::tape::{GradTape, Var};
use crate::tensor::Tensor;
use rand::seq::index::sample;
use rand::Rng;

/// A scalar-valued differentiable function of several tensor inputs.
///
/// The closure receives a fresh tape and one variable per input and must
/// return the scalar loss variable.
pub trait ScalarFn: Fn(&mut GradTape, &[Var]) -> Result<Var> {}
impl<F: Fn(&mut GradTape, &[Var]) -> Result<Var>> ScalarFn for F {}

fn eval_value(f: &impl ScalarFn, points: &[Tensor]) -> Result<f64> {
    let mut tape = GradTape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.constant(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let v = tape.value(loss);
    if !v.is_scalar() {
        return Err(Error::NonScalarLoss(v.shape()));
    }
    Ok(v.item())
}

fn eval_gradients(f: &impl ScalarFn, points: &[Tensor]) -> Result<Vec<Tensor>> {
    let mut tape = GradTape::new();
    let vars: Vec<Var> = points
        .iter()
        .enumerate()
        .map(|(i, p)| tape.param(&format!("input{i}"), p.clone()))
        .collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    Ok(vars.iter().map(|&v| grads.wrt(v)).collect())
}

/// Checks the tape gradient of `f` at `point` against central differences on
/// every coordinate. Returns the maximum relative error.
pub fn check_gradient(
    f: impl Fn(&mut GradTape, Var) -> Result<Var>,
    point: &Tensor,
    step: f64,
) -> Result<f64> {
    let wrapped = |tape: &mut GradTape, vars: &[Var]| f(tape, vars[0]);
    check_gradient_multi(wrapped, std::slice::from_ref(point), step)
}

/// Multi-input variant of [`check_gradient`]; probes every coordinate of
/// every input.
pub fn check_gradient_multi(f: impl ScalarFn, points: &[Tensor], step: f64) -> Result<f64> {
    let coords: Vec<(usize, usize)> = points
        .iter()
        .enumerate()
        .flat_map(|(i, p)| (0..p.numel()).map(move |j| (i, j)))
        .collect();
    check_coords(&f, points, step, &coords)
}

/// Probes a random sample of coordinates per input instead of all of them.
/// Intended for whole-network checks where exhaustive probing is wasteful.
pub fn check_gradient_sampled(
    f: impl ScalarFn,
    points: &[Tensor],
    step: f64,
    probes_per_input: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    let mut coords = Vec::new();
    for (i, p) in points.iter().enumerate() {
        let n = p.numel();
        if n <= probes_per_input {
            coords.extend((0..n).map(|j| (i, j)));
        } else {
            let picks = sample(rng, n, probes_per_input);
            coords.extend(picks.iter().map(|j| (i, j)));
        }
    }
    check_coords(&f, points, step, &coords)
}

fn check_coords(
    f: &impl ScalarFn,
    points: &[Tensor],
    step: f64,
    coords: &[(usize, usize)],
) -> Result<f64> {
    let analytic = eval_gradients(f, points)?;
    let mut worst = 0.0f64;
    for &(input, coord) in coords {
        let mut plus = points.to_vec();
        plus[input].data_mut()[coord] += step;
        let fp = eval_value(f, &plus)?;
        let mut minus = points.to_vec();
        minus[input].data_mut()[coord] -= step;
        let fm = eval_value(f, &minus)?;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFiniteProbe { coord });
        }
        let central = (fp - fm) / (2.0 * step);
        let a = analytic[input].data()[coord];
        let rel = (a - central).abs() / central.abs().max(1.0);
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{rand_tensor, rng};

    #[test]
    fn sum_of_squares_matches_closed_form() {
        // f(x) = sum x^2 has gradient 2x; the tape and the probes agree to
        // far better than the op-level budget.
        let point = rand_tensor([1, 2, 3, 3], &mut rng(21));
        let err = check_gradient(
            |tape, x| {
                let sq = tape.mul(x, x)?;
                Ok(tape.sum_all(sq))
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "rel err {err}");
    }

    #[test]
    fn composite_chain_matches_fd() {
        let point = rand_tensor([1, 2, 4, 4], &mut rng(22));
        let err = check_gradient(
            |tape, x| {
                let s = tape.sigmoid(x);
                let r = tape.softplus(s);
                let e = tape.add_scalar(r, 0.3);
                let q = tape.sqrt(e);
                Ok(tape.mean_all(q))
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "rel err {err}");
    }

    #[test]
    fn conv_weights_match_fd() {
        let mut r = rng(23);
        let x = rand_tensor([1, 2, 4, 4], &mut r);
        let w = rand_tensor([3, 2, 3, 3], &mut r);
        let spec = crate::tensor::ConvSpec::same(3, 2, 3).unwrap();
        let err = check_gradient_multi(
            |tape, vars| {
                let y = tape.conv2d(vars[0], vars[1], None, &spec)?;
                let sq = tape.mul(y, y)?;
                Ok(tape.sum_all(sq))
            },
            &[x, w],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "rel err {err}");
    }

    #[test]
    fn non_finite_probe_is_reported() {
        // log crosses zero inside the probe radius at x = 0, producing NaN.
        let point = Tensor::scalar(0.0);
        let err = check_gradient(
            |tape, x| {
                let l = tape.log(x);
                Ok(tape.sum_all(l))
            },
            &point,
            1e-5,
        );
        assert!(matches!(err, Err(Error::NonFiniteProbe { .. })));
    }

    #[test]
    fn sampled_probe_subset_runs() {
        let mut r = rng(24);
        let x = rand_tensor([1, 3, 6, 6], &mut r);
        let err = check_gradient_sampled(
            |tape, vars| {
                let s = tape.sigmoid(vars[0]);
                Ok(tape.mean_all(s))
            },
            &[x],
            1e-5,
            10,
            &mut r,
        )
        .unwrap();
        assert!(err < 1e-8);
    }
}
