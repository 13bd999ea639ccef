//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`GradTape`] owns an arena of forward values and an ordered op list.
//! Recording an op computes its forward result immediately; [`GradTape::backward`]
//! replays the list in reverse, applying each op's adjoint with a fixed
//! accumulation order, so gradients are bitwise reproducible. Two identical
//! forward passes build identical tapes.
//!
//! Values enter the tape through [`GradTape::constant`] (no registry entry) or
//! [`GradTape::param`], which snapshots the tensor into the parameter registry
//! so later mutation of the caller's copy cannot alias the recorded pass.

use crate::error::{Error, Result};
use crate::tensor::{
    check_mask_shape, conv2d, conv2d_backward, conv_transpose2d, conv_transpose2d_backward,
    ConvSpec, Tensor,
};

/// Handle to a value held by a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
// Some recorded fields exist for the record's own completeness (Debug) even
// when the adjoint does not need them.
#[allow(dead_code)]
enum Op {
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        spec: ConvSpec,
        out: Var,
    },
    ConvT2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        out: Var,
    },
    Add { a: Var, b: Var, out: Var },
    Sub { a: Var, b: Var, out: Var },
    Mul { a: Var, b: Var, out: Var },
    /// `x * s` with `s` shaped `(1|B, 1|C, 1, 1)`, broadcast over the rest.
    MulBcast { x: Var, s: Var, out: Var },
    /// `x - s` with the same broadcast rule as `MulBcast`.
    SubBcast { x: Var, s: Var, out: Var },
    /// `x * m` with `m` shaped `(1|B, 1, H, W)`, broadcast over channels.
    MulChan { x: Var, m: Var, out: Var },
    Scale { x: Var, k: f64, out: Var },
    AddScalar { x: Var, k: f64, out: Var },
    Relu { x: Var, out: Var },
    Sigmoid { x: Var, out: Var },
    Softplus { x: Var, out: Var },
    Sqrt { x: Var, out: Var },
    Recip { x: Var, out: Var },
    Log { x: Var, out: Var },
    PowConst { x: Var, p: f64, out: Var },
    Abs { x: Var, out: Var },
    ClampMin { x: Var, lo: f64, out: Var },
    /// Sum over (h, w): `(B,C,H,W) -> (B,C,1,1)`.
    SumHw { x: Var, out: Var },
    /// Sum over the batch axis: `(B,C,H,W) -> (1,C,H,W)`.
    SumBatch { x: Var, out: Var },
    /// Sum over the channel axis: `(B,C,H,W) -> (B,1,H,W)`.
    SumChan { x: Var, out: Var },
    /// Sum of every entry: `-> (1,1,1,1)`.
    SumAll { x: Var, out: Var },
    /// Channel-axis concatenation.
    Concat { xs: Vec<Var>, out: Var },
    /// Bilinear 2x spatial upsampling.
    Bilinear2x { x: Var, out: Var },
    /// `w / sigma` where `sigma` was estimated by power iteration with the
    /// recorded `(u, v)` pair held fixed.
    SpectralScale {
        w: Var,
        u: Vec<f64>,
        v: Vec<f64>,
        sigma: f64,
        out: Var,
    },
}

/// Reverse-mode tape: forward value arena + op records + parameter registry.
#[derive(Default)]
pub struct GradTape {
    vals: Vec<Tensor>,
    ops: Vec<Op>,
    params: Vec<Var>,
    param_names: Vec<String>,
}

/// Per-variable gradients produced by [`GradTape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<[usize; 4]>,
}

impl Gradients {
    /// Gradient flowing into `v`, or `None` if the loss never touched it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for a registered parameter; zeros when unused by the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[v.0]),
        }
    }
}

impl GradTape {
    pub fn new() -> Self {
        GradTape::default()
    }

    /// Number of recorded ops.
    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Registered parameters in registration order.
    pub fn params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.param_names
            .iter()
            .map(|s| s.as_str())
            .zip(self.params.iter().copied())
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Forward value of a variable.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.vals[v.0]
    }

    pub fn shape(&self, v: Var) -> [usize; 4] {
        self.vals[v.0].shape()
    }

    fn push(&mut self, t: Tensor) -> Var {
        self.vals.push(t);
        Var(self.vals.len() - 1)
    }

    /// Stores a value with no registry entry; gradients may flow to it but it
    /// is not reported as trainable.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t)
    }

    /// Snapshots `t` as a named trainable parameter.
    pub fn param(&mut self, name: &str, t: Tensor) -> Var {
        let v = self.push(t);
        self.params.push(v);
        self.param_names.push(name.to_string());
        v
    }

    /// Stores a tensor, registering it when `requires_grad` is set.
    pub fn input(&mut self, t: Tensor) -> Var {
        if t.requires_grad {
            self.param("input", t)
        } else {
            self.constant(t)
        }
    }

    // ── Recorded operations ──────────────────────────────────────────

    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        let y = conv2d(self.value(x), spec, self.value(w), bias.map(|b| self.value(b)))?;
        let out = self.push(y);
        self.ops.push(Op::Conv2d {
            x,
            w,
            bias,
            spec: spec.clone(),
            out,
        });
        Ok(out)
    }

    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let y = conv_transpose2d(
            self.value(x),
            self.value(w),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let out = self.push(y);
        self.ops.push(Op::ConvT2d {
            x,
            w,
            bias,
            stride,
            padding,
            out,
        });
        Ok(out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).add(self.value(b))?;
        let out = self.push(y);
        self.ops.push(Op::Add { a, b, out });
        Ok(out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).sub(self.value(b))?;
        let out = self.push(y);
        self.ops.push(Op::Sub { a, b, out });
        Ok(out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).mul(self.value(b))?;
        let out = self.push(y);
        self.ops.push(Op::Mul { a, b, out });
        Ok(out)
    }

    fn check_bcast(&self, x: Var, s: Var, what: &str) -> Result<()> {
        let xs = self.shape(x);
        let ss = self.shape(s);
        let ok = (ss[0] == 1 || ss[0] == xs[0])
            && (ss[1] == 1 || ss[1] == xs[1])
            && ss[2] == 1
            && ss[3] == 1;
        if !ok {
            return Err(Error::shape(
                what.to_string(),
                format!("(1|{}, 1|{}, 1, 1)", xs[0], xs[1]),
                format!("{ss:?}"),
            ));
        }
        Ok(())
    }

    /// `x * s`, `s` broadcast from `(1|B, 1|C, 1, 1)`.
    pub fn mul_bcast(&mut self, x: Var, s: Var) -> Result<Var> {
        self.check_bcast(x, s, "mul_bcast scale operand")?;
        let y = bcast_zip(self.value(x), self.value(s), |a, b| a * b);
        let out = self.push(y);
        self.ops.push(Op::MulBcast { x, s, out });
        Ok(out)
    }

    /// `x - s`, `s` broadcast from `(1|B, 1|C, 1, 1)`.
    pub fn sub_bcast(&mut self, x: Var, s: Var) -> Result<Var> {
        self.check_bcast(x, s, "sub_bcast shift operand")?;
        let y = bcast_zip(self.value(x), self.value(s), |a, b| a - b);
        let out = self.push(y);
        self.ops.push(Op::SubBcast { x, s, out });
        Ok(out)
    }

    /// `x * m` with a per-pixel map `m` shaped `(1|B, 1, H, W)` shared by all
    /// channels. This is how masks enter differentiable expressions.
    pub fn mul_chan(&mut self, x: Var, m: Var) -> Result<Var> {
        check_mask_shape(self.value(x), self.value(m), "mul_chan map operand")?;
        let y = chan_zip(self.value(x), self.value(m));
        let out = self.push(y);
        self.ops.push(Op::MulChan { x, m, out });
        Ok(out)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let y = self.value(x).scale(k);
        let out = self.push(y);
        self.ops.push(Op::Scale { x, k, out });
        out
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Var {
        let y = self.value(x).map(|v| v + k);
        let out = self.push(y);
        self.ops.push(Op::AddScalar { x, k, out });
        out
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.max(0.0));
        let out = self.push(y);
        self.ops.push(Op::Relu { x, out });
        out
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(sigmoid_stable);
        let out = self.push(y);
        self.ops.push(Op::Sigmoid { x, out });
        out
    }

    /// `ln(1 + e^x)`, evaluated in the overflow-free form.
    pub fn softplus(&mut self, x: Var) -> Var {
        let y = self.value(x).map(softplus_stable);
        let out = self.push(y);
        self.ops.push(Op::Softplus { x, out });
        out
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let y = self.value(x).map(f64::sqrt);
        let out = self.push(y);
        self.ops.push(Op::Sqrt { x, out });
        out
    }

    pub fn recip(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| 1.0 / v);
        let out = self.push(y);
        self.ops.push(Op::Recip { x, out });
        out
    }

    pub fn log(&mut self, x: Var) -> Var {
        let y = self.value(x).map(f64::ln);
        let out = self.push(y);
        self.ops.push(Op::Log { x, out });
        out
    }

    pub fn pow_const(&mut self, x: Var, p: f64) -> Var {
        let y = self.value(x).map(|v| v.powf(p));
        let out = self.push(y);
        self.ops.push(Op::PowConst { x, p, out });
        out
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let y = self.value(x).map(f64::abs);
        let out = self.push(y);
        self.ops.push(Op::Abs { x, out });
        out
    }

    pub fn clamp_min(&mut self, x: Var, lo: f64) -> Var {
        let y = self.value(x).map(|v| v.max(lo));
        let out = self.push(y);
        self.ops.push(Op::ClampMin { x, lo, out });
        out
    }

    pub fn sum_hw(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let [b, c, h, w] = t.shape();
        let mut y = Tensor::zeros([b, c, 1, 1]);
        for bi in 0..b {
            for ci in 0..c {
                let mut acc = 0.0;
                for hi in 0..h {
                    for wi in 0..w {
                        acc += t.at(bi, ci, hi, wi);
                    }
                }
                y.set(bi, ci, 0, 0, acc);
            }
        }
        let out = self.push(y);
        self.ops.push(Op::SumHw { x, out });
        out
    }

    pub fn sum_batch(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let [b, c, h, w] = t.shape();
        let mut y = Tensor::zeros([1, c, h, w]);
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    let mut acc = 0.0;
                    for bi in 0..b {
                        acc += t.at(bi, ci, hi, wi);
                    }
                    y.set(0, ci, hi, wi, acc);
                }
            }
        }
        let out = self.push(y);
        self.ops.push(Op::SumBatch { x, out });
        out
    }

    pub fn sum_chan(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let [b, c, h, w] = t.shape();
        let mut y = Tensor::zeros([b, 1, h, w]);
        for bi in 0..b {
            for hi in 0..h {
                for wi in 0..w {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        acc += t.at(bi, ci, hi, wi);
                    }
                    y.set(bi, 0, hi, wi, acc);
                }
            }
        }
        let out = self.push(y);
        self.ops.push(Op::SumChan { x, out });
        out
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        let out = self.push(y);
        self.ops.push(Op::SumAll { x, out });
        out
    }

    /// Mean of every entry, as a scalar variable.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::InvalidArgument {
                what: "concat operands",
                detail: "need at least one".into(),
            });
        }
        let [b, _, h, w] = self.shape(xs[0]);
        let mut total_c = 0;
        for &v in xs {
            let s = self.shape(v);
            if s[0] != b || s[2] != h || s[3] != w {
                return Err(Error::shape(
                    "concat operand",
                    format!("({b}, *, {h}, {w})"),
                    format!("{s:?}"),
                ));
            }
            total_c += s[1];
        }
        let mut y = Tensor::zeros([b, total_c, h, w]);
        let mut c_off = 0;
        for &v in xs {
            let t = self.value(v).clone();
            let c = t.channels();
            for bi in 0..b {
                for ci in 0..c {
                    for hi in 0..h {
                        for wi in 0..w {
                            y.set(bi, c_off + ci, hi, wi, t.at(bi, ci, hi, wi));
                        }
                    }
                }
            }
            c_off += c;
        }
        let out = self.push(y);
        self.ops.push(Op::Concat { xs: xs.to_vec(), out });
        Ok(out)
    }

    /// Bilinear 2x upsampling with half-pixel centers and edge clamping.
    pub fn bilinear2x(&mut self, x: Var) -> Var {
        let y = bilinear2x_forward(self.value(x));
        let out = self.push(y);
        self.ops.push(Op::Bilinear2x { x, out });
        out
    }

    /// Divides `w` by `sigma`, recording the `(u, v)` witness pair so the
    /// adjoint accounts for `sigma`'s dependence on `w`.
    pub fn spectral_scale(&mut self, w: Var, u: Vec<f64>, v: Vec<f64>, sigma: f64) -> Var {
        let y = self.value(w).scale(1.0 / sigma);
        let out = self.push(y);
        self.ops.push(Op::SpectralScale { w, u, v, sigma, out });
        out
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse pass from a scalar `loss`. Returns the gradient map; every
    /// registered parameter gets an entry (zeros when unused).
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ls = self.shape(loss);
        if ls != [1, 1, 1, 1] {
            return Err(Error::NonScalarLoss(ls));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.vals.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for op in self.ops.iter().rev() {
            self.backward_op(op, &mut grads);
        }

        let shapes = self.vals.iter().map(|t| t.shape()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        debug_assert_eq!(delta.shape(), self.vals[v.0].shape());
        match &mut grads[v.0] {
            Some(g) => {
                let sum = g.add(&delta).expect("gradient shape drift");
                grads[v.0] = Some(sum);
            }
            None => grads[v.0] = Some(delta),
        }
    }

    fn backward_op(&self, op: &Op, grads: &mut [Option<Tensor>]) {
        macro_rules! out_grad {
            ($out:expr) => {
                match grads[$out.0].clone() {
                    Some(g) => g,
                    None => return,
                }
            };
        }

        match op {
            Op::Conv2d { x, w, bias, spec, out } => {
                let g = out_grad!(out);
                let (dx, dw, db) =
                    conv2d_backward(self.value(*x), spec, self.value(*w), &g, bias.is_some());
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *w, dw);
                if let (Some(b), Some(db)) = (bias, db) {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::ConvT2d {
                x,
                w,
                bias,
                stride,
                padding,
                out,
            } => {
                let g = out_grad!(out);
                let (dx, dw, db) = conv_transpose2d_backward(
                    self.value(*x),
                    self.value(*w),
                    &g,
                    *stride,
                    *padding,
                    bias.is_some(),
                );
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *w, dw);
                if let (Some(b), Some(db)) = (bias, db) {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add { a, b, out } => {
                let g = out_grad!(out);
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g);
            }
            Op::Sub { a, b, out } => {
                let g = out_grad!(out);
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul { a, b, out } => {
                let g = out_grad!(out);
                let da = g.mul(self.value(*b)).expect("mul vjp");
                let db = g.mul(self.value(*a)).expect("mul vjp");
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::MulBcast { x, s, out } => {
                let g = out_grad!(out);
                let dx = bcast_zip(&g, self.value(*s), |gv, sv| gv * sv);
                let ds = bcast_reduce(&g, self.value(*x), self.value(*s).shape(), |gv, xv| gv * xv);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *s, ds);
            }
            Op::SubBcast { x, s, out } => {
                let g = out_grad!(out);
                self.accumulate(grads, *x, g.clone());
                let ones = Tensor::full(g.shape(), 1.0);
                let ds = bcast_reduce(&g, &ones, self.value(*s).shape(), |gv, _| -gv);
                self.accumulate(grads, *s, ds);
            }
            Op::MulChan { x, m, out } => {
                let g = out_grad!(out);
                let dx = chan_zip(&g, self.value(*m));
                let dm = chan_reduce(&g, self.value(*x), self.value(*m).shape());
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *m, dm);
            }
            Op::Scale { x, k, out } => {
                let g = out_grad!(out);
                self.accumulate(grads, *x, g.scale(*k));
            }
            Op::AddScalar { x, out, .. } => {
                let g = out_grad!(out);
                self.accumulate(grads, *x, g);
            }
            Op::Relu { x, out } => {
                let g = out_grad!(out);
                let dx = g
                    .zip_map(self.value(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 })
                    .expect("relu vjp");
                self.accumulate(grads, *x, dx);
            }
            Op::Sigmoid { x, out } => {
                let g = out_grad!(out);
                let dx = g
                    .zip_map(self.value(*out), |gv, y| gv * y * (1.0 - y))
                    .expect("sigmoid vjp");
                self.accumulate(grads, *x, dx);
            }
            Op::Softplus { x, out } => {
                let g = out_grad!(out);
                let dx = g
                    .zip_map(self.value(*x), |gv, xv| gv * sigmoid_stable(xv))
                    .expect("softplus vjp");
                self.accumulate(grads, *x, dx);
            }
            Op::Sqrt { x, out } => {
                let g = out_grad!(out);
                let dx = g
                    .zip_map(self.value(*out), |gv, y| gv / (2.0 * y))
                    .expect("sqrt vjp");
                self.accumulate(grads, *x, dx);
            }
            Op::Recip { x, out } => {
                let g = out_grad!(out);
                let dx = g
                    .zip_map(self.value(*out), |gv, y| -gv * y * y)
                    .expect("recip vjp");
                self.accumulate(grads, *x, dx);
            }
            Op::Log { x, out } => {
                let g = out_grad!(out);
                let dx = g
                    .zip_map(self.value(*x), |gv, xv| gv / xv)
                    .expect("log vjp");
                self.accumulate(grads, *x, dx);
            }
            Op::PowConst { x, p, out } => {
                let g = out_grad!(out);
                let p = *p;
                let dx = g
                    .zip_map(self.value(*x), |gv, xv| {
                        if p == 0.0 {
                            0.0
                        } else {
                            gv * p * xv.powf(p - 1.0)
                        }
                    })
                    .expect("pow vjp");
                self.accumulate(grads, *x, dx);
            }
            Op::Abs { x, out } => {
                let g = out_grad!(out);
                let dx = g
                    .zip_map(self.value(*x), |gv, xv| gv * sign(xv))
                    .expect("abs vjp");
                self.accumulate(grads, *x, dx);
            }
            Op::ClampMin { x, lo, out } => {
                let g = out_grad!(out);
                let lo = *lo;
                let dx = g
                    .zip_map(self.value(*x), |gv, xv| if xv > lo { gv } else { 0.0 })
                    .expect("clamp vjp");
                self.accumulate(grads, *x, dx);
            }
            Op::SumHw { x, out } => {
                let g = out_grad!(out);
                let xs = self.shape(*x);
                let dx = Tensor::from_fn(xs, |b, c, _, _| g.at(b, c, 0, 0));
                self.accumulate(grads, *x, dx);
            }
            Op::SumBatch { x, out } => {
                let g = out_grad!(out);
                let xs = self.shape(*x);
                let dx = Tensor::from_fn(xs, |_, c, h, w| g.at(0, c, h, w));
                self.accumulate(grads, *x, dx);
            }
            Op::SumChan { x, out } => {
                let g = out_grad!(out);
                let xs = self.shape(*x);
                let dx = Tensor::from_fn(xs, |b, _, h, w| g.at(b, 0, h, w));
                self.accumulate(grads, *x, dx);
            }
            Op::SumAll { x, out } => {
                let g = out_grad!(out);
                let dx = Tensor::full(self.shape(*x), g.item());
                self.accumulate(grads, *x, dx);
            }
            Op::Concat { xs, out } => {
                let g = out_grad!(out);
                let [b, _, h, w] = g.shape();
                let mut c_off = 0;
                for &v in xs {
                    let c = self.shape(v)[1];
                    let mut dv = Tensor::zeros(self.shape(v));
                    for bi in 0..b {
                        for ci in 0..c {
                            for hi in 0..h {
                                for wi in 0..w {
                                    dv.set(bi, ci, hi, wi, g.at(bi, c_off + ci, hi, wi));
                                }
                            }
                        }
                    }
                    self.accumulate(grads, v, dv);
                    c_off += c;
                }
            }
            Op::Bilinear2x { x, out } => {
                let g = out_grad!(out);
                let dx = bilinear2x_backward(&g, self.shape(*x));
                self.accumulate(grads, *x, dx);
            }
            Op::SpectralScale { w, u, v, sigma, out } => {
                let g = out_grad!(out);
                let wt = self.value(*w);
                let dot: f64 = g.data().iter().zip(wt.data()).map(|(a, b)| a * b).sum();
                let rows = wt.shape()[0];
                let cols = wt.numel() / rows;
                let mut dw = g.scale(1.0 / sigma);
                let coef = dot / (sigma * sigma);
                let data = dw.data_mut();
                for r in 0..rows {
                    for c in 0..cols {
                        data[r * cols + c] -= coef * u[r] * v[c];
                    }
                }
                self.accumulate(grads, *w, dw);
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid_stable(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn softplus_stable(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Element-wise op between `x` and an `(1|B, 1|C, 1, 1)` operand.
fn bcast_zip(x: &Tensor, s: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let ss = s.shape();
    Tensor::from_fn(x.shape(), |b, c, h, w| {
        let sb = if ss[0] == 1 { 0 } else { b };
        let sc = if ss[1] == 1 { 0 } else { c };
        f(x.at(b, c, h, w), s.at(sb, sc, 0, 0))
    })
}

/// Folds `f(g, x)` over the axes a broadcast operand was expanded along.
fn bcast_reduce(g: &Tensor, x: &Tensor, s_shape: [usize; 4], f: impl Fn(f64, f64) -> f64) -> Tensor {
    let [b, c, h, w] = g.shape();
    let mut out = Tensor::zeros(s_shape);
    for bi in 0..b {
        let sb = if s_shape[0] == 1 { 0 } else { bi };
        for ci in 0..c {
            let sc = if s_shape[1] == 1 { 0 } else { ci };
            let mut acc = 0.0;
            for hi in 0..h {
                for wi in 0..w {
                    acc += f(g.at(bi, ci, hi, wi), x.at(bi, ci, hi, wi));
                }
            }
            let i = out.index(sb, sc, 0, 0);
            out.data_mut()[i] += acc;
        }
    }
    out
}

/// `x * m` with `m` shaped `(1|B, 1, H, W)` shared across channels.
fn chan_zip(x: &Tensor, m: &Tensor) -> Tensor {
    let mb = m.batch();
    Tensor::from_fn(x.shape(), |b, c, h, w| {
        let bi = if mb == 1 { 0 } else { b };
        x.at(b, c, h, w) * m.at(bi, 0, h, w)
    })
}

/// Channel-folded product `sum_c g * x`, reduced onto the map's shape.
fn chan_reduce(g: &Tensor, x: &Tensor, m_shape: [usize; 4]) -> Tensor {
    let [b, c, h, w] = g.shape();
    let mut out = Tensor::zeros(m_shape);
    for bi in 0..b {
        let mb = if m_shape[0] == 1 { 0 } else { bi };
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    let i = out.index(mb, 0, hi, wi);
                    out.data_mut()[i] += g.at(bi, ci, hi, wi) * x.at(bi, ci, hi, wi);
                }
            }
        }
    }
    out
}

fn bilinear2x_forward(x: &Tensor) -> Tensor {
    let [b, c, h, w] = x.shape();
    Tensor::from_fn([b, c, 2 * h, 2 * w], |bi, ci, oh, ow| {
        let (y0, y1, ty) = src_coords(oh, h);
        let (x0, x1, tx) = src_coords(ow, w);
        let a = x.at(bi, ci, y0, x0) * (1.0 - ty) * (1.0 - tx);
        let bq = x.at(bi, ci, y0, x1) * (1.0 - ty) * tx;
        let cq = x.at(bi, ci, y1, x0) * ty * (1.0 - tx);
        let d = x.at(bi, ci, y1, x1) * ty * tx;
        a + bq + cq + d
    })
}

fn bilinear2x_backward(g: &Tensor, x_shape: [usize; 4]) -> Tensor {
    let [b, c, oh, ow] = g.shape();
    let h = x_shape[2];
    let w = x_shape[3];
    let mut dx = Tensor::zeros(x_shape);
    for bi in 0..b {
        for ci in 0..c {
            for yo in 0..oh {
                let (y0, y1, ty) = src_coords(yo, h);
                for xo in 0..ow {
                    let (x0, x1, tx) = src_coords(xo, w);
                    let gv = g.at(bi, ci, yo, xo);
                    for (yy, xx, wgt) in [
                        (y0, x0, (1.0 - ty) * (1.0 - tx)),
                        (y0, x1, (1.0 - ty) * tx),
                        (y1, x0, ty * (1.0 - tx)),
                        (y1, x1, ty * tx),
                    ] {
                        let i = dx.index(bi, ci, yy, xx);
                        dx.data_mut()[i] += gv * wgt;
                    }
                }
            }
        }
    }
    dx
}

/// Half-pixel-center source coordinates for 2x upsampling, edge-clamped.
#[inline]
fn src_coords(out_i: usize, src_len: usize) -> (usize, usize, f64) {
    let f = ((out_i as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, src_len as f64 - 1.0);
    let i0 = f.floor() as usize;
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, f - i0 as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{rand_tensor, rng};

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = GradTape::new();
        let x = tape.param("x", rand_tensor([2, 3, 4, 4], &mut rng(1)));
        let loss = tape.sum_all(x);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x), Tensor::full([2, 3, 4, 4], 1.0));
    }

    #[test]
    fn weighted_sum_gradient_is_the_other_factor() {
        let mut tape = GradTape::new();
        let xv = rand_tensor([1, 2, 3, 3], &mut rng(2));
        let x = tape.constant(xv.clone());
        let w = tape.param("w", rand_tensor([1, 2, 3, 3], &mut rng(3)));
        let prod = tape.mul(w, x).unwrap();
        let loss = tape.sum_all(prod);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(w), xv);
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut tape = GradTape::new();
        let x = tape.param("x", rand_tensor([1, 1, 2, 2], &mut rng(4)));
        let unused = tape.param("unused", rand_tensor([1, 1, 2, 2], &mut rng(5)));
        let loss = tape.sum_all(x);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(unused), Tensor::zeros([1, 1, 2, 2]));
        assert!(grads.get(unused).is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = GradTape::new();
        let x = tape.param("x", rand_tensor([1, 1, 2, 2], &mut rng(6)));
        assert!(matches!(
            tape.backward(x),
            Err(crate::error::Error::NonScalarLoss(_))
        ));
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = sum(2x) + sum(3x) => d/dx = 5 everywhere.
        let mut tape = GradTape::new();
        let x = tape.param("x", rand_tensor([1, 1, 2, 2], &mut rng(7)));
        let a = tape.scale(x, 2.0);
        let b = tape.scale(x, 3.0);
        let s = tape.add(a, b).unwrap();
        let loss = tape.sum_all(s);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x), Tensor::full([1, 1, 2, 2], 5.0));
    }

    #[test]
    fn identical_forwards_build_identical_tapes() {
        let run = || {
            let mut tape = GradTape::new();
            let x = tape.param("x", rand_tensor([1, 2, 4, 4], &mut rng(8)));
            let w = tape.param("w", rand_tensor([2, 2, 3, 3], &mut rng(9)));
            let spec = ConvSpec::same(2, 2, 3).unwrap();
            let y = tape.conv2d(x, w, None, &spec).unwrap();
            let r = tape.relu(y);
            let loss = tape.mean_all(r);
            let grads = tape.backward(loss).unwrap();
            (
                tape.value(loss).item(),
                grads.wrt(x).data().to_vec(),
                tape.len(),
            )
        };
        let (l1, g1, n1) = run();
        let (l2, g2, n2) = run();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(g1, g2);
        assert_eq!(n1, n2);
    }

    #[test]
    fn concat_splits_gradient() {
        let mut tape = GradTape::new();
        let a = tape.param("a", rand_tensor([1, 2, 2, 2], &mut rng(10)));
        let b = tape.param("b", rand_tensor([1, 3, 2, 2], &mut rng(11)));
        let cat = tape.concat_channels(&[a, b]).unwrap();
        assert_eq!(tape.shape(cat), [1, 5, 2, 2]);
        // Weight channel blocks differently so the split is observable.
        let mut wv = Tensor::zeros([1, 5, 2, 2]);
        for c in 0..5 {
            for h in 0..2 {
                for w in 0..2 {
                    wv.set(0, c, h, w, (c + 1) as f64);
                }
            }
        }
        let w = tape.constant(wv);
        let p = tape.mul(cat, w).unwrap();
        let loss = tape.sum_all(p);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(a).at(0, 1, 0, 0), 2.0);
        assert_eq!(grads.wrt(b).at(0, 0, 0, 0), 3.0);
    }

    #[test]
    fn spectral_scale_vjp_matches_fd() {
        let mut r = rng(12);
        let wv = rand_tensor([3, 2, 1, 1], &mut r);
        let u: Vec<f64> = (0..3).map(|i| (i as f64 + 1.0) / 3.0).collect();
        let v: Vec<f64> = (0..2).map(|i| (i as f64 + 0.5) / 2.0).collect();
        // sigma = u^T W v on the (3, 2) reshape.
        let sigma: f64 = (0..3)
            .map(|i| (0..2).map(|j| u[i] * wv.data()[i * 2 + j] * v[j]).sum::<f64>())
            .sum();

        let eval = |wt: &Tensor| {
            let s: f64 = (0..3)
                .map(|i| (0..2).map(|j| u[i] * wt.data()[i * 2 + j] * v[j]).sum::<f64>())
                .sum();
            // loss = sum of squares of normalized entries
            wt.data().iter().map(|x| (x / s) * (x / s)).sum::<f64>()
        };

        let mut tape = GradTape::new();
        let w = tape.param("w", wv.clone());
        let n = tape.spectral_scale(w, u.clone(), v.clone(), sigma);
        let sq = tape.mul(n, n).unwrap();
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss).unwrap();
        let g = grads.wrt(w);

        let step = 1e-6;
        for i in 0..wv.numel() {
            let mut plus = wv.clone();
            plus.data_mut()[i] += step;
            let mut minus = wv.clone();
            minus.data_mut()[i] -= step;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * step);
            assert!(
                (g.data()[i] - fd).abs() / fd.abs().max(1.0) < 1e-6,
                "coord {i}: analytic {} vs fd {fd}",
                g.data()[i]
            );
        }
    }

    #[test]
    fn bilinear2x_shape_and_constant_preservation() {
        let mut tape = GradTape::new();
        let x = tape.constant(Tensor::full([1, 2, 3, 3], 0.7));
        let y = tape.bilinear2x(x);
        assert_eq!(tape.shape(y), [1, 2, 6, 6]);
        for v in tape.value(y).data() {
            assert!((v - 0.7).abs() < 1e-15);
        }
    }
}
