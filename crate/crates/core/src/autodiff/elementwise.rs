//! Elementwise arithmetic and activations.
//!
//! Binary operations accept equal shapes or suffix broadcasting: the shorter
//! operand's shape must equal a trailing suffix of the longer one and is
//! repeated over the leading axes (e.g. a per-channel vector against a
//! `(B,H,W,C)` map).

use std::rc::Rc;

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    if long[long.len() - short.len()..] != *short {
        return Err(Error::shape(op, format!("cannot broadcast {a:?} with {b:?}")));
    }
    Ok(long.to_vec())
}

/// Folds a full-size gradient onto a (possibly broadcast) operand.
fn reduce_vec<T: Scalar>(grad: Vec<T>, shape: &[usize]) -> Tensor<T> {
    let n: usize = shape.iter().product();
    if grad.len() == n {
        return Tensor::new(shape, grad).expect("shape checked");
    }
    let mut out = vec![T::zero(); n];
    for (i, g) in grad.into_iter().enumerate() {
        out[i % n] = out[i % n] + g;
    }
    Tensor::new(shape, out).expect("shape checked")
}

impl<T: Scalar> Graph<T> {
    fn binary(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        dfa: impl Fn(T, T, T) -> T + 'static,
        dfb: impl Fn(T, T, T) -> T + 'static,
    ) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let shape = broadcast_shape(op, av.shape(), bv.shape())?;
        let n: usize = shape.iter().product();
        let (na, nb) = (av.numel(), bv.numel());
        let data: Vec<T> = (0..n).map(|i| f(av.data()[i % na], bv.data()[i % nb])).collect();
        let out = Tensor::new(&shape, data)?;
        self.custom(op, &[a, b], out, move |g, needs| {
            let ga = needs[0].then(|| {
                let v: Vec<T> = (0..n)
                    .map(|i| dfa(av.data()[i % na], bv.data()[i % nb], g.data()[i]))
                    .collect();
                reduce_vec(v, av.shape())
            });
            let gb = needs[1].then(|| {
                let v: Vec<T> = (0..n)
                    .map(|i| dfb(av.data()[i % na], bv.data()[i % nb], g.data()[i]))
                    .collect();
                reduce_vec(v, bv.shape())
            });
            vec![ga, gb]
        })
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, |_, _, g| g, |_, _, g| g)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, |_, _, g| g, |_, _, g| -g)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, |_, y, g| g * y, |x, _, g| g * x)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, |_, y, g| g / y, |x, y, g| -g * x / (y * y))
    }

    /// Sum of several same-shaped values, accumulated left to right.
    pub fn add_n(&self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| Error::Contract("add_n of empty list".into()))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    fn unary(&self, op: &'static str, a: Var, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Result<Var> {
        let av = self.value(a);
        let out = av.map(f);
        let outv = Rc::new(out.clone());
        self.custom(op, &[a], out, move |g, _| {
            let data = av
                .data()
                .iter()
                .zip(outv.data())
                .zip(g.data())
                .map(|((&x, &y), &gy)| gy * df(x, y))
                .collect();
            vec![Some(Tensor::new(av.shape(), data).expect("same shape"))]
        })
    }

    pub fn neg(&self, a: Var) -> Result<Var> {
        self.unary("neg", a, |x| -x, |_, _| -T::one())
    }

    pub fn add_scalar(&self, a: Var, s: T) -> Result<Var> {
        self.unary("add_scalar", a, move |x| x + s, |_, _| T::one())
    }

    pub fn mul_scalar(&self, a: Var, s: T) -> Result<Var> {
        self.unary("mul_scalar", a, move |x| x * s, move |_, _| s)
    }

    /// `s - a`.
    pub fn rsub_scalar(&self, s: T, a: Var) -> Result<Var> {
        self.unary("rsub_scalar", a, move |x| s - x, |_, _| -T::one())
    }

    pub fn square(&self, a: Var) -> Result<Var> {
        self.unary("square", a, |x| x * x, |x, _| x + x)
    }

    pub fn powf(&self, a: Var, p: T) -> Result<Var> {
        self.unary("powf", a, move |x| x.powf(p), move |x, _| p * x.powf(p - T::one()))
    }

    pub fn sqrt(&self, a: Var) -> Result<Var> {
        self.unary("sqrt", a, |x| x.sqrt(), |_, y| T::of(0.5) / y)
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        self.unary("exp", a, |x| x.exp(), |_, y| y)
    }

    pub fn ln(&self, a: Var) -> Result<Var> {
        self.unary("ln", a, |x| x.ln(), |x, _| T::one() / x)
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, |_, y| y * (T::one() - y))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&self, a: Var) -> Result<Var> {
        self.unary(
            "silu",
            a,
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            },
        )
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&self, a: Var) -> Result<Var> {
        self.unary("softplus", a, softplus, |x, _| sigmoid(x))
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        self.unary(
            "relu",
            a,
            |x| x.max(T::zero()),
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn leaky_relu(&self, a: Var, slope: T) -> Result<Var> {
        self.unary(
            "leaky_relu",
            a,
            move |x| if x > T::zero() { x } else { slope * x },
            move |x, _| if x > T::zero() { T::one() } else { slope },
        )
    }

    /// `max(x, lo)`; the gradient is zero where the clamp is active.
    pub fn clamp_min(&self, a: Var, lo: T) -> Result<Var> {
        self.unary(
            "clamp_min",
            a,
            move |x| x.max(lo),
            move |x, _| if x >= lo { T::one() } else { T::zero() },
        )
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where a bound is active.
    pub fn clamp(&self, a: Var, lo: T, hi: T) -> Result<Var> {
        self.unary(
            "clamp",
            a,
            move |x| x.max(lo).min(hi),
            move |x, _| {
                if x >= lo && x <= hi {
                    T::one()
                } else {
                    T::zero()
                }
            },
        )
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    if x > T::of(30.0) {
        x
    } else {
        x.max(T::zero()) + (-x.abs()).exp().ln_1p()
    }
}

/// `x` with `softplus(x) = y`, for `y > 0`.
pub(crate) fn inverse_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y + (-(-y).exp_m1()).ln()
    }
}
