//! Forward-mode dual numbers.
//!
//! [`Dual`] is generic over [`Real`], so `Dual<Dual<f64>>` carries second
//! derivatives and is what [`mixed_partial_2d`](super::mixed_partial_2d) uses.

use std::cell::Cell;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::error::{Error, Result};

/// Scalar field used by generic model code: plain `f64` or a dual number.
pub trait Real:
    Copy
    + fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn cst(x: f64) -> Self;
    /// Primal value, stripped of every derivative channel.
    fn value(&self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sigmoid(self) -> Self;
    fn softplus(self) -> Self;
    fn tanh(self) -> Self;

    fn scale(self, k: f64) -> Self {
        self * Self::cst(k)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

/// `ln sum exp(x_i)`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl Real for f64 {
    fn cst(x: f64) -> Self {
        x
    }
    fn value(&self) -> f64 {
        *self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sigmoid(self) -> Self {
        sigmoid(self)
    }
    fn softplus(self) -> Self {
        softplus(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
}

thread_local! {
    static FIRST_NON_FINITE: Cell<Option<&'static str>> = const { Cell::new(None) };
}

fn note(op: &'static str, v: f64) {
    if !v.is_finite() {
        FIRST_NON_FINITE.with(|c| {
            if c.get().is_none() {
                c.set(Some(op));
            }
        });
    }
}

/// A value paired with its derivative along one seed direction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual<T = f64> {
    pub v: T,
    pub d: T,
}

impl<T: Real> Dual<T> {
    pub fn new(v: T, d: T) -> Self {
        Dual { v, d }
    }

    /// An independent variable: derivative one.
    pub fn var(v: T) -> Self {
        Dual { v, d: T::cst(1.0) }
    }

    pub fn constant(v: T) -> Self {
        Dual { v, d: T::cst(0.0) }
    }

    fn checked(self, op: &'static str) -> Self {
        note(op, self.v.value());
        note(op, self.d.value());
        self
    }
}

impl<T: Real> Add for Dual<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Dual::new(self.v + o.v, self.d + o.d).checked("add")
    }
}

impl<T: Real> Sub for Dual<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Dual::new(self.v - o.v, self.d - o.d).checked("sub")
    }
}

impl<T: Real> Mul for Dual<T> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Dual::new(self.v * o.v, self.d * o.v + self.v * o.d).checked("mul")
    }
}

impl<T: Real> Div for Dual<T> {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let q = self.v / o.v;
        Dual::new(q, (self.d - q * o.d) / o.v).checked("div")
    }
}

impl<T: Real> Neg for Dual<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Dual::new(-self.v, -self.d)
    }
}

impl<T: Real> Real for Dual<T> {
    fn cst(x: f64) -> Self {
        Dual::constant(T::cst(x))
    }
    fn value(&self) -> f64 {
        self.v.value()
    }
    fn exp(self) -> Self {
        let e = self.v.exp();
        Dual::new(e, e * self.d).checked("exp")
    }
    fn ln(self) -> Self {
        Dual::new(self.v.ln(), self.d / self.v).checked("ln")
    }
    fn sigmoid(self) -> Self {
        let s = self.v.sigmoid();
        Dual::new(s, s * (T::cst(1.0) - s) * self.d).checked("sigmoid")
    }
    fn softplus(self) -> Self {
        Dual::new(self.v.softplus(), self.v.sigmoid() * self.d).checked("softplus")
    }
    fn tanh(self) -> Self {
        let t = self.v.tanh();
        Dual::new(t, (T::cst(1.0) - t * t) * self.d).checked("tanh")
    }
}

/// Evaluates `f` and `df/dx` at `x` in one forward pass.
pub fn dual_forward<F>(f: F, x: f64) -> Result<(f64, f64)>
where
    F: Fn(Dual) -> Dual,
{
    FIRST_NON_FINITE.with(|c| c.set(None));
    let out = f(Dual::var(x));
    let op = FIRST_NON_FINITE.with(|c| c.take());
    if let Some(op) = op {
        return Err(Error::NonFinite { op: op.to_string() });
    }
    if !out.v.is_finite() || !out.d.is_finite() {
        return Err(Error::NonFinite {
            op: "output".to_string(),
        });
    }
    Ok((out.v, out.d))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity() {
        assert_eq!(dual_forward(|x| x, 3.0).unwrap(), (3.0, 1.0));
    }

    #[test]
    fn sigmoid_at_zero() {
        let (v, d) = dual_forward(|x| x.sigmoid(), 0.0).unwrap();
        assert_eq!(v, 0.5);
        assert_eq!(d, 0.25);
    }

    #[test]
    fn exp_chain_rule() {
        let (v, d) = dual_forward(|x| x.scale(2.0).exp(), 1.0).unwrap();
        let e2 = 2f64.exp();
        assert!((v - e2).abs() < 1e-14);
        assert!((d - 2.0 * e2).abs() < 1e-13);
    }

    #[test]
    fn non_finite_is_traced() {
        let err = dual_forward(|x| (x - Dual::cst(1.0)).ln(), 1.0).unwrap_err();
        assert_eq!(
            err,
            Error::NonFinite {
                op: "ln".to_string()
            }
        );
        // the trace is reset between calls
        assert!(dual_forward(|x| x.exp(), 0.0).is_ok());
    }

    #[test]
    fn softplus_inverse() {
        for y in [1e-6, 0.3, 1.0, 5.0, 40.0] {
            assert!((softplus(softplus_inv(y)) - y).abs() < 1e-12 * y.max(1.0));
        }
    }

    #[test]
    fn log_sum_exp_is_stable() {
        let v = log_sum_exp(&[1000.0, 1000.0]);
        assert!((v - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }
}
