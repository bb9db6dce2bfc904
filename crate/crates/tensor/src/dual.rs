//! Forward-mode dual numbers for small fused operations.
//!
//! Scalar formulas written once against [`Real`] evaluate either on plain
//! `f64` or on [`Dual<N>`], which carries the partial derivatives with
//! respect to `N` seeded inputs alongside the value.

use std::ops::{Add, Div, Mul, Neg, Sub};

/// The scalar operations box geometry and loss formulas need.
pub trait Real:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn cst(v: f64) -> Self;
    fn value(self) -> f64;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn atan(self) -> Self;

    fn max(self, other: Self) -> Self {
        if other.value() > self.value() {
            other
        } else {
            self
        }
    }

    fn min(self, other: Self) -> Self {
        if other.value() < self.value() {
            other
        } else {
            self
        }
    }

    fn square(self) -> Self {
        self * self
    }
}

impl Real for f64 {
    fn cst(v: f64) -> Self {
        v
    }
    fn value(self) -> f64 {
        self
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn atan(self) -> Self {
        f64::atan(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual<const N: usize> {
    pub re: f64,
    pub eps: [f64; N],
}

impl<const N: usize> Dual<N> {
    pub fn constant(re: f64) -> Self {
        Dual { re, eps: [0.0; N] }
    }

    /// Independent variable number `i`.
    pub fn var(re: f64, i: usize) -> Self {
        let mut eps = [0.0; N];
        eps[i] = 1.0;
        Dual { re, eps }
    }

    fn chain(self, re: f64, slope: f64) -> Self {
        let mut eps = self.eps;
        eps.iter_mut().for_each(|e| *e *= slope);
        Dual { re, eps }
    }
}

impl<const N: usize> Add for Dual<N> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        let mut eps = self.eps;
        eps.iter_mut().zip(o.eps).for_each(|(a, b)| *a += b);
        Dual {
            re: self.re + o.re,
            eps,
        }
    }
}

impl<const N: usize> Sub for Dual<N> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        let mut eps = self.eps;
        eps.iter_mut().zip(o.eps).for_each(|(a, b)| *a -= b);
        Dual {
            re: self.re - o.re,
            eps,
        }
    }
}

impl<const N: usize> Mul for Dual<N> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        let mut eps = [0.0; N];
        for (i, e) in eps.iter_mut().enumerate() {
            *e = self.eps[i] * o.re + self.re * o.eps[i];
        }
        Dual {
            re: self.re * o.re,
            eps,
        }
    }
}

impl<const N: usize> Div for Dual<N> {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let inv = 1.0 / o.re;
        let re = self.re * inv;
        let mut eps = [0.0; N];
        for (i, e) in eps.iter_mut().enumerate() {
            *e = (self.eps[i] - re * o.eps[i]) * inv;
        }
        Dual { re, eps }
    }
}

impl<const N: usize> Neg for Dual<N> {
    type Output = Self;
    fn neg(self) -> Self {
        self.chain(-self.re, -1.0)
    }
}

impl<const N: usize> Real for Dual<N> {
    fn cst(v: f64) -> Self {
        Dual::constant(v)
    }
    fn value(self) -> f64 {
        self.re
    }
    /// The slope at zero is taken as 0 (the subgradient of `|d|` at the origin).
    fn sqrt(self) -> Self {
        let r = self.re.sqrt();
        let slope = if r > 0.0 { 0.5 / r } else { 0.0 };
        self.chain(r, slope)
    }
    fn exp(self) -> Self {
        let e = self.re.exp();
        self.chain(e, e)
    }
    fn ln(self) -> Self {
        self.chain(self.re.ln(), 1.0 / self.re)
    }
    fn atan(self) -> Self {
        self.chain(self.re.atan(), 1.0 / (1.0 + self.re * self.re))
    }
}
