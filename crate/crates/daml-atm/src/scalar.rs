//! Scalar abstraction for the network math.
//!
//! Every forward and backward pass in this crate is written once, generic
//! over [`Scalar`], and instantiated twice: with `f64` for ordinary training,
//! and with [`Dual`] for exact Hessian-vector products. Running the analytic
//! gradient computation over dual numbers yields, in the tangent slot, the
//! directional derivative of that gradient, which is what the second-order
//! meta update needs.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

/// Field the network is computed over.
pub trait Scalar:
    Copy
    + Clone
    + Debug
    + PartialEq
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    /// Primal (value) part. Branching decisions — argmax, masks, softmax
    /// stabilization — always look at this.
    fn re(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;

    fn is_finite_re(self) -> bool {
        self.re().is_finite()
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn re(self) -> f64 {
        self
    }
    #[inline(always)]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline(always)]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline(always)]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
}

/// Forward-mode dual number: `re + ε·du` with `ε² = 0`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Dual {
    pub re: f64,
    pub du: f64,
}

impl Dual {
    #[inline(always)]
    pub fn new(re: f64, du: f64) -> Self {
        Dual { re, du }
    }
    #[inline(always)]
    pub fn constant(re: f64) -> Self {
        Dual { re, du: 0.0 }
    }
}

impl Add for Dual {
    type Output = Dual;
    #[inline(always)]
    fn add(self, rhs: Dual) -> Dual {
        Dual::new(self.re + rhs.re, self.du + rhs.du)
    }
}

impl Sub for Dual {
    type Output = Dual;
    #[inline(always)]
    fn sub(self, rhs: Dual) -> Dual {
        Dual::new(self.re - rhs.re, self.du - rhs.du)
    }
}

impl Mul for Dual {
    type Output = Dual;
    #[inline(always)]
    fn mul(self, rhs: Dual) -> Dual {
        Dual::new(self.re * rhs.re, self.re * rhs.du + self.du * rhs.re)
    }
}

impl Div for Dual {
    type Output = Dual;
    #[inline(always)]
    fn div(self, rhs: Dual) -> Dual {
        let inv = 1.0 / rhs.re;
        Dual::new(self.re * inv, (self.du - self.re * inv * rhs.du) * inv)
    }
}

impl Neg for Dual {
    type Output = Dual;
    #[inline(always)]
    fn neg(self) -> Dual {
        Dual::new(-self.re, -self.du)
    }
}

impl AddAssign for Dual {
    #[inline(always)]
    fn add_assign(&mut self, rhs: Dual) {
        self.re += rhs.re;
        self.du += rhs.du;
    }
}

impl SubAssign for Dual {
    #[inline(always)]
    fn sub_assign(&mut self, rhs: Dual) {
        self.re -= rhs.re;
        self.du -= rhs.du;
    }
}

impl MulAssign for Dual {
    #[inline(always)]
    fn mul_assign(&mut self, rhs: Dual) {
        *self = *self * rhs;
    }
}

impl Scalar for Dual {
    const ZERO: Self = Dual { re: 0.0, du: 0.0 };
    const ONE: Self = Dual { re: 1.0, du: 0.0 };

    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        Dual::constant(v)
    }
    #[inline(always)]
    fn re(self) -> f64 {
        self.re
    }
    #[inline(always)]
    fn exp(self) -> Self {
        let e = self.re.exp();
        Dual::new(e, e * self.du)
    }
    #[inline(always)]
    fn ln(self) -> Self {
        Dual::new(self.re.ln(), self.du / self.re)
    }
    #[inline(always)]
    fn sqrt(self) -> Self {
        let s = self.re.sqrt();
        Dual::new(s, self.du / (2.0 * s))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn dual_matches_finite_differences() {
        let g = |x: Dual| (x * x + Dual::constant(3.0) * x).exp().ln() * x.sqrt();
        let gf = |x: f64| (x * x + 3.0 * x).exp().ln() * x.sqrt();
        for &x in &[0.3, 1.0, 2.5] {
            let d = g(Dual::new(x, 1.0));
            assert!((d.re - gf(x)).abs() < 1e-12);
            assert!((d.du - fd(gf, x)).abs() < 1e-6, "x={x}: {} vs fd", d.du);
        }
    }

    #[test]
    fn dual_division() {
        let a = Dual::new(2.0, 1.0);
        let b = Dual::new(4.0, 0.5);
        let q = a / b;
        assert!((q.re - 0.5).abs() < 1e-15);
        // d(a/b) = (a'b - ab') / b^2 = (4 - 1) / 16
        assert!((q.du - 3.0 / 16.0).abs() < 1e-15);
    }
}
