//! First-order dual numbers and the scalar abstraction the model kernels use.
//!
//! The shallow-water step and its adjoint are written once, generic over
//! [`Scalar`]. Instantiated at `f64` they are the plain nonlinear and adjoint
//! models; instantiated at [`Dual`] they carry an exact directional derivative
//! through every arithmetic operation, which gives
//!
//! * the tangent-linear model as the dual part of the forward step, and
//! * the second-order adjoint as the dual part of the adjoint step
//!   (forward-over-reverse differentiation).
//!
//! Only `+ - * /` and negation appear in the kernels — the fluxes are rational
//! functions of the state — so the trait stays minimal and branch-free, and
//! dual arithmetic is exact differentiation rather than an approximation.

use std::ops::{Add, Div, Mul, Neg, Sub};

pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn from_f64(x: f64) -> Self;
    fn zero() -> Self;
    /// Primal (value) part.
    fn value(self) -> f64;
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(x: f64) -> f64 {
        x
    }

    #[inline]
    fn zero() -> f64 {
        0.0
    }

    #[inline]
    fn value(self) -> f64 {
        self
    }
}

/// `value + derivative * eps` with `eps^2 = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual {
    pub val: f64,
    pub der: f64,
}

impl Dual {
    #[inline]
    pub fn new(val: f64, der: f64) -> Dual {
        Dual { val, der }
    }

    #[inline]
    pub fn constant(val: f64) -> Dual {
        Dual { val, der: 0.0 }
    }
}

impl Add for Dual {
    type Output = Dual;
    #[inline]
    fn add(self, rhs: Dual) -> Dual {
        Dual::new(self.val + rhs.val, self.der + rhs.der)
    }
}

impl Sub for Dual {
    type Output = Dual;
    #[inline]
    fn sub(self, rhs: Dual) -> Dual {
        Dual::new(self.val - rhs.val, self.der - rhs.der)
    }
}

impl Mul for Dual {
    type Output = Dual;
    #[inline]
    fn mul(self, rhs: Dual) -> Dual {
        Dual::new(self.val * rhs.val, self.val * rhs.der + self.der * rhs.val)
    }
}

impl Div for Dual {
    type Output = Dual;
    #[inline]
    fn div(self, rhs: Dual) -> Dual {
        let inv = 1.0 / rhs.val;
        let val = self.val * inv;
        Dual::new(val, (self.der - val * rhs.der) * inv)
    }
}

impl Neg for Dual {
    type Output = Dual;
    #[inline]
    fn neg(self) -> Dual {
        Dual::new(-self.val, -self.der)
    }
}

impl Scalar for Dual {
    #[inline]
    fn from_f64(x: f64) -> Dual {
        Dual::constant(x)
    }

    #[inline]
    fn zero() -> Dual {
        Dual::constant(0.0)
    }

    #[inline]
    fn value(self) -> f64 {
        self.val
    }
}
