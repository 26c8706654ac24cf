//! Scalar abstraction and small fixed-dimension vector helpers.
//!
//! All numerical kernels in this crate are generic over [`Scalar`], which is
//! any IEEE float with the `num-traits` surface we need (f32 or f64).
//! Concrete f64 aliases for the main types live at the crate root.

use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point scalar usable by every kernel in the crate.
pub trait Scalar:
    num_traits::Float
    + num_traits::FloatConst
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + Sum
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Shorthand conversion from an f64 literal.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable in scalar type")
    }

    /// Lossy conversion to f64 (exact for f32/f64).
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Spatial dimension of the build. Interfaces use [`Vector`] so the
/// dimension is set in one place.
pub const DIM: usize = 2;

/// Position / velocity vector.
pub type Vector<S> = [S; DIM];

/// Square matrix acting on [`Vector`].
pub type Matrix2<S> = [[S; DIM]; DIM];

#[inline]
pub fn add<S: Scalar>(a: Vector<S>, b: Vector<S>) -> Vector<S> {
    [a[0] + b[0], a[1] + b[1]]
}

#[inline]
pub fn sub<S: Scalar>(a: Vector<S>, b: Vector<S>) -> Vector<S> {
    [a[0] - b[0], a[1] - b[1]]
}

#[inline]
pub fn scale<S: Scalar>(c: S, a: Vector<S>) -> Vector<S> {
    [c * a[0], c * a[1]]
}

#[inline]
pub fn dot<S: Scalar>(a: Vector<S>, b: Vector<S>) -> S {
    a[0] * b[0] + a[1] * b[1]
}

#[inline]
pub fn norm<S: Scalar>(a: Vector<S>) -> S {
    dot(a, a).sqrt()
}

/// Counter-clockwise rotation by 90 degrees.
#[inline]
pub fn perp<S: Scalar>(a: Vector<S>) -> Vector<S> {
    [-a[1], a[0]]
}

/// 2D cross product a × b (scalar z-component).
#[inline]
pub fn cross<S: Scalar>(a: Vector<S>, b: Vector<S>) -> S {
    a[0] * b[1] - a[1] * b[0]
}

#[inline]
pub fn unit_from_angle<S: Scalar>(angle: S) -> Vector<S> {
    [angle.cos(), angle.sin()]
}

#[inline]
pub fn angle_of<S: Scalar>(a: Vector<S>) -> S {
    a[1].atan2(a[0])
}

#[inline]
pub fn mat_vec<S: Scalar>(m: &Matrix2<S>, v: Vector<S>) -> Vector<S> {
    [
        m[0][0] * v[0] + m[0][1] * v[1],
        m[1][0] * v[0] + m[1][1] * v[1],
    ]
}

/// Wrap an angle difference into (-pi, pi].
#[inline]
pub fn wrap_angle<S: Scalar>(a: S) -> S {
    let two_pi = S::PI() + S::PI();
    let mut a = a % two_pi;
    if a > S::PI() {
        a = a - two_pi;
    }
    if a <= -S::PI() {
        a = a + two_pi;
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perp_is_orthogonal() {
        let v = [3.0f64, -2.0];
        assert_eq!(dot(v, perp(v)), 0.0);
    }

    #[test]
    fn wrap_angle_range() {
        for k in -20..20 {
            let a = 0.37 * k as f64;
            let w = wrap_angle(a);
            assert!(w > -std::f64::consts::PI - 1e-15 && w <= std::f64::consts::PI + 1e-15);
            assert!(((w - a) / (2.0 * std::f64::consts::PI)).round().abs() < 20.0);
            assert!((wrap_angle(w) - w).abs() < 1e-12);
        }
    }

    #[test]
    fn generic_over_f32() {
        let v: Vector<f32> = [1.0, 2.0];
        assert!((norm(v) - 5.0f32.sqrt()).abs() < 1e-6);
    }
}
