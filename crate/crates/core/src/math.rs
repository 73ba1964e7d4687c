//! Small fixed-size linear algebra on top of nalgebra storage types.
//!
//! nalgebra's decompositions and quaternion type require `RealField`; the
//! renderer only needs products, transposes and a handful of closed forms,
//! which are written here against [`Real`] so that f32 and f64 share one path.

use nalgebra::{Matrix2, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::scalar::Real;

pub type Vec2<T> = nalgebra::Vector2<T>;
pub type Vec3<T> = Vector3<T>;
pub type Mat2<T> = Matrix2<T>;
pub type Mat3<T> = Matrix3<T>;
pub type Mat2x3<T> = nalgebra::Matrix2x3<T>;

#[inline]
pub fn dot3<T: Real>(a: &Vec3<T>, b: &Vec3<T>) -> T {
    a.x * b.x + a.y * b.y + a.z * b.z
}

#[inline]
pub fn norm3<T: Real>(a: &Vec3<T>) -> T {
    dot3(a, a).sqrt()
}

#[inline]
pub fn cross<T: Real>(a: &Vec3<T>, b: &Vec3<T>) -> Vec3<T> {
    Vec3::new(
        a.y * b.z - a.z * b.y,
        a.z * b.x - a.x * b.z,
        a.x * b.y - a.y * b.x,
    )
}

/// `[v]×`, the matrix with `skew(v) * w == v × w`.
pub fn skew<T: Real>(v: &Vec3<T>) -> Mat3<T> {
    let z = T::zero();
    Mat3::new(z, -v.z, v.y, v.z, z, -v.x, -v.y, v.x, z)
}

/// Frobenius inner product.
#[inline]
pub fn frob3<T: Real>(a: &Mat3<T>, b: &Mat3<T>) -> T {
    let mut acc = T::zero();
    for i in 0..9 {
        acc += a[i] * b[i];
    }
    acc
}

/// Inverse and determinant of a 2×2 matrix. `None` when the determinant is not positive and finite.
pub fn inverse2<T: Real>(m: &Mat2<T>) -> Option<(Mat2<T>, T)> {
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    if !(det > T::zero()) || !det.is_finite() {
        return None;
    }
    let inv = Mat2::new(m[(1, 1)], -m[(0, 1)], -m[(1, 0)], m[(0, 0)]) / det;
    Some((inv, det))
}

/// Largest eigenvalue of a symmetric 2×2 matrix.
pub fn max_eigen_sym2<T: Real>(m: &Mat2<T>) -> T {
    let half = T::lit(0.5);
    let mid = half * (m[(0, 0)] + m[(1, 1)]);
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    let disc = (mid * mid - det).max(T::zero()).sqrt();
    mid + disc
}

/// Gradient of `L(Exp(δ) M Exp(δ)ᵀ)` at δ = 0 for symmetric `M`, given the symmetric
/// upstream gradient `g = dL/dM`. Shared by Gaussian rotations and camera rotations.
pub fn left_rotation_grad<T: Real>(m: &Mat3<T>, g: &Mat3<T>) -> Vec3<T> {
    let two = T::lit(2.0);
    // <g, A_i m> with A_i = skew(e_i); g symmetric so the two product terms coincide.
    let mut out = Vec3::zeros();
    for i in 0..3 {
        let mut e = Vec3::zeros();
        e[i] = T::one();
        let a = skew(&e);
        out[i] = two * frob3(&(a * m), g);
    }
    out
}

/// Unit quaternion (w, x, y, z), Hamilton convention.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quat<T> {
    pub w: T,
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Real> Quat<T> {
    pub fn new(w: T, x: T, y: T, z: T) -> Self {
        Self { w, x, y, z }
    }

    pub fn identity() -> Self {
        Self::new(T::one(), T::zero(), T::zero(), T::zero())
    }

    pub fn norm(&self) -> T {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(&self) -> Self {
        let n = self.norm();
        Self::new(self.w / n, self.x / n, self.y / n, self.z / n)
    }

    pub fn neg(&self) -> Self {
        Self::new(-self.w, -self.x, -self.y, -self.z)
    }

    pub fn conj(&self) -> Self {
        Self::new(self.w, -self.x, -self.y, -self.z)
    }

    /// Hamilton product `self ⊗ rhs`.
    pub fn mul(&self, r: &Self) -> Self {
        let (a, b) = (self, r);
        Self::new(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }

    /// Exponential map from a rotation vector (axis · angle).
    pub fn from_rotation_vector(v: &Vec3<T>) -> Self {
        let theta = norm3(v);
        let half = T::lit(0.5) * theta;
        if theta < T::lit(1e-12) {
            let h = T::lit(0.5);
            return Self::new(T::one(), v.x * h, v.y * h, v.z * h).normalized();
        }
        let s = half.sin() / theta;
        Self::new(half.cos(), v.x * s, v.y * s, v.z * s)
    }

    /// Logarithm map to a rotation vector in the ball of radius π.
    pub fn to_rotation_vector(&self) -> Vec3<T> {
        let q = if self.w < T::zero() { self.neg() } else { *self };
        let v = Vec3::new(q.x, q.y, q.z);
        let s = norm3(&v);
        if s < T::lit(1e-12) {
            return v * T::lit(2.0);
        }
        let angle = T::lit(2.0) * s.atan2(q.w);
        v * (angle / s)
    }

    pub fn to_matrix(&self) -> Mat3<T> {
        let one = T::one();
        let two = T::lit(2.0);
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        Mat3::new(
            one - two * (y * y + z * z),
            two * (x * y - w * z),
            two * (x * z + w * y),
            two * (x * y + w * z),
            one - two * (x * x + z * z),
            two * (y * z - w * x),
            two * (x * z - w * y),
            two * (y * z + w * x),
            one - two * (x * x + y * y),
        )
    }

    pub fn rotate(&self, v: &Vec3<T>) -> Vec3<T> {
        self.to_matrix() * v
    }

    /// Rotation matrix to quaternion (Shepperd's method).
    pub fn from_matrix(m: &Mat3<T>) -> Self {
        let one = T::one();
        let quarter = T::lit(0.25);
        let trace = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
        let q = if trace > T::zero() {
            let s = (trace + one).sqrt() * T::lit(2.0);
            Self::new(
                quarter * s,
                (m[(2, 1)] - m[(1, 2)]) / s,
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(1, 0)] - m[(0, 1)]) / s,
            )
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = (one + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * T::lit(2.0);
            Self::new(
                (m[(2, 1)] - m[(1, 2)]) / s,
                quarter * s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
            )
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = (one + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * T::lit(2.0);
            Self::new(
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                quarter * s,
                (m[(1, 2)] + m[(2, 1)]) / s,
            )
        } else {
            let s = (one + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * T::lit(2.0);
            Self::new(
                (m[(1, 0)] - m[(0, 1)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
                (m[(1, 2)] + m[(2, 1)]) / s,
                quarter * s,
            )
        };
        q.normalized()
    }

    /// Left perturbation `Exp(δ) ⊗ self`.
    pub fn perturb_left(&self, delta: &Vec3<T>) -> Self {
        Self::from_rotation_vector(delta).mul(self).normalized()
    }

    /// Geodesic angle between two rotations, in radians.
    pub fn angle_to(&self, other: &Self) -> T {
        let d = self.conj().mul(other);
        norm3(&d.to_rotation_vector())
    }

    pub fn cast<U: Real>(&self) -> Quat<U> {
        Quat::new(
            U::lit(self.w.to_f64_lossy()),
            U::lit(self.x.to_f64_lossy()),
            U::lit(self.y.to_f64_lossy()),
            U::lit(self.z.to_f64_lossy()),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_roundtrip() {
        let q = Quat::<f64>::new(0.3, -0.5, 0.7, 0.2).normalized();
        let back = Quat::from_matrix(&q.to_matrix());
        let same = (back.w - q.w).abs() < 1e-12 || (back.w + q.w).abs() < 1e-12;
        assert!(same);
        assert!((back.to_matrix() - q.to_matrix()).abs().max() < 1e-12);
    }

    #[test]
    fn exp_log_roundtrip() {
        let v = Vec3::new(0.1, -0.4, 0.25);
        let q: Quat<f64> = Quat::from_rotation_vector(&v);
        assert!((q.to_rotation_vector() - v).abs().max() < 1e-12);
        let tiny = Vec3::<f64>::new(1e-14, 0.0, 0.0);
        assert!((Quat::from_rotation_vector(&tiny).norm() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn skew_is_cross() {
        let a = Vec3::new(1.0, 2.0, -3.0);
        let b = Vec3::new(-0.5, 0.25, 4.0);
        assert!((skew(&a) * b - cross(&a, &b)).abs().max() < 1e-15);
    }

    #[test]
    fn left_rotation_grad_matches_finite_difference() {
        let m: Mat3<f64> = {
            let r = Quat::new(0.9, 0.1, -0.3, 0.2).normalized().to_matrix();
            r * Mat3::from_diagonal(&Vec3::new(4.0, 1.0, 0.25)) * r.transpose()
        };
        let g = Mat3::new(1.0, 0.2, -0.4, 0.2, -2.0, 0.5, -0.4, 0.5, 0.7);
        let analytic = left_rotation_grad(&m, &g);
        let h = 1e-6;
        for i in 0..3 {
            let mut d = Vec3::zeros();
            d[i] = h;
            let rp = Quat::from_rotation_vector(&d).to_matrix();
            let rm = Quat::from_rotation_vector(&(-d)).to_matrix();
            let fp = frob3(&g, &(rp * m * rp.transpose()));
            let fm = frob3(&g, &(rm * m * rm.transpose()));
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - analytic[i]).abs() < 1e-7, "{i}: {fd} vs {}", analytic[i]);
        }
    }
}
