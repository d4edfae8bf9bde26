//! Rigid transforms and spatial (6D) vectors.
//!
//! Spatial vectors are stored angular-first: a twist is `[omega; v]` and a
//! wrench is `[torque; force]`.

use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use nalgebra::{Matrix3, Matrix6, Rotation3, Unit, UnitQuaternion, Vector3, Vector6};

use crate::linalg::skew;

/// Rigid transform `x -> R x + p`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Transform {
    fn default() -> Self {
        Self::identity()
    }
}

impl Transform {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn from_translation(p: Vector3<f64>) -> Self {
        Self { rotation: Matrix3::identity(), translation: p }
    }

    /// Rotation about `axis` (need not be normalized) by `angle` radians.
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let r = Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle);
        Self { rotation: *r.matrix(), translation: Vector3::zeros() }
    }

    /// Builds a transform from a `[w, x, y, z]` quaternion and a translation.
    pub fn from_quaternion(wxyz: [f64; 4], p: Vector3<f64>) -> Self {
        let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
            wxyz[0], wxyz[1], wxyz[2], wxyz[3],
        ));
        Self { rotation: *q.to_rotation_matrix().matrix(), translation: p }
    }

    /// `self * other`, i.e. apply `other` first.
    pub fn compose(&self, other: &Transform) -> Transform {
        Transform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Transform {
        let rt = self.rotation.transpose();
        Transform { rotation: rt, translation: -(rt * self.translation) }
    }

    pub fn transform_point(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    pub fn transform_vector(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x
    }

    /// True when the rotation block is orthonormal with unit determinant.
    pub fn is_valid(&self, tol: f64) -> bool {
        let r = &self.rotation;
        ((r.transpose() * r) - Matrix3::identity()).abs().max() < tol
            && (r.determinant() - 1.0).abs() < tol
            && self.translation.iter().all(|v| v.is_finite())
    }

    /// Exponential of a unit-time twist.
    pub fn exp(xi: &SpatialMotion) -> Transform {
        let w = xi.angular;
        let theta = w.norm();
        let wh = skew(&w);
        let wh2 = wh * wh;
        let t2 = theta * theta;
        let (a, b, c) = if theta < 1e-8 {
            // Taylor coefficients of sin t / t, (1 - cos t)/t^2, (t - sin t)/t^3.
            (1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0)
        } else {
            let half = (0.5 * theta).sin() / theta;
            let c = if theta < 1e-2 {
                1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
            } else {
                (theta - theta.sin()) / (t2 * theta)
            };
            (theta.sin() / theta, 2.0 * half * half, c)
        };
        let rotation = Matrix3::identity() + wh * a + wh2 * b;
        let v = Matrix3::identity() + wh * b + wh2 * c;
        Transform { rotation, translation: v * xi.linear }
    }

    /// Adjoint `Ad_T` mapping twists expressed in the child frame into the
    /// parent frame.
    pub fn adjoint(&self) -> Matrix6<f64> {
        let r = self.rotation;
        let pr = skew(&self.translation) * r;
        let mut m = Matrix6::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        m.fixed_view_mut::<3, 3>(3, 0).copy_from(&pr);
        m.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
        m
    }

    /// `Ad_{T^-1}^T`, which carries wrenches from the child frame to the parent
    /// frame.
    pub fn dual_adjoint(&self) -> Matrix6<f64> {
        let r = self.rotation;
        let pr = skew(&self.translation) * r;
        let mut m = Matrix6::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        m.fixed_view_mut::<3, 3>(0, 3).copy_from(&pr);
        m.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
        m
    }

    /// `Ad_T v` without forming the matrix.
    pub fn apply_motion(&self, v: &SpatialMotion) -> SpatialMotion {
        let w = self.rotation * v.angular;
        SpatialMotion { angular: w, linear: self.translation.cross(&w) + self.rotation * v.linear }
    }

    /// `Ad_{T^-1} v`.
    pub fn apply_motion_inverse(&self, v: &SpatialMotion) -> SpatialMotion {
        let rt = self.rotation.transpose();
        SpatialMotion {
            angular: rt * v.angular,
            linear: rt * (v.linear - self.translation.cross(&v.angular)),
        }
    }

    /// `Ad_{T^-1}^T F`: child-frame wrench expressed in the parent frame.
    pub fn apply_force(&self, f: &SpatialForce) -> SpatialForce {
        let force = self.rotation * f.force;
        SpatialForce { torque: self.rotation * f.torque + self.translation.cross(&force), force }
    }

    /// `Ad_T^T F`: parent-frame wrench expressed in the child frame.
    pub fn apply_force_inverse(&self, f: &SpatialForce) -> SpatialForce {
        let rt = self.rotation.transpose();
        SpatialForce {
            torque: rt * (f.torque - self.translation.cross(&f.force)),
            force: rt * f.force,
        }
    }
}

impl Mul for Transform {
    type Output = Transform;
    fn mul(self, rhs: Transform) -> Transform {
        self.compose(&rhs)
    }
}

/// Twist `[omega; v]`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct SpatialMotion {
    pub angular: Vector3<f64>,
    pub linear: Vector3<f64>,
}

/// Wrench `[torque; force]`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct SpatialForce {
    pub torque: Vector3<f64>,
    pub force: Vector3<f64>,
}

macro_rules! six_vector {
    ($t:ident, $a:ident, $b:ident) => {
        impl $t {
            pub fn new($a: Vector3<f64>, $b: Vector3<f64>) -> Self {
                Self { $a, $b }
            }
            pub fn zero() -> Self {
                Self { $a: Vector3::zeros(), $b: Vector3::zeros() }
            }
            pub fn to_vector(&self) -> Vector6<f64> {
                Vector6::new(self.$a.x, self.$a.y, self.$a.z, self.$b.x, self.$b.y, self.$b.z)
            }
            pub fn from_vector(v: &Vector6<f64>) -> Self {
                Self {
                    $a: Vector3::new(v[0], v[1], v[2]),
                    $b: Vector3::new(v[3], v[4], v[5]),
                }
            }
            pub fn scale(&self, s: f64) -> Self {
                Self { $a: self.$a * s, $b: self.$b * s }
            }
        }
        impl Add for $t {
            type Output = $t;
            fn add(self, o: $t) -> $t {
                $t { $a: self.$a + o.$a, $b: self.$b + o.$b }
            }
        }
        impl AddAssign for $t {
            fn add_assign(&mut self, o: $t) {
                self.$a += o.$a;
                self.$b += o.$b;
            }
        }
        impl Sub for $t {
            type Output = $t;
            fn sub(self, o: $t) -> $t {
                $t { $a: self.$a - o.$a, $b: self.$b - o.$b }
            }
        }
        impl Neg for $t {
            type Output = $t;
            fn neg(self) -> $t {
                $t { $a: -self.$a, $b: -self.$b }
            }
        }
        impl Mul<f64> for $t {
            type Output = $t;
            fn mul(self, s: f64) -> $t {
                self.scale(s)
            }
        }
    };
}

six_vector!(SpatialMotion, angular, linear);
six_vector!(SpatialForce, torque, force);

impl SpatialMotion {
    /// Pairing with a wrench (power).
    pub fn dot(&self, f: &SpatialForce) -> f64 {
        self.angular.dot(&f.torque) + self.linear.dot(&f.force)
    }
}

impl SpatialForce {
    pub fn dot(&self, v: &SpatialMotion) -> f64 {
        v.dot(self)
    }
}

/// Lie bracket `ad_v w = [v, w]`.
pub fn lie_bracket(v: &SpatialMotion, w: &SpatialMotion) -> SpatialMotion {
    SpatialMotion {
        angular: v.angular.cross(&w.angular),
        linear: v.angular.cross(&w.linear) + v.linear.cross(&w.angular),
    }
}

/// The force cross product `v x* F = -ad_v^T F`.
pub fn dual_bracket(v: &SpatialMotion, f: &SpatialForce) -> SpatialForce {
    SpatialForce {
        torque: v.angular.cross(&f.torque) + v.linear.cross(&f.force),
        force: v.angular.cross(&f.force),
    }
}

/// `ad_v^T F`; equals `-dual_bracket(v, F)`.
pub fn ad_transpose(v: &SpatialMotion, f: &SpatialForce) -> SpatialForce {
    -dual_bracket(v, f)
}

/// Matrix of `ad_v`.
pub fn ad_matrix(v: &SpatialMotion) -> Matrix6<f64> {
    let w = skew(&v.angular);
    let l = skew(&v.linear);
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&w);
    m.fixed_view_mut::<3, 3>(3, 0).copy_from(&l);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&w);
    m
}

/// Rigid-body inertia described by mass, centre of mass (in the body frame)
/// and rotational inertia about the centre of mass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpatialInertia {
    pub mass: f64,
    pub com: Vector3<f64>,
    pub inertia: Matrix3<f64>,
}

impl SpatialInertia {
    pub fn new(mass: f64, com: Vector3<f64>, inertia: Matrix3<f64>) -> Self {
        Self { mass, com, inertia }
    }

    pub fn point(mass: f64, com: Vector3<f64>) -> Self {
        Self { mass, com, inertia: Matrix3::zeros() }
    }

    pub fn solid_sphere(mass: f64, radius: f64) -> Self {
        let i = 0.4 * mass * radius * radius;
        Self { mass, com: Vector3::zeros(), inertia: Matrix3::from_diagonal_element(i) }
    }

    pub fn solid_box(mass: f64, half_extents: Vector3<f64>) -> Self {
        let e = half_extents * 2.0;
        let k = mass / 12.0;
        Self {
            mass,
            com: Vector3::zeros(),
            inertia: Matrix3::from_diagonal(&Vector3::new(
                k * (e.y * e.y + e.z * e.z),
                k * (e.x * e.x + e.z * e.z),
                k * (e.x * e.x + e.y * e.y),
            )),
        }
    }

    /// 6x6 matrix about the body-frame origin.
    pub fn matrix(&self) -> Matrix6<f64> {
        let c = skew(&self.com);
        let m = self.mass;
        let mut out = Matrix6::zeros();
        out.fixed_view_mut::<3, 3>(0, 0).copy_from(&(self.inertia + c * c.transpose() * m));
        out.fixed_view_mut::<3, 3>(0, 3).copy_from(&(c * m));
        out.fixed_view_mut::<3, 3>(3, 0).copy_from(&(c.transpose() * m));
        out.fixed_view_mut::<3, 3>(3, 3).copy_from(&(Matrix3::identity() * m));
        out
    }

    /// `I v` without forming the 6x6 matrix.
    pub fn apply(&self, v: &SpatialMotion) -> SpatialForce {
        let m = self.mass;
        let lin = v.linear + v.angular.cross(&self.com);
        let force = lin * m;
        let torque = self.inertia * v.angular + self.com.cross(&force);
        SpatialForce { torque, force }
    }

    /// Flattened parameters `[m, cx, cy, cz, Ixx, Iyy, Izz, Ixy, Ixz, Iyz]`.
    pub fn to_params(&self) -> [f64; 10] {
        let i = &self.inertia;
        [
            self.mass, self.com.x, self.com.y, self.com.z,
            i[(0, 0)], i[(1, 1)], i[(2, 2)], i[(0, 1)], i[(0, 2)], i[(1, 2)],
        ]
    }

    pub fn from_params(p: &[f64]) -> Self {
        let inertia = Matrix3::new(p[4], p[7], p[8], p[7], p[5], p[9], p[8], p[9], p[6]);
        Self { mass: p[0], com: Vector3::new(p[1], p[2], p[3]), inertia }
    }

    /// Positive mass and a symmetric positive semidefinite rotational inertia
    /// satisfying the triangle inequalities.
    pub fn is_physical(&self) -> bool {
        if !(self.mass > 0.0) || !self.com.iter().all(|v| v.is_finite()) {
            return false;
        }
        let eig = self.inertia.symmetric_eigenvalues();
        let tol = 1e-12 * eig.amax().max(1.0);
        if eig.iter().any(|&e| e < -tol) {
            return false;
        }
        let (a, b, c) = (eig[0], eig[1], eig[2]);
        a + b >= c - tol && a + c >= b - tol && b + c >= a - tol
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v3() -> impl Strategy<Value = Vector3<f64>> {
        (-2.0..2.0f64, -2.0..2.0f64, -2.0..2.0f64).prop_map(|(a, b, c)| Vector3::new(a, b, c))
    }

    fn twist() -> impl Strategy<Value = SpatialMotion> {
        (v3(), v3()).prop_map(|(a, l)| SpatialMotion::new(a, l))
    }

    fn transform() -> impl Strategy<Value = Transform> {
        (twist(), v3()).prop_map(|(xi, p)| {
            let mut t = Transform::exp(&xi);
            t.translation += p;
            t
        })
    }

    proptest! {
        #[test]
        fn exp_produces_valid_transforms(xi in twist()) {
            prop_assert!(Transform::exp(&xi).is_valid(1e-12));
        }

        #[test]
        fn compose_with_inverse_is_identity(t in transform()) {
            let id = t.compose(&t.inverse());
            prop_assert!((id.rotation - Matrix3::identity()).abs().max() < 1e-12);
            prop_assert!(id.translation.norm() < 1e-12);
        }

        #[test]
        fn adjoint_matches_matrix_form(t in transform(), v in twist(), f in twist()) {
            let f = SpatialForce::new(f.angular, f.linear);
            let a = t.adjoint() * v.to_vector();
            prop_assert!((a - t.apply_motion(&v).to_vector()).amax() < 1e-12);
            let ai = t.inverse().adjoint() * v.to_vector();
            prop_assert!((ai - t.apply_motion_inverse(&v).to_vector()).amax() < 1e-12);
            let d = t.dual_adjoint() * f.to_vector();
            prop_assert!((d - t.apply_force(&f).to_vector()).amax() < 1e-12);
            let di = t.adjoint().transpose() * f.to_vector();
            prop_assert!((di - t.apply_force_inverse(&f).to_vector()).amax() < 1e-12);
        }

        #[test]
        fn dual_adjoint_is_inverse_transpose(t in transform()) {
            let lhs = t.dual_adjoint();
            let rhs = t.inverse().adjoint().transpose();
            prop_assert!((lhs - rhs).amax() < 1e-12);
        }

        #[test]
        fn power_is_frame_invariant(t in transform(), v in twist(), f in twist()) {
            let f = SpatialForce::new(f.angular, f.linear);
            // child-frame pair vs parent-frame pair
            let p = v.dot(&f);
            let q = t.apply_motion(&v).dot(&t.apply_force(&f));
            prop_assert!((p - q).abs() < 1e-10 * (1.0 + p.abs()));
        }

        #[test]
        fn brackets_are_dual(v in twist(), w in twist(), f in twist()) {
            let f = SpatialForce::new(f.angular, f.linear);
            let lhs = dual_bracket(&v, &f).dot(&w);
            let rhs = -f.dot(&lie_bracket(&v, &w));
            prop_assert!((lhs - rhs).abs() < 1e-10);
            let m = ad_matrix(&v) * w.to_vector();
            prop_assert!((m - lie_bracket(&v, &w).to_vector()).amax() < 1e-12);
        }

        #[test]
        fn inertia_apply_matches_matrix(m in 0.1..5.0f64, c in v3(), v in twist()) {
            let i = SpatialInertia::new(m, c, Matrix3::new(1.0, 0.1, 0.0, 0.1, 0.8, 0.05, 0.0, 0.05, 0.9));
            let a = i.matrix() * v.to_vector();
            prop_assert!((a - i.apply(&v).to_vector()).amax() < 1e-11);
            let roundtrip = SpatialInertia::from_params(&i.to_params());
            prop_assert_eq!(roundtrip, i);
        }
    }

    #[test]
    fn exp_small_angle_branch_is_continuous() {
        let axis = Vector3::new(0.3, -0.4, 0.5).normalize();
        let lin = Vector3::new(0.2, 0.1, -0.3);
        let (t0, t1) = (0.99e-8, 1.01e-8);
        let below = Transform::exp(&SpatialMotion::new(axis * t0, lin));
        let above = Transform::exp(&SpatialMotion::new(axis * t1, lin));
        // across the switch the map should only move by its first-order change
        let dr = above.rotation - below.rotation - skew(&axis) * (t1 - t0);
        assert!(dr.abs().max() < 1e-15);
        let dp = above.translation - below.translation - skew(&axis) * lin * ((t1 - t0) / 2.0);
        assert!(dp.norm() < 1e-15);
    }

    #[test]
    fn exp_of_pure_rotation_matches_axis_angle() {
        let axis = Vector3::new(0.0, 0.0, 1.0);
        let t = Transform::exp(&SpatialMotion::new(axis * 0.7, Vector3::zeros()));
        let r = Transform::from_axis_angle(&axis, 0.7);
        assert!((t.rotation - r.rotation).abs().max() < 1e-15);
    }

    #[test]
    fn box_inertia_is_physical() {
        assert!(SpatialInertia::solid_box(2.0, Vector3::new(0.5, 0.2, 0.1)).is_physical());
        let bad = SpatialInertia::new(1.0, Vector3::zeros(), Matrix3::from_diagonal(&Vector3::new(1.0, 0.1, 0.1)));
        assert!(!bad.is_physical());
    }
}
