//! Scalars and 3-vectors carrying their Jacobian with respect to the
//! generalized coordinates. A zero-column Jacobian gives plain evaluation, so
//! contact formulas are written once and used for both values and gradients.

use nalgebra::{Matrix3xX, RowDVector, Vector3};

use crate::linalg::skew;
use crate::skeleton::{Kinematics, Skeleton};

#[derive(Clone, Debug)]
pub struct TScalar {
    pub v: f64,
    pub d: RowDVector<f64>,
}

#[derive(Clone, Debug)]
pub struct TVec {
    pub v: Vector3<f64>,
    pub d: Matrix3xX<f64>,
}

impl TScalar {
    pub fn constant(v: f64, n: usize) -> Self {
        Self { v, d: RowDVector::zeros(n) }
    }
    pub fn add(&self, o: &TScalar) -> TScalar {
        TScalar { v: self.v + o.v, d: &self.d + &o.d }
    }
    pub fn sub(&self, o: &TScalar) -> TScalar {
        TScalar { v: self.v - o.v, d: &self.d - &o.d }
    }
    pub fn mul(&self, o: &TScalar) -> TScalar {
        TScalar { v: self.v * o.v, d: &self.d * o.v + &o.d * self.v }
    }
    pub fn scale(&self, s: f64) -> TScalar {
        TScalar { v: self.v * s, d: &self.d * s }
    }
    pub fn div(&self, o: &TScalar) -> TScalar {
        let v = self.v / o.v;
        TScalar { v, d: (&self.d - &o.d * v) / o.v }
    }
    pub fn sqrt(&self) -> TScalar {
        let r = self.v.sqrt();
        TScalar { v: r, d: &self.d * (0.5 / r) }
    }
}

impl TVec {
    pub fn constant(v: Vector3<f64>, n: usize) -> Self {
        Self { v, d: Matrix3xX::zeros(n) }
    }
    pub fn ncols(&self) -> usize {
        self.d.ncols()
    }
    pub fn add(&self, o: &TVec) -> TVec {
        TVec { v: self.v + o.v, d: &self.d + &o.d }
    }
    pub fn sub(&self, o: &TVec) -> TVec {
        TVec { v: self.v - o.v, d: &self.d - &o.d }
    }
    pub fn neg(&self) -> TVec {
        TVec { v: -self.v, d: -&self.d }
    }
    pub fn scale(&self, s: f64) -> TVec {
        TVec { v: self.v * s, d: &self.d * s }
    }
    pub fn scale_by(&self, s: &TScalar) -> TVec {
        TVec { v: self.v * s.v, d: &self.d * s.v + self.v * &s.d }
    }
    pub fn dot(&self, o: &TVec) -> TScalar {
        TScalar { v: self.v.dot(&o.v), d: o.v.transpose() * &self.d + self.v.transpose() * &o.d }
    }
    pub fn cross(&self, o: &TVec) -> TVec {
        // d(a x b) = da x b + a x db = -[b]x da + [a]x db
        TVec { v: self.v.cross(&o.v), d: skew(&self.v) * &o.d - skew(&o.v) * &self.d }
    }
    pub fn norm(&self) -> TScalar {
        self.dot(self).sqrt()
    }
    pub fn normalize(&self) -> TVec {
        let n = self.norm();
        let inv = TScalar { v: 1.0 / n.v, d: -&n.d / (n.v * n.v) };
        self.scale_by(&inv)
    }
    /// `(a * wa + b * wb) / (wa + wb)` for constant weights.
    pub fn weighted(a: &TVec, wa: f64, b: &TVec, wb: f64) -> TVec {
        a.scale(wa).add(&b.scale(wb)).scale(1.0 / (wa + wb))
    }
}

/// Builds tracked world-space quantities from one configuration.
pub struct Tracker<'a> {
    ctx: Option<(&'a Skeleton, &'a Kinematics)>,
    /// Number of Jacobian columns; zero for value-only evaluation.
    pub n: usize,
}

impl<'a> Tracker<'a> {
    pub fn new(skel: &'a Skeleton, kin: &'a Kinematics, with_gradients: bool) -> Self {
        if with_gradients {
            Self { ctx: Some((skel, kin)), n: skel.dofs() }
        } else {
            Self::values()
        }
    }

    /// Value-only evaluation.
    pub fn values() -> Self {
        Self { ctx: None, n: 0 }
    }

    /// A point fixed on `body` (world when `None`) currently at world `p`.
    pub fn point(&self, body: Option<usize>, p: Vector3<f64>) -> TVec {
        let mut d = Matrix3xX::zeros(self.n);
        if let (Some(b), Some((skel, kin))) = (body, self.ctx) {
            for j in 0..self.n {
                if skel.supports(j, b) {
                    let s = &kin.screws[j];
                    d.set_column(j, &(s.angular.cross(&p) + s.linear));
                }
            }
        }
        TVec { v: p, d }
    }

    /// A direction fixed on `body` currently equal to world `u`.
    pub fn direction(&self, body: Option<usize>, u: Vector3<f64>) -> TVec {
        let mut d = Matrix3xX::zeros(self.n);
        if let (Some(b), Some((skel, kin))) = (body, self.ctx) {
            for j in 0..self.n {
                if skel.supports(j, b) {
                    d.set_column(j, &kin.screws[j].angular.cross(&u));
                }
            }
        }
        TVec { v: u, d }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    fn lift(v: Vector3<f64>, d: [[f64; 2]; 3]) -> TVec {
        let mut m = Matrix3xX::zeros(2);
        for r in 0..3 {
            for c in 0..2 {
                m[(r, c)] = d[r][c];
            }
        }
        TVec { v, d: m }
    }

    #[test]
    fn chain_rule_matches_finite_difference() {
        // a(x) and b(x) are affine in two parameters
        let a0 = Vector3::new(0.3, 1.0, -0.2);
        let b0 = Vector3::new(-0.5, 0.4, 0.9);
        let da = [[1.0, 0.2], [0.0, -0.5], [0.3, 0.1]];
        let db = [[-0.2, 0.0], [0.7, 0.3], [0.1, -1.0]];
        let f = |x: &DVector<f64>| {
            let mk = |v0: Vector3<f64>, d: &[[f64; 2]; 3]| {
                v0 + Vector3::new(
                    d[0][0] * x[0] + d[0][1] * x[1],
                    d[1][0] * x[0] + d[1][1] * x[1],
                    d[2][0] * x[0] + d[2][1] * x[1],
                )
            };
            let a = mk(a0, &da);
            let b = mk(b0, &db);
            let n = a.cross(&b).normalize();
            n * a.dot(&b) / b.norm()
        };
        let ta = lift(a0, da);
        let tb = lift(b0, db);
        let t = ta.cross(&tb).normalize().scale_by(&ta.dot(&tb).div(&tb.norm()));
        let x = DVector::zeros(2);
        assert!((t.v - f(&x)).norm() < 1e-14);
        for j in 0..2 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] = 1e-6;
            xm[j] = -1e-6;
            let fd = (f(&xp) - f(&xm)) / 2e-6;
            assert!((fd - t.d.column(j)).norm() < 1e-8);
        }
    }
}
