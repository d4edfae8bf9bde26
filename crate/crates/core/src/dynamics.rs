//! Mass matrix, bias forces, the inverse mass matrix and their derivatives.
//!
//! Everything is computed recursively in body coordinates. Inverse dynamics
//! is the Lie-group Newton-Euler recursion; the inverse mass matrix comes from
//! the articulated-body recursion run with zero velocity and zero gravity.

use nalgebra::{DMatrix, DVector, Matrix6, Vector6};

use crate::error::{Error, Result};
use crate::skeleton::{Kinematics, Skeleton};
use crate::spatial::{dual_bracket, lie_bracket, SpatialForce, SpatialMotion};

/// Per-configuration data shared by all dynamics queries at one `q`.
#[derive(Clone, Debug)]
pub struct ArticulatedCache<'a> {
    skel: &'a Skeleton,
    pub q: DVector<f64>,
    pub kin: Kinematics,
    inertia: Vec<Matrix6<f64>>,
    // Ad_{T_i^{-1}} for the parent-to-body transform of each body
    ad_inv: Vec<Matrix6<f64>>,
    abi: Option<ArticulatedInertias>,
}

/// Articulated-body inertias of the recursion, which depend on `q` only.
#[derive(Clone, Debug)]
struct ArticulatedInertias {
    ai: Vec<Matrix6<f64>>,
    pi: Vec<Matrix6<f64>>,
    psi: Vec<f64>,
    ai_s: Vec<Vector6<f64>>,
}

/// Joint torques together with their derivatives.
#[derive(Clone, Debug)]
pub struct InverseDynamicsDerivatives {
    pub tau: DVector<f64>,
    pub dtau_dq: DMatrix<f64>,
    pub dtau_dqd: DMatrix<f64>,
}

impl<'a> ArticulatedCache<'a> {
    pub fn new(skel: &'a Skeleton, q: &DVector<f64>) -> Result<Self> {
        skel.check_coords(q, "q")?;
        let kin = skel.forward_kinematics(q);
        let inertia = skel.bodies().iter().map(|b| b.inertia.matrix()).collect();
        let ad_inv = kin.local.iter().map(|t| t.inverse().adjoint()).collect();
        Ok(Self { skel, q: q.clone(), kin, inertia, ad_inv, abi: None })
    }

    pub fn skeleton(&self) -> &Skeleton {
        self.skel
    }

    fn dofs(&self) -> usize {
        self.skel.dofs()
    }

    fn s(&self, i: usize) -> Vector6<f64> {
        self.skel.screw(i).to_vector()
    }

    fn gravity_accel(&self, gravity: bool) -> Vector6<f64> {
        if gravity {
            let g = self.skel.gravity();
            Vector6::new(0.0, 0.0, 0.0, -g.x, -g.y, -g.z)
        } else {
            Vector6::zeros()
        }
    }

    /// Composite-rigid-body mass matrix.
    pub fn mass_matrix(&self) -> DMatrix<f64> {
        let n = self.dofs();
        let mut ic = self.inertia.clone();
        for i in (0..n).rev() {
            if let Some(p) = self.skel.parent(i) {
                let a = &self.ad_inv[i];
                let add = a.transpose() * ic[i] * a;
                ic[p] += add;
            }
        }
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            let mut f = ic[i] * self.s(i);
            m[(i, i)] = self.s(i).dot(&f);
            let mut j = i;
            while let Some(p) = self.skel.parent(j) {
                f = self.ad_inv[j].transpose() * f;
                j = p;
                let v = self.s(j).dot(&f);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        m
    }

    /// Generalized forces for accelerations `qdd`; with `gravity` set the
    /// result includes the gravity load.
    pub fn inverse_dynamics(&self, qd: &DVector<f64>, qdd: &DVector<f64>, gravity: bool) -> DVector<f64> {
        self.rnea(qd, qdd, gravity, false).tau
    }

    /// Coriolis, centrifugal and gravity terms `c(q, qd)`.
    pub fn bias_forces(&self, qd: &DVector<f64>) -> DVector<f64> {
        let n = self.dofs();
        self.inverse_dynamics(qd, &DVector::zeros(n), true)
    }

    /// Inverse dynamics with analytic derivatives in `q` and `qd`.
    pub fn inverse_dynamics_derivatives(
        &self,
        qd: &DVector<f64>,
        qdd: &DVector<f64>,
        gravity: bool,
    ) -> InverseDynamicsDerivatives {
        self.rnea(qd, qdd, gravity, true)
    }

    fn rnea(&self, qd: &DVector<f64>, qdd: &DVector<f64>, gravity: bool, derivs: bool) -> InverseDynamicsDerivatives {
        let n = self.dofs();
        let skel = self.skel;
        let a0 = self.gravity_accel(gravity);
        let mut v = vec![Vector6::zeros(); n];
        let mut a = vec![Vector6::zeros(); n];
        // parent quantities already mapped into the body frame
        let mut v_in = vec![Vector6::zeros(); n];
        let mut a_in = vec![Vector6::zeros(); n];
        for i in 0..n {
            let (vp, ap) = match skel.parent(i) {
                Some(p) => (v[p], a[p]),
                None => (Vector6::zeros(), a0),
            };
            v_in[i] = self.ad_inv[i] * vp;
            a_in[i] = self.ad_inv[i] * ap;
            let s = self.s(i);
            v[i] = v_in[i] + s * qd[i];
            a[i] = a_in[i] + ad(&v[i], &(s * qd[i])) + s * qdd[i];
        }
        let mut f = vec![Vector6::zeros(); n];
        for i in 0..n {
            let iv = self.inertia[i] * v[i];
            f[i] = self.inertia[i] * a[i] + dual(&v[i], &iv);
        }
        for i in (0..n).rev() {
            if let Some(p) = skel.parent(i) {
                let up = self.ad_inv[i].transpose() * f[i];
                f[p] += up;
            }
        }
        let tau = DVector::from_fn(n, |i, _| self.s(i).dot(&f[i]));
        if !derivs {
            return InverseDynamicsDerivatives {
                tau,
                dtau_dq: DMatrix::zeros(0, 0),
                dtau_dqd: DMatrix::zeros(0, 0),
            };
        }

        let mut dtau_dq = DMatrix::zeros(n, n);
        let mut dtau_dqd = DMatrix::zeros(n, n);
        let mut dv = vec![Vector6::zeros(); n];
        let mut da = vec![Vector6::zeros(); n];
        let mut df = vec![Vector6::zeros(); n];
        for wrt_q in [true, false] {
            for j in 0..n {
                for i in 0..n {
                    let (dvp, dap) = match skel.parent(i) {
                        Some(p) => (dv[p], da[p]),
                        None => (Vector6::zeros(), Vector6::zeros()),
                    };
                    let s = self.s(i);
                    let mut dvi = self.ad_inv[i] * dvp;
                    if i == j {
                        if wrt_q {
                            dvi -= ad(&s, &v_in[i]);
                        } else {
                            dvi += s;
                        }
                    }
                    let mut dai = self.ad_inv[i] * dap + ad(&dvi, &(s * qd[i]));
                    if i == j {
                        if wrt_q {
                            dai -= ad(&s, &a_in[i]);
                        } else {
                            dai += ad(&v[i], &s);
                        }
                    }
                    dv[i] = dvi;
                    da[i] = dai;
                }
                for i in 0..n {
                    let iv = self.inertia[i] * v[i];
                    let idv = self.inertia[i] * dv[i];
                    df[i] = self.inertia[i] * da[i] + dual(&dv[i], &iv) + dual(&v[i], &idv);
                }
                for i in (0..n).rev() {
                    if let Some(p) = skel.parent(i) {
                        let mut g = df[i];
                        if wrt_q && i == j {
                            g += dual(&self.s(i), &f[i]);
                        }
                        let up = self.ad_inv[i].transpose() * g;
                        df[p] += up;
                    }
                }
                let out = if wrt_q { &mut dtau_dq } else { &mut dtau_dqd };
                for i in 0..n {
                    out[(i, j)] = self.s(i).dot(&df[i]);
                }
            }
        }
        InverseDynamicsDerivatives { tau, dtau_dq, dtau_dqd }
    }

    fn articulated(&mut self) -> Result<&ArticulatedInertias> {
        if self.abi.is_none() {
            let n = self.dofs();
            let mut ai = self.inertia.clone();
            let mut pi = vec![Matrix6::zeros(); n];
            let mut psi = vec![0.0; n];
            let mut ai_s = vec![Vector6::zeros(); n];
            for i in (0..n).rev() {
                let s = self.s(i);
                let us = ai[i] * s;
                let d = s.dot(&us);
                let scale = ai[i].amax().max(1e-300);
                if !(d.abs() > 1e-12 * scale) || !d.is_finite() {
                    return Err(Error::SingularMass { joint: i });
                }
                psi[i] = 1.0 / d;
                ai_s[i] = us;
                pi[i] = ai[i] - us * us.transpose() * psi[i];
                if let Some(p) = self.skel.parent(i) {
                    let a = &self.ad_inv[i];
                    let add = a.transpose() * pi[i] * a;
                    ai[p] += add;
                }
            }
            self.abi = Some(ArticulatedInertias { ai, pi, psi, ai_s });
        }
        Ok(self.abi.as_ref().unwrap())
    }

    /// `M^{-1} z` by the articulated-body recursion.
    pub fn minv_times(&mut self, z: &DVector<f64>) -> Result<DVector<f64>> {
        self.skel.check_coords(z, "z")?;
        let n = self.dofs();
        let skel = self.skel;
        let ad_inv = self.ad_inv.clone();
        let abi = self.articulated()?;
        let mut beta = vec![Vector6::zeros(); n];
        let mut alpha = vec![0.0; n];
        for i in (0..n).rev() {
            let s = skel.screw(i).to_vector();
            alpha[i] = z[i] - s.dot(&beta[i]);
            let b = beta[i] + abi.ai_s[i] * (abi.psi[i] * alpha[i]);
            if let Some(p) = skel.parent(i) {
                beta[p] += ad_inv[i].transpose() * b;
            }
        }
        let mut acc = vec![Vector6::zeros(); n];
        let mut x = DVector::zeros(n);
        for i in 0..n {
            let ap = match skel.parent(i) {
                Some(p) => ad_inv[i] * acc[p],
                None => Vector6::zeros(),
            };
            let xi = abi.psi[i] * (alpha[i] - abi.ai_s[i].dot(&ap));
            x[i] = xi;
            acc[i] = ap + skel.screw(i).to_vector() * xi;
        }
        Ok(x)
    }

    /// Dense `M^{-1}`, one recursion per column.
    pub fn minv(&mut self) -> Result<DMatrix<f64>> {
        let n = self.dofs();
        let mut out = DMatrix::zeros(n, n);
        for j in 0..n {
            let mut e = DVector::zeros(n);
            e[j] = 1.0;
            let col = self.minv_times(&e)?;
            out.set_column(j, &col);
        }
        // symmetrize away round-off
        Ok((&out + out.transpose()) * 0.5)
    }

    /// `d(M x)/dq` for fixed `x`, i.e. the derivative of gravity-free inverse
    /// dynamics at zero velocity.
    pub fn mass_matrix_times_derivative(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let n = self.dofs();
        self.rnea(&DVector::zeros(n), x, false, true).dtau_dq
    }

    /// `d(M^{-1} z)/dq` for fixed `z`, given the dense inverse.
    pub fn minv_times_derivative(&mut self, z: &DVector<f64>, minv: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let x = minv * z;
        let dmx = self.mass_matrix_times_derivative(&x);
        Ok(-(minv * dmx))
    }

    /// Articulated inertia of each body, exposed for inspection.
    pub fn articulated_inertias(&mut self) -> Result<Vec<Matrix6<f64>>> {
        Ok(self.articulated()?.ai.clone())
    }

    /// Projected inertias `Pi_i` passed to each parent.
    pub fn projected_inertias(&mut self) -> Result<Vec<Matrix6<f64>>> {
        Ok(self.articulated()?.pi.clone())
    }
}

fn ad(v: &Vector6<f64>, w: &Vector6<f64>) -> Vector6<f64> {
    lie_bracket(&SpatialMotion::from_vector(v), &SpatialMotion::from_vector(w)).to_vector()
}

fn dual(v: &Vector6<f64>, f: &Vector6<f64>) -> Vector6<f64> {
    dual_bracket(&SpatialMotion::from_vector(v), &SpatialForce::from_vector(f)).to_vector()
}

/// Convenience wrapper: `M(q)`.
pub fn mass_matrix(skel: &Skeleton, q: &DVector<f64>) -> Result<DMatrix<f64>> {
    Ok(ArticulatedCache::new(skel, q)?.mass_matrix())
}

/// Convenience wrapper: `c(q, qd)`.
pub fn coriolis_and_gravity(skel: &Skeleton, q: &DVector<f64>, qd: &DVector<f64>) -> Result<DVector<f64>> {
    skel.check_coords(qd, "qd")?;
    Ok(ArticulatedCache::new(skel, q)?.bias_forces(qd))
}

/// Convenience wrapper: dense `M(q)^{-1}`.
pub fn minv(skel: &Skeleton, q: &DVector<f64>) -> Result<DMatrix<f64>> {
    ArticulatedCache::new(skel, q)?.minv()
}

/// `(dc/dq, dc/dqd)`.
pub fn bias_force_derivatives(
    skel: &Skeleton,
    q: &DVector<f64>,
    qd: &DVector<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    skel.check_coords(qd, "qd")?;
    let cache = ArticulatedCache::new(skel, q)?;
    let d = cache.inverse_dynamics_derivatives(qd, &DVector::zeros(skel.dofs()), true);
    Ok((d.dtau_dq, d.dtau_dqd))
}

/// `d(M^{-1} z)/dq`.
pub fn minv_times_derivative(skel: &Skeleton, q: &DVector<f64>, z: &DVector<f64>) -> Result<DMatrix<f64>> {
    skel.check_coords(z, "z")?;
    let mut cache = ArticulatedCache::new(skel, q)?;
    let mi = cache.minv()?;
    cache.minv_times_derivative(z, &mi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::{Body, Joint};
    use crate::spatial::{SpatialInertia, Transform};
    use nalgebra::{Matrix3, Vector3};

    fn tree() -> Skeleton {
        let mk = |name: &str, parent, p: Vector3<f64>, joint, m: f64| Body {
            name: name.into(),
            parent,
            placement: Transform::new(
                *nalgebra::Rotation3::from_euler_angles(0.1, -0.2, 0.3).matrix(),
                p,
            ),
            joint,
            inertia: SpatialInertia::new(
                m,
                Vector3::new(0.1, -0.3, 0.05),
                Matrix3::new(0.3, 0.01, 0.02, 0.01, 0.25, -0.01, 0.02, -0.01, 0.2),
            ),
        };
        Skeleton::new(
            vec![
                mk("base", None, Vector3::zeros(), Joint::prismatic(Vector3::x()), 2.0),
                mk("a", Some(0), Vector3::new(0.0, -0.4, 0.1), Joint::revolute(Vector3::z()), 1.0),
                mk("b", Some(1), Vector3::new(0.3, -0.5, 0.0), Joint::revolute(Vector3::new(0.6, 0.0, 0.8)), 0.7),
                mk("c", Some(1), Vector3::new(-0.2, -0.1, 0.2), Joint::prismatic(Vector3::y()), 0.5),
            ],
            Vector3::new(0.0, -9.81, 0.0),
        )
        .unwrap()
    }

    fn state() -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        (
            DVector::from_vec(vec![0.2, -0.4, 0.7, 0.1]),
            DVector::from_vec(vec![0.5, 1.1, -0.8, 0.3]),
            DVector::from_vec(vec![-0.3, 0.2, 0.6, -1.0]),
        )
    }

    #[test]
    fn mass_matrix_matches_unit_accelerations() {
        let s = tree();
        let (q, _, _) = state();
        let c = ArticulatedCache::new(&s, &q).unwrap();
        let m = c.mass_matrix();
        for j in 0..4 {
            let mut e = DVector::zeros(4);
            e[j] = 1.0;
            let col = c.inverse_dynamics(&DVector::zeros(4), &e, false);
            assert!((col - m.column(j)).amax() < 1e-12);
        }
        assert!(m.clone().cholesky().is_some());
    }

    #[test]
    fn minv_inverts_mass_matrix() {
        let s = tree();
        let (q, _, _) = state();
        let mut c = ArticulatedCache::new(&s, &q).unwrap();
        let m = c.mass_matrix();
        let mi = c.minv().unwrap();
        assert!((&m * &mi - DMatrix::identity(4, 4)).amax() < 1e-10);
    }

    #[test]
    fn inverse_dynamics_derivatives_match_central_differences() {
        let s = tree();
        let (q, qd, qdd) = state();
        let c = ArticulatedCache::new(&s, &q).unwrap();
        let d = c.inverse_dynamics_derivatives(&qd, &qdd, true);
        let h = 1e-6;
        for j in 0..4 {
            let mut qp = q.clone();
            let mut qm = q.clone();
            qp[j] += h;
            qm[j] -= h;
            let tp = ArticulatedCache::new(&s, &qp).unwrap().inverse_dynamics(&qd, &qdd, true);
            let tm = ArticulatedCache::new(&s, &qm).unwrap().inverse_dynamics(&qd, &qdd, true);
            let fd = (tp - tm) / (2.0 * h);
            assert!((fd - d.dtau_dq.column(j)).amax() < 1e-6, "dq column {j}");
            let mut vp = qd.clone();
            let mut vm = qd.clone();
            vp[j] += h;
            vm[j] -= h;
            let fd = (c.inverse_dynamics(&vp, &qdd, true) - c.inverse_dynamics(&vm, &qdd, true)) / (2.0 * h);
            assert!((fd - d.dtau_dqd.column(j)).amax() < 1e-6, "dqd column {j}");
        }
    }

    #[test]
    fn singular_joint_is_reported() {
        let mut bodies = tree().bodies().to_vec();
        bodies.truncate(1);
        bodies[0].inertia = SpatialInertia::point(1.0, Vector3::zeros());
        bodies[0].joint = Joint::revolute(Vector3::z());
        let s = Skeleton::new(bodies, Vector3::zeros()).unwrap();
        let mut c = ArticulatedCache::new(&s, &DVector::zeros(1)).unwrap();
        assert_eq!(c.minv(), Err(Error::SingularMass { joint: 0 }));
    }
}
