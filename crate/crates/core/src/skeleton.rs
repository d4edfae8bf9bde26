//! Kinematic trees of one-degree-of-freedom joints.

use nalgebra::{DVector, Matrix3xX, Vector3};

use crate::error::{Error, Result};
use crate::spatial::{SpatialInertia, SpatialMotion, Transform};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JointKind {
    Revolute,
    Prismatic,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Joint {
    pub kind: JointKind,
    /// Unit axis in the joint frame.
    pub axis: Vector3<f64>,
}

impl Joint {
    pub fn revolute(axis: Vector3<f64>) -> Self {
        Self { kind: JointKind::Revolute, axis }
    }

    pub fn prismatic(axis: Vector3<f64>) -> Self {
        Self { kind: JointKind::Prismatic, axis }
    }

    /// Body-frame screw axis; constant in the body frame.
    pub fn screw(&self) -> SpatialMotion {
        match self.kind {
            JointKind::Revolute => SpatialMotion::new(self.axis, Vector3::zeros()),
            JointKind::Prismatic => SpatialMotion::new(Vector3::zeros(), self.axis),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Body {
    pub name: String,
    pub parent: Option<usize>,
    /// Pose of the joint frame in the parent body frame (world for roots).
    pub placement: Transform,
    pub joint: Joint,
    pub inertia: SpatialInertia,
}

/// A forest of bodies, each attached to its parent by one joint. Body `i`
/// owns generalized coordinate `q[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Skeleton {
    bodies: Vec<Body>,
    gravity: Vector3<f64>,
    screws: Vec<SpatialMotion>,
    // support[i][j]: body j is body i or one of its ancestors
    support: Vec<Vec<bool>>,
}

pub const INERTIAL_PARAMS_PER_BODY: usize = 10;

impl Skeleton {
    pub fn new(bodies: Vec<Body>, gravity: Vector3<f64>) -> Result<Self> {
        for (i, b) in bodies.iter().enumerate() {
            if let Some(p) = b.parent {
                if p >= i {
                    return Err(Error::InvalidModel(format!(
                        "body {i} (`{}`) has parent {p}; parents must precede children",
                        b.name
                    )));
                }
            }
            if (b.joint.axis.norm() - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidModel(format!("joint axis of body `{}` is not unit length", b.name)));
            }
            if !b.placement.is_valid(1e-9) {
                return Err(Error::InvalidModel(format!("placement of body `{}` is not a rigid transform", b.name)));
            }
            if !b.inertia.is_physical() {
                return Err(Error::InvalidModel(format!("inertia of body `{}` is not physical", b.name)));
            }
        }
        Ok(Self::build(bodies, gravity))
    }

    fn build(bodies: Vec<Body>, gravity: Vector3<f64>) -> Self {
        let n = bodies.len();
        let mut support = vec![vec![false; n]; n];
        for i in 0..n {
            let mut k = Some(i);
            while let Some(j) = k {
                support[i][j] = true;
                k = bodies[j].parent;
            }
        }
        let screws = bodies.iter().map(|b| b.joint.screw()).collect();
        Self { bodies, gravity, screws, support }
    }

    pub fn dofs(&self) -> usize {
        self.bodies.len()
    }

    pub fn bodies(&self) -> &[Body] {
        &self.bodies
    }

    pub fn gravity(&self) -> Vector3<f64> {
        self.gravity
    }

    pub fn parent(&self, i: usize) -> Option<usize> {
        self.bodies[i].parent
    }

    pub fn screw(&self, i: usize) -> &SpatialMotion {
        &self.screws[i]
    }

    /// True when `j` is `i` or an ancestor of `i`.
    pub fn supports(&self, j: usize, i: usize) -> bool {
        self.support[i][j]
    }

    pub fn body_index(&self, name: &str) -> Option<usize> {
        self.bodies.iter().position(|b| b.name == name)
    }

    /// Concatenated per-body inertial parameters (10 per body).
    pub fn inertial_params(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.dofs() * INERTIAL_PARAMS_PER_BODY);
        for (i, b) in self.bodies.iter().enumerate() {
            let p = b.inertia.to_params();
            out.rows_mut(i * INERTIAL_PARAMS_PER_BODY, INERTIAL_PARAMS_PER_BODY)
                .copy_from_slice(&p);
        }
        out
    }

    /// Copy of this skeleton with the inertial parameters replaced. The new
    /// inertias must be physical.
    pub fn with_inertial_params(&self, mu: &DVector<f64>) -> Result<Skeleton> {
        let s = self.with_inertial_params_unchecked(mu)?;
        for b in &s.bodies {
            if !b.inertia.is_physical() {
                return Err(Error::InvalidModel(format!("inertia of body `{}` is not physical", b.name)));
            }
        }
        Ok(s)
    }

    /// Natural magnitude of each inertial parameter: the mass, the radius of
    /// gyration for the center of mass and the largest principal moment for
    /// the inertia entries.
    pub fn inertial_param_scales(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.bodies.len() * INERTIAL_PARAMS_PER_BODY);
        for (i, b) in self.bodies.iter().enumerate() {
            let m = b.inertia.mass.abs().max(1e-12);
            let imax = b.inertia.inertia.diagonal().amax().max(1e-12);
            let gyration = (b.inertia.inertia.trace() / m).abs().sqrt().max(1e-6);
            let scales = [m, gyration, gyration, gyration, imax, imax, imax, imax, imax, imax];
            out.rows_mut(i * INERTIAL_PARAMS_PER_BODY, INERTIAL_PARAMS_PER_BODY).copy_from_slice(&scales);
        }
        out
    }

    /// Like [`with_inertial_params`](Self::with_inertial_params) without the
    /// physical-consistency check; finite differences over the parameters use
    /// this since small perturbations can leave the physical set.
    pub fn with_inertial_params_unchecked(&self, mu: &DVector<f64>) -> Result<Skeleton> {
        if mu.len() != self.dofs() * INERTIAL_PARAMS_PER_BODY {
            return Err(Error::DimensionMismatch(format!(
                "expected {} inertial parameters, got {}",
                self.dofs() * INERTIAL_PARAMS_PER_BODY,
                mu.len()
            )));
        }
        let mut s = self.clone();
        for (i, b) in s.bodies.iter_mut().enumerate() {
            let k = i * INERTIAL_PARAMS_PER_BODY;
            b.inertia = SpatialInertia::from_params(&mu.as_slice()[k..k + INERTIAL_PARAMS_PER_BODY]);
        }
        Ok(s)
    }

    /// `T_{parent, i}(q_i) = X_i exp(S_i q_i)`.
    pub fn joint_transform(&self, i: usize, qi: f64) -> Transform {
        let b = &self.bodies[i];
        b.placement.compose(&Transform::exp(&(self.screws[i] * qi)))
    }

    pub fn check_coords(&self, v: &DVector<f64>, what: &str) -> Result<()> {
        if v.len() != self.dofs() {
            return Err(Error::DimensionMismatch(format!(
                "{what} has length {}, skeleton has {} dofs",
                v.len(),
                self.dofs()
            )));
        }
        Ok(())
    }

    pub fn forward_kinematics(&self, q: &DVector<f64>) -> Kinematics {
        let n = self.dofs();
        let mut local = Vec::with_capacity(n);
        let mut world: Vec<Transform> = Vec::with_capacity(n);
        let mut screws = Vec::with_capacity(n);
        for i in 0..n {
            let t = self.joint_transform(i, q[i]);
            let w = match self.bodies[i].parent {
                Some(p) => world[p].compose(&t),
                None => t,
            };
            screws.push(w.apply_motion(&self.screws[i]));
            local.push(t);
            world.push(w);
        }
        Kinematics { local, world, screws }
    }
}

/// Poses of every body for one configuration.
#[derive(Clone, Debug)]
pub struct Kinematics {
    /// Pose of each body in its parent frame.
    pub local: Vec<Transform>,
    /// Pose of each body in the world frame.
    pub world: Vec<Transform>,
    /// World-frame joint screw axes.
    pub screws: Vec<SpatialMotion>,
}

impl Kinematics {
    pub fn pose(&self, body: Option<usize>) -> Transform {
        match body {
            Some(b) => self.world[b],
            None => Transform::identity(),
        }
    }

    /// Jacobian of the world velocity of a point rigidly attached to `body`
    /// and currently at `p`.
    pub fn point_jacobian(&self, skel: &Skeleton, body: Option<usize>, p: &Vector3<f64>) -> Matrix3xX<f64> {
        let n = self.world.len();
        let mut out = Matrix3xX::zeros(n);
        if let Some(b) = body {
            for j in 0..n {
                if skel.supports(j, b) {
                    let s = &self.screws[j];
                    out.set_column(j, &(s.angular.cross(p) + s.linear));
                }
            }
        }
        out
    }
}
