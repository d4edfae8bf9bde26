//! A skeleton plus colliders, advanced one time step at a time.
//!
//! One step solves for the next velocity
//! `qd' = qd + M^-1 (-dt (c - tau) + J^T f)` with contact impulses `f` from
//! the LCP, then integrates positions with the new velocity:
//! `q' = q + dt qd'`.

use nalgebra::{DMatrix, DVector};

use crate::collision::{contact_jacobian, contact_rows, detect, Collider, Contact, ContactRow, RowDirection};
use crate::dynamics::ArticulatedCache;
use crate::error::{Error, Result};
use crate::lcp::{LcpProblem, LcpSolution, RowClass, RowKind};
use crate::skeleton::{Kinematics, Skeleton};

/// Normal approach speed above which a restitutive contact bounces.
pub const BOUNCE_SPEED: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct WorldState {
    pub q: DVector<f64>,
    pub qd: DVector<f64>,
    pub tau: DVector<f64>,
    pub dt: f64,
}

impl WorldState {
    pub fn new(q: DVector<f64>, qd: DVector<f64>, tau: DVector<f64>, dt: f64) -> Self {
        Self { q, qd, tau, dt }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.q.len() != n || self.qd.len() != n || self.tau.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "state vectors have lengths ({}, {}, {}) for {n} dofs",
                self.q.len(),
                self.qd.len(),
                self.tau.len()
            )));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::DimensionMismatch(format!("time step {} must be positive", self.dt)));
        }
        if self.q.iter().chain(self.qd.iter()).chain(self.tau.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub skeleton: Skeleton,
    pub colliders: Vec<Collider>,
    /// Joints that accept control torques; commands on the rest are ignored.
    pub actuated: Vec<bool>,
}

/// Everything computed during one forward step, kept for differentiation.
#[derive(Clone, Debug)]
pub struct StepContext {
    /// Input state with the actuation mask applied to `tau`.
    pub state: WorldState,
    pub kin: Kinematics,
    pub contacts: Vec<Contact>,
    pub rows: Vec<ContactRow>,
    pub jac: DMatrix<f64>,
    pub minv: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub problem: LcpProblem,
    pub solution: LcpSolution,
    /// Normal rows that bounce this step, with their restitution.
    pub bouncing: Vec<(usize, f64)>,
    pub next: WorldState,
}

impl World {
    pub fn new(skeleton: Skeleton, colliders: Vec<Collider>, actuated: Vec<bool>) -> Result<Self> {
        if actuated.len() != skeleton.dofs() {
            return Err(Error::DimensionMismatch(format!(
                "actuation mask has {} entries for {} dofs",
                actuated.len(),
                skeleton.dofs()
            )));
        }
        for c in &colliders {
            if let Some(b) = c.body {
                if b >= skeleton.dofs() {
                    return Err(Error::InvalidModel(format!("collider `{}` references missing body {b}", c.name)));
                }
            }
        }
        Ok(Self { skeleton, colliders, actuated })
    }

    pub fn dofs(&self) -> usize {
        self.skeleton.dofs()
    }

    /// Same world with different inertial parameters (unchecked).
    pub fn with_inertial_params(&self, mu: &DVector<f64>) -> Result<World> {
        Ok(World {
            skeleton: self.skeleton.with_inertial_params_unchecked(mu)?,
            colliders: self.colliders.clone(),
            actuated: self.actuated.clone(),
        })
    }

    pub fn mask(&self, tau: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(tau.len(), |i, _| if self.actuated[i] { tau[i] } else { 0.0 })
    }

    /// Advances one step. `warm` is a classification hint for the LCP.
    pub fn step(&self, state: &WorldState, warm: Option<&[RowClass]>) -> Result<StepContext> {
        state.validate(self.dofs())?;
        let mut input = state.clone();
        input.tau = self.mask(&state.tau);
        let dt = input.dt;
        let mut cache = ArticulatedCache::new(&self.skeleton, &input.q)?;
        let minv = cache.minv()?;
        let bias = cache.bias_forces(&input.qd);
        let kin = cache.kin.clone();
        let contacts = detect(&self.skeleton, &kin, &self.colliders);
        let rows = contact_rows(&contacts);
        let (jac, _) = contact_jacobian(&self.skeleton, &kin, &contacts, false);
        let kinds = row_kinds(&rows, &contacts);
        let mut problem = LcpProblem::assemble(&minv, &jac, &input.qd, &input.tau, &bias, dt, kinds)?;
        let pre = &jac * &input.qd;
        let mut bouncing = Vec::new();
        for (r, row) in rows.iter().enumerate() {
            let sigma = contacts[row.contact].restitution;
            if row.direction == RowDirection::Normal && sigma > 0.0 && pre[r] < -BOUNCE_SPEED {
                problem.b[r] += sigma * pre[r];
                bouncing.push((r, sigma));
            }
        }
        let solution = problem.solve(warm)?;
        let z = (&input.tau - &bias) * dt + jac.transpose() * &solution.f;
        let qd_next = &input.qd + &minv * z;
        let q_next = &input.q + &qd_next * dt;
        let next = WorldState { q: q_next, qd: qd_next, tau: input.tau.clone(), dt };
        Ok(StepContext { state: input, kin, contacts, rows, jac, minv, bias, problem, solution, bouncing, next })
    }

    /// Convenience: next state only.
    pub fn step_state(&self, state: &WorldState) -> Result<WorldState> {
        Ok(self.step(state, None)?.next)
    }

    /// Rolls out `controls.len()` steps from `state`, one control vector per
    /// step; errors carry the failing step index.
    pub fn rollout(&self, state: &WorldState, controls: &[DVector<f64>]) -> Result<Vec<StepContext>> {
        let mut out: Vec<StepContext> = Vec::with_capacity(controls.len());
        let mut s = state.clone();
        for (k, u) in controls.iter().enumerate() {
            s.tau = u.clone();
            let warm = out.last().map(|c| c.solution.classes.clone());
            let ctx = self
                .step(&s, warm.as_deref())
                .map_err(|e| Error::AtStep { step: k, source: Box::new(e) })?;
            s = ctx.next.clone();
            out.push(ctx);
        }
        Ok(out)
    }
}

pub(crate) fn row_kinds(rows: &[ContactRow], contacts: &[Contact]) -> Vec<RowKind> {
    let mut normal_row = 0;
    rows.iter()
        .enumerate()
        .map(|(r, row)| match row.direction {
            RowDirection::Normal => {
                normal_row = r;
                RowKind::Normal
            }
            _ => RowKind::Friction { normal: normal_row, mu: contacts[row.contact].friction },
        })
        .collect()
}

/// `qd' = qd + M^-1 (-dt (c - tau) + J^T f)`, `q' = q + dt qd'`.
pub fn unconstrained_step(skel: &Skeleton, state: &WorldState, jtf: &DVector<f64>) -> Result<WorldState> {
    state.validate(skel.dofs())?;
    skel.check_coords(jtf, "joint impulse")?;
    let mut cache = ArticulatedCache::new(skel, &state.q)?;
    let c = cache.bias_forces(&state.qd);
    let z = (&state.tau - c) * state.dt + jtf;
    let qd = &state.qd + cache.minv_times(&z)?;
    let q = &state.q + &qd * state.dt;
    Ok(WorldState { q, qd, tau: state.tau.clone(), dt: state.dt })
}
