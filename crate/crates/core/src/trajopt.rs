//! Trajectory optimization on top of the step Jacobians.

use nalgebra::DVector;

use crate::diffstep::{backprop_step, complementarity_aware_backprop, linearize, step_jacobians, JacobianOptions, TiePolicy};
use crate::error::{Error, Result};
use crate::scenes::{Method, StateVar, TargetDesc, TaskDesc};
use crate::world::{StepContext, World, WorldState};

/// A rollout: the initial state, the controls and every step's context.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub initial: WorldState,
    pub controls: Vec<DVector<f64>>,
    pub steps: Vec<StepContext>,
}

impl Trajectory {
    pub fn final_state(&self) -> &WorldState {
        self.steps.last().map(|c| &c.next).unwrap_or(&self.initial)
    }

    /// States `x_0 .. x_T`.
    pub fn states(&self) -> Vec<&WorldState> {
        std::iter::once(&self.initial).chain(self.steps.iter().map(|c| &c.next)).collect()
    }
}

pub fn rollout(world: &World, initial: &WorldState, controls: &[DVector<f64>]) -> Result<Trajectory> {
    let steps = world.rollout(initial, controls)?;
    Ok(Trajectory { initial: initial.clone(), controls: controls.to_vec(), steps })
}

/// Quadratic terminal terms plus a control-effort penalty.
#[derive(Clone, Debug, PartialEq)]
pub struct Objective {
    pub terminal: Vec<TargetDesc>,
    pub control_weight: f64,
}

impl Objective {
    pub fn from_task(task: &TaskDesc) -> Self {
        Self { terminal: task.terminal.clone(), control_weight: task.control_weight }
    }

    pub fn terminal_loss(&self, s: &WorldState) -> f64 {
        self.terminal
            .iter()
            .map(|t| {
                let x = match t.state {
                    StateVar::Q => s.q[t.index],
                    StateVar::Qd => s.qd[t.index],
                };
                t.weight * (x - t.target).powi(2)
            })
            .sum()
    }

    /// `(dl/dq_T, dl/dqd_T)`.
    pub fn terminal_gradient(&self, s: &WorldState) -> (DVector<f64>, DVector<f64>) {
        let n = s.q.len();
        let mut gq = DVector::zeros(n);
        let mut gqd = DVector::zeros(n);
        for t in &self.terminal {
            match t.state {
                StateVar::Q => gq[t.index] += 2.0 * t.weight * (s.q[t.index] - t.target),
                StateVar::Qd => gqd[t.index] += 2.0 * t.weight * (s.qd[t.index] - t.target),
            }
        }
        (gq, gqd)
    }

    pub fn control_cost(&self, controls: &[DVector<f64>]) -> f64 {
        self.control_weight * controls.iter().map(|u| u.norm_squared()).sum::<f64>()
    }

    pub fn loss(&self, traj: &Trajectory) -> f64 {
        self.terminal_loss(traj.final_state()) + self.control_cost(&traj.controls)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradientMode {
    Standard,
    ComplementarityAware,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryGradient {
    pub controls: Vec<DVector<f64>>,
    pub dq0: DVector<f64>,
    pub dqd0: DVector<f64>,
    /// Steps where the reclassified candidate was used.
    pub reclassified: Vec<usize>,
}

/// Reverse accumulation from adjoints `(gq, gqd)` of the final state.
fn backward(
    world: &World,
    traj: &Trajectory,
    mut gq: DVector<f64>,
    mut gqd: DVector<f64>,
    control_weight: f64,
    mode: GradientMode,
    tie_policy: Option<TiePolicy>,
) -> Result<TrajectoryGradient> {
    let opts = JacobianOptions { tie_policy, ..Default::default() };
    let mut controls = vec![DVector::zeros(0); traj.steps.len()];
    let mut reclassified = Vec::new();
    for (t, ctx) in traj.steps.iter().enumerate().rev() {
        let wrap = |e: Error| Error::AtStep { step: t, source: Box::new(e) };
        let g = match mode {
            GradientMode::Standard => {
                let j = step_jacobians(world, ctx, &opts).map_err(wrap)?;
                backprop_step(&j, &gq, &gqd)
            }
            GradientMode::ComplementarityAware => {
                let mut lin = linearize(world, ctx).map_err(wrap)?;
                let a = complementarity_aware_backprop(world, ctx, &mut lin, &gq, &gqd, &opts).map_err(wrap)?;
                if a.reclassified {
                    reclassified.push(t);
                }
                a.gradient
            }
        };
        controls[t] = g.dtau + &traj.controls[t] * (2.0 * control_weight);
        gq = g.dq;
        gqd = g.dqd;
    }
    reclassified.reverse();
    Ok(TrajectoryGradient { controls, dq0: gq, dqd0: gqd, reclassified })
}

/// Gradient of the objective with respect to every control.
pub fn trajectory_gradient(
    world: &World,
    traj: &Trajectory,
    objective: &Objective,
    mode: GradientMode,
    tie_policy: Option<TiePolicy>,
) -> Result<TrajectoryGradient> {
    let (gq, gqd) = objective.terminal_gradient(traj.final_state());
    backward(world, traj, gq, gqd, objective.control_weight, mode, tie_policy)
}

/// Optimizer settings, normally taken from a scene task.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizeConfig {
    pub method: Method,
    pub iterations: usize,
    pub step_size: f64,
    pub segments: usize,
    pub defect_weight: f64,
    pub mode: GradientMode,
    pub tie_policy: Option<TiePolicy>,
}

impl OptimizeConfig {
    pub fn from_task(task: &TaskDesc, mode: GradientMode) -> Self {
        Self {
            method: task.method,
            iterations: task.iterations,
            step_size: task.step_size,
            segments: task.segments,
            defect_weight: task.defect_weight,
            mode,
            tie_policy: Some(TiePolicy::AllClamping),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizeResult {
    pub controls: Vec<DVector<f64>>,
    /// Objective of the full single-shooting rollout before each iteration
    /// and after the last.
    pub losses: Vec<f64>,
    /// Largest segment defect at the end (multiple shooting only).
    pub defect: Option<f64>,
    /// Total count of reclassified steps across iterations.
    pub reclassified: usize,
}

pub fn optimize(
    world: &World,
    initial: &WorldState,
    objective: &Objective,
    controls: Vec<DVector<f64>>,
    cfg: &OptimizeConfig,
) -> Result<OptimizeResult> {
    match cfg.method {
        Method::Sgd => sgd(world, initial, objective, controls, cfg),
        Method::MultipleShooting => shooting(world, initial, objective, controls, cfg),
    }
}

fn checked(loss: f64, iteration: usize) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Diverged { iteration })
    }
}

fn sgd(
    world: &World,
    initial: &WorldState,
    objective: &Objective,
    mut controls: Vec<DVector<f64>>,
    cfg: &OptimizeConfig,
) -> Result<OptimizeResult> {
    let mut losses = Vec::with_capacity(cfg.iterations + 1);
    let mut reclassified = 0;
    for it in 0..=cfg.iterations {
        let traj = rollout(world, initial, &controls).map_err(|_| Error::Diverged { iteration: it })?;
        losses.push(checked(objective.loss(&traj), it)?);
        if it == cfg.iterations {
            break;
        }
        let g = trajectory_gradient(world, &traj, objective, cfg.mode, cfg.tie_policy)?;
        reclassified += g.reclassified.len();
        for (u, du) in controls.iter_mut().zip(&g.controls) {
            *u -= du * cfg.step_size;
        }
    }
    Ok(OptimizeResult { controls, losses, defect: None, reclassified })
}

/// Decision variables of penalty multiple shooting.
#[derive(Clone, Debug)]
struct Shooting {
    controls: Vec<DVector<f64>>,
    /// Start states of segments `1..k`.
    starts: Vec<WorldState>,
}

fn segment_bounds(steps: usize, k: usize) -> Vec<(usize, usize)> {
    (0..k).map(|j| (j * steps / k, (j + 1) * steps / k)).collect()
}

struct ShootingEval {
    loss: f64,
    defect: f64,
    trajs: Vec<Trajectory>,
}

fn shooting_eval(
    world: &World,
    initial: &WorldState,
    objective: &Objective,
    x: &Shooting,
    bounds: &[(usize, usize)],
    weight: f64,
) -> Result<ShootingEval> {
    let mut trajs = Vec::with_capacity(bounds.len());
    let mut loss = objective.control_cost(&x.controls);
    let mut defect: f64 = 0.0;
    for (j, &(a, b)) in bounds.iter().enumerate() {
        let start = if j == 0 { initial } else { &x.starts[j - 1] };
        let traj = rollout(world, start, &x.controls[a..b])?;
        let end = traj.final_state();
        if j + 1 < bounds.len() {
            let next = &x.starts[j];
            let dq = &end.q - &next.q;
            let dqd = &end.qd - &next.qd;
            loss += weight * (dq.norm_squared() + dqd.norm_squared());
            defect = defect.max(dq.amax()).max(dqd.amax());
        } else {
            loss += objective.terminal_loss(end);
        }
        trajs.push(traj);
    }
    Ok(ShootingEval { loss, defect, trajs })
}

impl Shooting {
    fn flatten(&self) -> DVector<f64> {
        let parts = self
            .controls
            .iter()
            .flat_map(|u| u.iter().copied())
            .chain(self.starts.iter().flat_map(|s| s.q.iter().chain(s.qd.iter()).copied()));
        DVector::from_iterator(self.len(), parts)
    }

    fn len(&self) -> usize {
        self.controls.iter().map(|u| u.len()).sum::<usize>() + self.starts.iter().map(|s| 2 * s.q.len()).sum::<usize>()
    }

    fn with_values(&self, x: &DVector<f64>) -> Shooting {
        let mut out = self.clone();
        let mut k = 0;
        for u in &mut out.controls {
            let n = u.len();
            u.copy_from(&x.rows(k, n));
            k += n;
        }
        for s in &mut out.starts {
            let n = s.q.len();
            s.q.copy_from(&x.rows(k, n));
            s.qd.copy_from(&x.rows(k + n, n));
            k += 2 * n;
        }
        out
    }
}

const LBFGS_MEMORY: usize = 10;

/// Two-loop recursion: approximate inverse-Hessian times `g`.
fn lbfgs_direction(g: &DVector<f64>, memory: &[(DVector<f64>, DVector<f64>)]) -> DVector<f64> {
    let mut q = g.clone();
    let mut alphas = Vec::with_capacity(memory.len());
    for (s, y) in memory.iter().rev() {
        let a = s.dot(&q) / y.dot(s);
        q -= y * a;
        alphas.push(a);
    }
    if let Some((s, y)) = memory.last() {
        q *= s.dot(y) / y.norm_squared();
    }
    for ((s, y), a) in memory.iter().zip(alphas.into_iter().rev()) {
        let b = y.dot(&q) / y.dot(s);
        q += s * (a - b);
    }
    -q
}

/// Penalty multiple shooting: the horizon is split into segments whose
/// start states become decision variables, with squared defects added to
/// the objective. Minimized with limited-memory quasi-Newton directions and
/// a backtracking line search; the defect weight grows tenfold whenever
/// progress stalls with open defects.
fn shooting(
    world: &World,
    initial: &WorldState,
    objective: &Objective,
    controls: Vec<DVector<f64>>,
    cfg: &OptimizeConfig,
) -> Result<OptimizeResult> {
    let steps = controls.len();
    let k = cfg.segments.clamp(1, steps.max(1));
    let bounds = segment_bounds(steps, k);
    // seed segment starts from a single-shooting rollout
    let seed = rollout(world, initial, &controls)?;
    let states = seed.states();
    let mut x = Shooting { starts: bounds[1..].iter().map(|&(a, _)| states[a].clone()).collect(), controls };
    let mut weight = cfg.defect_weight.max(1.0);
    let mut losses = Vec::with_capacity(cfg.iterations + 1);
    let mut reclassified = 0;
    let mut memory: Vec<(DVector<f64>, DVector<f64>)> = Vec::new();
    let mut cur = shooting_eval(world, initial, objective, &x, &bounds, weight)?;
    let mut grad = shooting_gradient(world, objective, &x, &cur, &bounds, weight, cfg, &mut reclassified)?;
    for it in 0..=cfg.iterations {
        let full = rollout(world, initial, &x.controls).map_err(|_| Error::Diverged { iteration: it })?;
        losses.push(checked(objective.loss(&full), it)?);
        if it == cfg.iterations {
            break;
        }
        checked(cur.loss, it)?;
        let mut dir = lbfgs_direction(&grad, &memory);
        if dir.dot(&grad) >= 0.0 {
            memory.clear();
            dir = -&grad * cfg.step_size;
        } else if memory.is_empty() {
            dir *= cfg.step_size;
        }
        let x0 = x.flatten();
        let slope = dir.dot(&grad);
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let trial = x.with_values(&(&x0 + &dir * alpha));
            if let Ok(ev) = shooting_eval(world, initial, objective, &trial, &bounds, weight) {
                if ev.loss.is_finite() && ev.loss <= cur.loss + 1e-4 * alpha * slope && ev.loss < cur.loss {
                    accepted = Some((trial, ev));
                    break;
                }
            }
            alpha *= 0.5;
        }
        // a converged inner problem with open defects counts as a stall too
        let converged = accepted
            .as_ref()
            .is_some_and(|(_, ev)| cur.loss - ev.loss <= 1e-8 * cur.loss.abs() || grad.norm() < 1e-5);
        if converged && cur.defect > 1e-6 && weight < 1e12 {
            accepted = None;
        }
        match accepted {
            Some((trial, ev)) => {
                let g = shooting_gradient(world, objective, &trial, &ev, &bounds, weight, cfg, &mut reclassified)?;
                let sv = trial.flatten() - &x0;
                let yv = &g - &grad;
                if sv.dot(&yv) > 1e-12 * sv.norm() * yv.norm() {
                    if memory.len() == LBFGS_MEMORY {
                        memory.remove(0);
                    }
                    memory.push((sv, yv));
                }
                x = trial;
                cur = ev;
                grad = g;
            }
            None if cur.defect > 1e-6 && weight < 1e12 => {
                weight *= 10.0;
                memory.clear();
                cur = shooting_eval(world, initial, objective, &x, &bounds, weight)?;
                grad = shooting_gradient(world, objective, &x, &cur, &bounds, weight, cfg, &mut reclassified)?;
            }
            None => break,
        }
    }
    Ok(OptimizeResult { controls: x.controls, losses, defect: Some(cur.defect), reclassified })
}

/// Gradient of the penalized shooting objective, flattened like
/// [`Shooting::flatten`].
#[allow(clippy::too_many_arguments)]
fn shooting_gradient(
    world: &World,
    objective: &Objective,
    x: &Shooting,
    ev: &ShootingEval,
    bounds: &[(usize, usize)],
    weight: f64,
    cfg: &OptimizeConfig,
    reclassified: &mut usize,
) -> Result<DVector<f64>> {
    let k = bounds.len();
    let mut gu = vec![DVector::zeros(0); x.controls.len()];
    let mut gs: Vec<(DVector<f64>, DVector<f64>)> = Vec::with_capacity(k - 1);
    for (j, &(a, _)) in bounds.iter().enumerate() {
        let traj = &ev.trajs[j];
        let end = traj.final_state();
        let (gq, gqd) = if j + 1 < k {
            let next = &x.starts[j];
            ((&end.q - &next.q) * (2.0 * weight), (&end.qd - &next.qd) * (2.0 * weight))
        } else {
            objective.terminal_gradient(end)
        };
        if j + 1 < k {
            gs.push((-&gq, -&gqd));
        }
        let g = backward(world, traj, gq, gqd, objective.control_weight, cfg.mode, cfg.tie_policy)?;
        *reclassified += g.reclassified.len();
        for (t, u) in g.controls.into_iter().enumerate() {
            gu[a + t] = u;
        }
        if j > 0 {
            gs[j - 1].0 += g.dq0;
            gs[j - 1].1 += g.dqd0;
        }
    }
    let g = Shooting {
        controls: gu,
        starts: x
            .starts
            .iter()
            .zip(gs)
            .map(|(s, (q, qd))| WorldState { q, qd, tau: s.tau.clone(), dt: s.dt })
            .collect(),
    };
    Ok(g.flatten())
}

/// Initial controls for a task: the constant initial control at every step.
pub fn initial_controls(task: &TaskDesc) -> Vec<DVector<f64>> {
    vec![DVector::from_vec(task.initial_control.clone()); task.steps]
}
