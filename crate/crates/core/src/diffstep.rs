//! Analytic Jacobians of one simulation step.
//!
//! Within a fixed contact classification the clamped rows satisfy
//! `v_C = 0`, so their impulses move with `df_C = -pinv(A_eff) dv_C|_f`
//! where `dv_C|_f` is the change of clamped-row velocity at fixed impulses
//! and `A_eff = A_CC + A_CB E` folds in friction rows pinned at their bound.
//! Separating rows keep zero impulse and bounded rows follow `f_B = E f_C`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::collision::{check_kind_margins, contact_jacobian};
use crate::dynamics::ArticulatedCache;
use crate::error::{Error, Result};
use crate::fdcheck::{ridders_scaled, RIDDERS_STEP};
use crate::lcp::{LcpProblem, LcpSolution, Partition, RowClass};
use crate::linalg::{pinv, select_rows};
use crate::world::{StepContext, World};

/// How tied rows are resolved before differentiating.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TiePolicy {
    AllClamping,
    AllSeparating,
    /// Each tied row independently, from a seeded generator.
    Random { seed: u64 },
}

pub fn tied_subgradient(classes: &[RowClass], policy: TiePolicy) -> Vec<RowClass> {
    let mut rng = match policy {
        TiePolicy::Random { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        _ => None,
    };
    classes
        .iter()
        .map(|&c| {
            if c != RowClass::Tied {
                return c;
            }
            match policy {
                TiePolicy::AllClamping => RowClass::Clamping,
                TiePolicy::AllSeparating => RowClass::Separating,
                TiePolicy::Random { .. } => {
                    if rng.as_mut().unwrap().gen_bool(0.5) {
                        RowClass::Clamping
                    } else {
                        RowClass::Separating
                    }
                }
            }
        })
        .collect()
}

fn resolve_classes(classes: &[RowClass], policy: Option<TiePolicy>) -> Result<Vec<RowClass>> {
    let tied: Vec<usize> = (0..classes.len()).filter(|&i| classes[i] == RowClass::Tied).collect();
    if tied.is_empty() {
        return Ok(classes.to_vec());
    }
    match policy {
        Some(p) => Ok(tied_subgradient(classes, p)),
        None => Err(Error::TiedPresent { rows: tied }),
    }
}

/// Sensitivity of clamped impulses to a batch of perturbations:
/// `df_C = -pinv(A_eff) R + (I - pinv(A_eff) A_eff) dA_eff^T pinv(A_eff)^T f_C`,
/// the second term present only when `A_eff` is rank deficient.
fn clamped_sensitivity(
    aeff: &DMatrix<f64>,
    residual: &DMatrix<f64>,
    f_c: &DVector<f64>,
    daeff: Option<&dyn Fn(usize) -> DMatrix<f64>>,
) -> DMatrix<f64> {
    let (ap, rank) = pinv(aeff);
    let mut out = -(&ap * residual);
    if rank < aeff.nrows() {
        if let Some(da) = daeff {
            let proj = DMatrix::identity(aeff.ncols(), aeff.ncols()) - &ap * aeff;
            let y = ap.transpose() * f_c;
            for k in 0..residual.ncols() {
                let extra = &proj * (da(k).transpose() * &y);
                let mut col = out.column_mut(k);
                col += extra;
            }
        }
    }
    out
}

fn scatter(p: &Partition, m: usize, dfc: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(m, dfc.ncols());
    for (k, &i) in p.clamped.iter().enumerate() {
        out.set_row(i, &dfc.row(k));
    }
    let dfb = &p.e * dfc;
    for (k, &i) in p.bounded.iter().enumerate() {
        out.set_row(i, &dfb.row(k));
    }
    out
}

/// Jacobian of the LCP impulses with respect to scalar parameters `x_k`,
/// given `dA/dx_k` and the columns `db/dx_k`.
pub fn lcp_impulse_jacobian(
    problem: &LcpProblem,
    solution: &LcpSolution,
    da: &[DMatrix<f64>],
    db: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let m = problem.len();
    if db.nrows() != m || da.len() != db.ncols() || da.iter().any(|d| d.shape() != (m, m)) {
        return Err(Error::DimensionMismatch("parameter derivative shapes disagree with the LCP".into()));
    }
    let classes = resolve_classes(&solution.classes, None)?;
    problem.verify(&solution.f).map_err(Error::StaleClassification)?;
    let p = problem.partition(&classes, true, None);
    let aeff = problem.effective_matrix(&p);
    let f_c = DVector::from_fn(p.clamped.len(), |k, _| solution.f[p.clamped[k]]);
    let mut residual = DMatrix::zeros(p.clamped.len(), db.ncols());
    for k in 0..db.ncols() {
        let r = &da[k] * &solution.f + db.column(k);
        for (ci, &i) in p.clamped.iter().enumerate() {
            residual[(ci, k)] = r[i];
        }
    }
    let daeff = |k: usize| {
        let sub = Partition { clamped: p.clamped.clone(), bounded: p.bounded.clone(), separating: vec![], e: p.e.clone() };
        let tmp = LcpProblem { a: da[k].clone(), b: DVector::zeros(m), rows: problem.rows.clone() };
        tmp.effective_matrix(&sub)
    };
    let dfc = clamped_sensitivity(&aeff, &residual, &f_c, Some(&daeff));
    Ok(scatter(&p, m, &dfc))
}

/// Options for [`step_jacobians`].
#[derive(Clone, Debug, PartialEq)]
pub struct JacobianOptions {
    pub tie_policy: Option<TiePolicy>,
    /// Differentiate under this classification instead of the solver's.
    pub classes: Option<Vec<RowClass>>,
    /// Also compute the inertial-parameter blocks.
    pub inertial: bool,
    /// Replace the position blocks by the bounce least-squares solution when
    /// contacts bounce.
    pub bounce: bool,
}

impl Default for JacobianOptions {
    fn default() -> Self {
        Self { tie_policy: None, classes: None, inertial: false, bounce: true }
    }
}

/// Jacobians of `(q', qd')` with respect to `(q, qd, tau, mu)`.
#[derive(Clone, Debug, PartialEq)]
pub struct StepJacobians {
    pub dqd_dq: DMatrix<f64>,
    pub dqd_dqd: DMatrix<f64>,
    pub dqd_dtau: DMatrix<f64>,
    /// Computed by Ridders differencing of the analytic pipeline over `mu`.
    pub dqd_dmu: Option<DMatrix<f64>>,
    pub dq_dq: DMatrix<f64>,
    pub dq_dqd: DMatrix<f64>,
    pub dq_dtau: DMatrix<f64>,
    pub dq_dmu: Option<DMatrix<f64>>,
    /// Impulse Jacobians, one row per contact row.
    pub df_dq: DMatrix<f64>,
    pub df_dqd: DMatrix<f64>,
    pub df_dtau: DMatrix<f64>,
    pub classes: Vec<RowClass>,
    pub bounce_corrected: bool,
}

impl StepJacobians {
    /// Labeled blocks in export order.
    pub fn blocks(&self) -> Vec<(&'static str, &DMatrix<f64>)> {
        let mut out = vec![
            ("dq_next/dq", &self.dq_dq),
            ("dq_next/dqd", &self.dq_dqd),
            ("dq_next/dtau", &self.dq_dtau),
            ("dqd_next/dq", &self.dqd_dq),
            ("dqd_next/dqd", &self.dqd_dqd),
            ("dqd_next/dtau", &self.dqd_dtau),
        ];
        if let (Some(a), Some(b)) = (&self.dq_dmu, &self.dqd_dmu) {
            out.push(("dq_next/dmu", a));
            out.push(("dqd_next/dmu", b));
        }
        out
    }
}

/// Derivative data of a completed step that does not depend on the
/// classification used for differentiation.
#[derive(Clone, Debug)]
pub struct Linearization {
    pub dt: f64,
    pub minv: DMatrix<f64>,
    pub jac: DMatrix<f64>,
    /// `djac[r][(i, j)] = d J_{r i} / d q_j`.
    pub djac: Vec<DMatrix<f64>>,
    pub qd: DVector<f64>,
    pub qd_next: DVector<f64>,
    pub f: DVector<f64>,
    /// `dqd'/dq`, `dqd'/dqd`, `dqd'/dtau` at fixed impulses.
    pub g_q: DMatrix<f64>,
    pub g_qd: DMatrix<f64>,
    pub g_tau: DMatrix<f64>,
    /// `dM/dq_j`, filled only when a rank-deficient system needs it.
    dmass: Option<Vec<DMatrix<f64>>>,
}

/// Derivative data of a step. Fails with [`Error::KindBoundary`] when a
/// contact sits on the boundary between two contact kinds.
pub fn linearize(world: &World, ctx: &StepContext) -> Result<Linearization> {
    check_kind_margins(&ctx.contacts)?;
    linearize_unchecked(world, ctx)
}

/// [`linearize`] without the contact-kind margin check. At a kind boundary
/// the result is the derivative of the kind that was detected, i.e. one-sided.
pub fn linearize_unchecked(world: &World, ctx: &StepContext) -> Result<Linearization> {
    let skel = &world.skeleton;
    let n = skel.dofs();
    let s = &ctx.state;
    let dt = s.dt;
    let cache = ArticulatedCache::new(skel, &s.q)?;
    let (_, djac) = contact_jacobian(skel, &ctx.kin, &ctx.contacts, true);
    let f = ctx.solution.f.clone();
    let id = cache.inverse_dynamics_derivatives(&s.qd, &DVector::zeros(n), true);
    let x = &ctx.next.qd - &s.qd;
    let dmx = cache.mass_matrix_times_derivative(&x);
    let minv = ctx.minv.clone();
    let mut djtf = DMatrix::zeros(n, n);
    for (r, d) in djac.iter().enumerate() {
        if f[r] != 0.0 {
            djtf += d * f[r];
        }
    }
    let g_q = &minv * (-(dmx) - id.dtau_dq * dt + djtf);
    let g_qd = DMatrix::identity(n, n) - &minv * id.dtau_dqd * dt;
    let mask = DMatrix::from_diagonal(&DVector::from_fn(n, |i, _| if world.actuated[i] { 1.0 } else { 0.0 }));
    let g_tau = &minv * mask * dt;
    Ok(Linearization {
        dt,
        minv,
        jac: ctx.jac.clone(),
        djac,
        qd: s.qd.clone(),
        qd_next: ctx.next.qd.clone(),
        f,
        g_q,
        g_qd,
        g_tau,
        dmass: None,
    })
}

impl Linearization {
    fn dofs(&self) -> usize {
        self.minv.nrows()
    }

    /// `sum_i djac[r][(i, j)] w_i` for each clamped row `r`: rows of
    /// `d(J w)/dq` at fixed `w`.
    fn djac_times(&self, rows: &[usize], w: &DVector<f64>) -> DMatrix<f64> {
        let n = self.dofs();
        let mut out = DMatrix::zeros(rows.len(), n);
        for (k, &r) in rows.iter().enumerate() {
            out.set_row(k, &(w.transpose() * &self.djac[r]));
        }
        out
    }

    fn ensure_dmass(&mut self, world: &World, q: &DVector<f64>) -> Result<()> {
        if self.dmass.is_none() {
            let n = self.dofs();
            let cache = ArticulatedCache::new(&world.skeleton, q)?;
            let mut dm = vec![DMatrix::zeros(n, n); n];
            for k in 0..n {
                let mut e = DVector::zeros(n);
                e[k] = 1.0;
                let d = cache.mass_matrix_times_derivative(&e);
                for (j, dmj) in dm.iter_mut().enumerate() {
                    dmj.set_column(k, &d.column(j));
                }
            }
            self.dmass = Some(dm);
        }
        Ok(())
    }
}

/// Least-squares position Jacobian for bouncing rows: the `X` closest to the
/// identity with `J_i X pinv(J_i) = -sigma_i` for every bouncing row `i`.
pub fn bounce_position_jacobian(rows: &[(DVector<f64>, f64)], n: usize) -> Result<DMatrix<f64>> {
    if rows.is_empty() {
        return Ok(DMatrix::identity(n, n));
    }
    let mut w = DMatrix::zeros(n * n, rows.len());
    let mut r = DVector::zeros(rows.len());
    for (k, (ji, sigma)) in rows.iter().enumerate() {
        let nn = ji.norm_squared();
        if nn == 0.0 {
            return Err(Error::DegenerateBounceRows { row: k });
        }
        let jp = ji / nn;
        // column-major vec of the outer product J_i^T pinv(J_i)^T
        let outer = ji * jp.transpose();
        w.set_column(k, &DVector::from_column_slice(outer.as_slice()));
        r[k] = *sigma;
    }
    let c = DVector::from_column_slice(DMatrix::<f64>::identity(n, n).as_slice());
    let wt = w.transpose();
    let v = &c - pinv(&wt).0 * (r + &wt * &c);
    Ok(DMatrix::from_column_slice(n, n, v.as_slice()))
}

/// Jacobians of one completed step.
pub fn step_jacobians(world: &World, ctx: &StepContext, opts: &JacobianOptions) -> Result<StepJacobians> {
    let mut lin = linearize(world, ctx)?;
    assemble(world, ctx, &mut lin, opts)
}

/// Step Jacobians from a linearization under the requested classification.
pub fn assemble(world: &World, ctx: &StepContext, lin: &mut Linearization, opts: &JacobianOptions) -> Result<StepJacobians> {
    let n = lin.dofs();
    let m = lin.jac.nrows();
    let dt = lin.dt;
    let base = opts.classes.clone().unwrap_or_else(|| ctx.solution.classes.clone());
    if base.len() != m {
        return Err(Error::DimensionMismatch(format!("classification has {} rows for {m} contact rows", base.len())));
    }
    let classes = resolve_classes(&base, opts.tie_policy)?;
    let p = ctx.problem.partition(&classes, true, None);
    let cl = &p.clamped;
    let jc = select_rows(&lin.jac, cl);
    let jb = select_rows(&lin.jac, &p.bounded);
    let jeff = &jc + p.e.transpose() * &jb;
    let mjt = &lin.minv * jeff.transpose();
    let aeff = &jc * &mjt;
    let f_c = DVector::from_fn(cl.len(), |k, _| lin.f[cl[k]]);

    // clamped-row velocity change at fixed impulses
    let bounce_rows: Vec<(usize, f64)> =
        ctx.bouncing.iter().filter(|(r, _)| cl.contains(r)).cloned().collect();
    let mut r_q = lin.djac_times(cl, &lin.qd_next) + &jc * &lin.g_q;
    let mut r_qd = &jc * &lin.g_qd;
    let r_tau = &jc * &lin.g_tau;
    for &(row, sigma) in &bounce_rows {
        let k = cl.iter().position(|&c| c == row).unwrap();
        let dpre = lin.djac_times(&[row], &lin.qd);
        let mut rq = r_q.row_mut(k);
        rq += dpre * sigma;
        let mut rqd = r_qd.row_mut(k);
        rqd += lin.jac.row(row) * sigma;
    }

    let (_, rank) = pinv(&aeff);
    let deficient = rank < cl.len();
    if deficient {
        lin.ensure_dmass(world, &ctx.state.q)?;
    }
    let dfc_q = {
        let lin_ref = &*lin;
        let p_ref = &p;
        let da = |j: usize| -> DMatrix<f64> {
            let dm = &lin_ref.dmass.as_ref().unwrap()[j];
            let dminv = -(&lin_ref.minv * dm * &lin_ref.minv);
            let djc = column_slice(&lin_ref.djac, &p_ref.clamped, j, n);
            let djb = column_slice(&lin_ref.djac, &p_ref.bounded, j, n);
            let djeff = &djc + p_ref.e.transpose() * djb;
            &djc * &lin_ref.minv * jeff.transpose() + &jc * dminv * jeff.transpose() + &jc * &lin_ref.minv * djeff.transpose()
        };
        clamped_sensitivity(&aeff, &r_q, &f_c, if deficient { Some(&da) } else { None })
    };
    let dfc_qd = clamped_sensitivity(&aeff, &r_qd, &f_c, None);
    let dfc_tau = clamped_sensitivity(&aeff, &r_tau, &f_c, None);
    let df_dq = scatter(&p, m, &dfc_q);
    let df_dqd = scatter(&p, m, &dfc_qd);
    let df_dtau = scatter(&p, m, &dfc_tau);
    let mjt_all = &lin.minv * lin.jac.transpose();
    let dqd_dq = &lin.g_q + &mjt_all * &df_dq;
    let dqd_dqd = &lin.g_qd + &mjt_all * &df_dqd;
    let dqd_dtau = &lin.g_tau + &mjt_all * &df_dtau;

    let dqd_dmu = if opts.inertial {
        Some(inertial_block(world, ctx, lin, &p, &jc, &jeff, &aeff, &f_c)?)
    } else {
        None
    };

    let id = DMatrix::identity(n, n);
    let mut dq_dq = &id + &dqd_dq * dt;
    let mut dq_dqd = &dqd_dqd * dt;
    let dq_dtau = &dqd_dtau * dt;
    let dq_dmu = dqd_dmu.as_ref().map(|d| d * dt);
    let mut bounce_corrected = false;
    if opts.bounce && !bounce_rows.is_empty() {
        let rows: Vec<(DVector<f64>, f64)> =
            bounce_rows.iter().map(|&(r, s)| (lin.jac.row(r).transpose(), s)).collect();
        let x = bounce_position_jacobian(&rows, n)?;
        dq_dqd = &x * dt;
        dq_dq = x;
        bounce_corrected = true;
    }
    Ok(StepJacobians {
        dqd_dq,
        dqd_dqd,
        dqd_dtau,
        dqd_dmu,
        dq_dq,
        dq_dqd,
        dq_dtau,
        dq_dmu,
        df_dq,
        df_dqd,
        df_dtau,
        classes,
        bounce_corrected,
    })
}

/// Step input a single Jacobian block is taken with respect to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Wrt {
    Q,
    Qd,
    Tau,
}

/// One `dqd'/d(wrt)` block. The `Qd` and `Tau` blocks skip the
/// configuration derivatives entirely; `Q` needs the full linearization.
pub fn velocity_block(world: &World, ctx: &StepContext, wrt: Wrt, opts: &JacobianOptions) -> Result<DMatrix<f64>> {
    if wrt == Wrt::Q {
        let mut lin = linearize(world, ctx)?;
        return Ok(assemble(world, ctx, &mut lin, opts)?.dqd_dq);
    }
    check_kind_margins(&ctx.contacts)?;
    let s = &ctx.state;
    let n = world.dofs();
    let m = ctx.jac.nrows();
    let minv = &ctx.minv;
    let g = match wrt {
        Wrt::Qd => {
            let cache = ArticulatedCache::new(&world.skeleton, &s.q)?;
            let id = cache.inverse_dynamics_derivatives(&s.qd, &DVector::zeros(n), true);
            DMatrix::identity(n, n) - minv * id.dtau_dqd * s.dt
        }
        _ => {
            let mask = DVector::from_fn(n, |i, _| if world.actuated[i] { s.dt } else { 0.0 });
            minv * DMatrix::from_diagonal(&mask)
        }
    };
    if m == 0 {
        return Ok(g);
    }
    let base = opts.classes.clone().unwrap_or_else(|| ctx.solution.classes.clone());
    let classes = resolve_classes(&base, opts.tie_policy)?;
    let p = ctx.problem.partition(&classes, true, None);
    let cl = &p.clamped;
    let jc = select_rows(&ctx.jac, cl);
    let jb = select_rows(&ctx.jac, &p.bounded);
    let jeff = &jc + p.e.transpose() * &jb;
    let aeff = &jc * minv * jeff.transpose();
    let f_c = DVector::from_fn(cl.len(), |k, _| ctx.solution.f[cl[k]]);
    let mut r = &jc * &g;
    if wrt == Wrt::Qd {
        for &(row, sigma) in &ctx.bouncing {
            if let Some(k) = cl.iter().position(|&c| c == row) {
                let mut rk = r.row_mut(k);
                rk += ctx.jac.row(row) * sigma;
            }
        }
    }
    let dfc = clamped_sensitivity(&aeff, &r, &f_c, None);
    Ok(g + minv * ctx.jac.transpose() * scatter(&p, m, &dfc))
}

/// `(|rows| x n)` matrix of `d J_{r i} / d q_j` for fixed `j`.
fn column_slice(djac: &[DMatrix<f64>], rows: &[usize], j: usize, n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), n, |k, i| djac[rows[k]][(i, j)])
}

/// Inertial-parameter block: Ridders differencing over `mu` of
/// `M^-1(mu) z(mu)` and `M^-1(mu)` at fixed contact geometry and impulses,
/// pushed through the same clamped-impulse sensitivity as the other blocks.
#[allow(clippy::too_many_arguments)]
fn inertial_block(
    world: &World,
    ctx: &StepContext,
    lin: &Linearization,
    p: &Partition,
    jc: &DMatrix<f64>,
    jeff: &DMatrix<f64>,
    aeff: &DMatrix<f64>,
    f_c: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let n = lin.dofs();
    let s = &ctx.state;
    let jtf = lin.jac.transpose() * &lin.f;
    let mu0 = world.skeleton.inertial_params();
    let eval = |mu: &DVector<f64>| -> Result<DVector<f64>> {
        let skel = world.skeleton.with_inertial_params_unchecked(mu)?;
        let mut cache = ArticulatedCache::new(&skel, &s.q)?;
        let c = cache.bias_forces(&s.qd);
        let z = (&s.tau - c) * lin.dt + &jtf;
        let mi = cache.minv()?;
        let x = &mi * z;
        let mut out = DVector::zeros(n + n * n);
        out.rows_mut(0, n).copy_from(&x);
        out.rows_mut(n, n * n).copy_from_slice(mi.as_slice());
        Ok(out)
    };
    let (d, _) = ridders_scaled(eval, &mu0, &world.skeleton.inertial_param_scales(), RIDDERS_STEP)?;
    let g_mu = d.rows(0, n).into_owned();
    let r_mu = jc * &g_mu;
    let da = |col: usize| -> DMatrix<f64> {
        let dminv = DMatrix::from_column_slice(n, n, d.column(col).rows(n, n * n).as_slice());
        jc * dminv * jeff.transpose()
    };
    let dfc = clamped_sensitivity(aeff, &r_mu, f_c, Some(&da));
    let df = scatter(p, lin.jac.nrows(), &dfc);
    Ok(g_mu + &lin.minv * lin.jac.transpose() * df)
}

/// Loss gradient with respect to one step's inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGradient {
    pub dq: DVector<f64>,
    pub dqd: DVector<f64>,
    pub dtau: DVector<f64>,
    /// Per contact row, when requested.
    pub dv: Option<DVector<f64>>,
}

impl LossGradient {
    /// `||dl/dqd||^2 + ||dl/dtau||^2 / dt`.
    pub fn selection_norm(&self, dt: f64) -> f64 {
        self.dqd.norm_squared() + self.dtau.norm_squared() / dt
    }
}

/// Transpose products of the step Jacobians.
pub fn backprop_step(j: &StepJacobians, gq_next: &DVector<f64>, gqd_next: &DVector<f64>) -> LossGradient {
    LossGradient {
        dq: j.dq_dq.transpose() * gq_next + j.dqd_dq.transpose() * gqd_next,
        dqd: j.dq_dqd.transpose() * gq_next + j.dqd_dqd.transpose() * gqd_next,
        dtau: j.dq_dtau.transpose() * gq_next + j.dqd_dtau.transpose() * gqd_next,
        dv: None,
    }
}

/// Result of the complementarity-aware selection.
#[derive(Clone, Debug, PartialEq)]
pub struct AwareGradient {
    pub gradient: LossGradient,
    /// True when the reclassified candidate won.
    pub reclassified: bool,
    pub classes: Vec<RowClass>,
}

/// Backprop that also tries the classification suggested by the sign of
/// `dl/dv` (normal rows that the loss wants to push apart become
/// separating, those it wants pressed together become clamping) and keeps
/// whichever candidate carries the larger gradient.
pub fn complementarity_aware_backprop(
    world: &World,
    ctx: &StepContext,
    lin: &mut Linearization,
    gq_next: &DVector<f64>,
    gqd_next: &DVector<f64>,
    opts: &JacobianOptions,
) -> Result<AwareGradient> {
    let m = lin.jac.nrows();
    // impulse on row r changes qd' by M^-1 J_r^T
    let g = gqd_next + gq_next * lin.dt;
    let dv = &lin.jac * (&lin.minv * &g);
    let mut base_opts = opts.clone();
    if base_opts.tie_policy.is_none() {
        base_opts.tie_policy = Some(TiePolicy::AllClamping);
    }
    let standard = assemble(world, ctx, lin, &base_opts)?;
    let mut first = backprop_step(&standard, gq_next, gqd_next);
    first.dv = Some(dv.clone());
    let orig = &ctx.solution.classes;
    let mut alt = orig.clone();
    for r in 0..m {
        if ctx.problem.rows[r] == crate::lcp::RowKind::Normal {
            if dv[r] < 0.0 {
                alt[r] = RowClass::Separating;
            } else if dv[r] > 0.0 || alt[r] == RowClass::Tied {
                alt[r] = RowClass::Clamping;
            }
        }
    }
    for r in 0..m {
        if let crate::lcp::RowKind::Friction { normal, .. } = ctx.problem.rows[r] {
            if alt[normal] == RowClass::Separating {
                alt[r] = RowClass::Separating;
            } else if alt[r] == RowClass::Tied || (alt[r] == RowClass::Separating && orig[normal] != RowClass::Clamping) {
                alt[r] = RowClass::Clamping;
            }
        }
    }
    if alt == standard.classes {
        return Ok(AwareGradient { gradient: first, reclassified: false, classes: standard.classes });
    }
    let alt_opts = JacobianOptions { classes: Some(alt.clone()), ..base_opts };
    let other = assemble(world, ctx, lin, &alt_opts)?;
    let mut second = backprop_step(&other, gq_next, gqd_next);
    second.dv = Some(dv);
    let dt = lin.dt;
    if second.selection_norm(dt) > first.selection_norm(dt) {
        Ok(AwareGradient { gradient: second, reclassified: true, classes: alt })
    } else {
        Ok(AwareGradient { gradient: first, reclassified: false, classes: standard.classes })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collision::{Collider, Shape};
    use crate::fdcheck::central_difference;
    use crate::skeleton::{Body, Joint, Skeleton};
    use crate::spatial::{SpatialInertia, Transform};
    use crate::world::WorldState;
    use nalgebra::Vector3;

    fn ground(friction: f64) -> Collider {
        Collider {
            name: "ground".into(),
            body: None,
            local: Transform::identity(),
            shape: Shape::HalfSpace { normal: [0.0, 1.0, 0.0], offset: 0.0 },
            restitution: 1.0,
            friction,
        }
    }

    /// x, y slide plus rotation about z; the last body carries `inertia`.
    fn planar(inertia: SpatialInertia, shape: Shape, friction: f64, restitution: f64) -> World {
        let mk = |name: &str, parent, joint, inertia| Body {
            name: name.into(),
            parent,
            placement: Transform::identity(),
            joint,
            inertia,
        };
        let skel = Skeleton::new(
            vec![
                mk("x", None, Joint::prismatic(Vector3::x()), SpatialInertia::solid_sphere(0.1, 0.02)),
                mk("y", Some(0), Joint::prismatic(Vector3::y()), SpatialInertia::solid_sphere(0.1, 0.02)),
                mk("body", Some(1), Joint::revolute(Vector3::z()), inertia),
            ],
            Vector3::new(0.0, -9.81, 0.0),
        )
        .unwrap();
        let body = Collider {
            name: "body".into(),
            body: Some(2),
            local: Transform::identity(),
            shape,
            restitution,
            friction,
        };
        World::new(skel, vec![body, ground(friction)], vec![true; 3]).unwrap()
    }

    fn pendulum() -> World {
        let skel = Skeleton::new(
            vec![
                Body {
                    name: "upper".into(),
                    parent: None,
                    placement: Transform::identity(),
                    joint: Joint::revolute(Vector3::z()),
                    inertia: SpatialInertia::new(1.0, Vector3::new(0.0, -0.5, 0.0), nalgebra::Matrix3::identity() * 0.02),
                },
                Body {
                    name: "lower".into(),
                    parent: Some(0),
                    placement: Transform::from_translation(Vector3::new(0.0, -1.0, 0.0)),
                    joint: Joint::revolute(Vector3::z()),
                    inertia: SpatialInertia::new(0.7, Vector3::new(0.0, -0.4, 0.1), nalgebra::Matrix3::identity() * 0.01),
                },
            ],
            Vector3::new(0.0, -9.81, 0.0),
        )
        .unwrap();
        World::new(skel, vec![], vec![true, true]).unwrap()
    }

    fn state(q: &[f64], qd: &[f64], tau: &[f64]) -> WorldState {
        WorldState::new(DVector::from_row_slice(q), DVector::from_row_slice(qd), DVector::from_row_slice(tau), 0.01)
    }

    /// Central differences of `(q', qd')` over `(q, qd, tau)`.
    fn fd_blocks(w: &World, s: &WorldState) -> [DMatrix<f64>; 6] {
        let n = w.dofs();
        let mut x = DVector::zeros(3 * n);
        x.rows_mut(0, n).copy_from(&s.q);
        x.rows_mut(n, n).copy_from(&s.qd);
        x.rows_mut(2 * n, n).copy_from(&s.tau);
        let f = |x: &DVector<f64>| -> Result<DVector<f64>> {
            let st = WorldState::new(x.rows(0, n).into(), x.rows(n, n).into(), x.rows(2 * n, n).into(), s.dt);
            let next = w.step_state(&st)?;
            let mut out = DVector::zeros(2 * n);
            out.rows_mut(0, n).copy_from(&next.q);
            out.rows_mut(n, n).copy_from(&next.qd);
            Ok(out)
        };
        let d = central_difference(f, &x, 1e-7).unwrap();
        let blk = |r: usize, c: usize| d.view((r * n, c * n), (n, n)).into_owned();
        [blk(0, 0), blk(0, 1), blk(0, 2), blk(1, 0), blk(1, 1), blk(1, 2)]
    }

    fn assert_close(j: &StepJacobians, fd: &[DMatrix<f64>; 6], tol: f64) {
        let blocks = j.blocks();
        for (k, (name, a)) in blocks.iter().take(6).enumerate() {
            let err = (*a - &fd[k]).abs().max();
            let scale = fd[k].abs().max().max(1e-6);
            assert!(err / scale < tol, "{name}: err {err:e} scale {scale:e}\n{a}\n{}", fd[k]);
        }
    }

    #[test]
    fn contact_free_torque_block_is_dt_minv() {
        let w = pendulum();
        let s = state(&[0.3, -0.7], &[1.1, -0.4], &[0.2, 0.5]);
        let ctx = w.step(&s, None).unwrap();
        let j = step_jacobians(&w, &ctx, &JacobianOptions::default()).unwrap();
        assert!((&j.dqd_dtau - &ctx.minv * 0.01).abs().max() < 1e-15);
        assert_close(&j, &fd_blocks(&w, &s), 1e-6);
    }

    #[test]
    fn sticking_ball_matches_differences() {
        let w = planar(SpatialInertia::solid_sphere(1.0, 0.1), Shape::Sphere { radius: 0.1 }, 0.5, 0.0);
        let s = state(&[0.0, 0.095, 0.2], &[0.05, -0.2, 0.3], &[0.1, 0.0, 0.01]);
        let ctx = w.step(&s, None).unwrap();
        // the out-of-plane tangent carries no impulse
        assert_eq!(ctx.solution.classes, vec![RowClass::Clamping, RowClass::Clamping, RowClass::Separating]);
        let j = step_jacobians(&w, &ctx, &JacobianOptions::default()).unwrap();
        assert_close(&j, &fd_blocks(&w, &s), 1e-5);
    }

    #[test]
    fn sliding_box_corner_matches_differences() {
        let w = planar(
            SpatialInertia::solid_box(2.0, Vector3::new(0.2, 0.1, 0.15)),
            Shape::Box { half_extents: [0.2, 0.1, 0.15] },
            0.3,
            0.0,
        );
        let s = state(&[0.0, 0.175, 0.5], &[3.0, -0.5, 0.2], &[1.0, 0.0, 0.0]);
        let ctx = w.step(&s, None).unwrap();
        assert!(
            ctx.solution.classes.iter().any(|c| matches!(c, RowClass::BoundUpper | RowClass::BoundLower)),
            "{:?} {:?}",
            ctx.solution.classes,
            ctx.contacts.iter().map(|c| (c.kind, c.depth)).collect::<Vec<_>>()
        );
        let j = step_jacobians(&w, &ctx, &JacobianOptions::default()).unwrap();
        assert_close(&j, &fd_blocks(&w, &s), 1e-5);
    }

    #[test]
    fn redundant_contacts_give_velocity_blocks() {
        // flat box: four coplanar corners on three dofs
        let w = planar(
            SpatialInertia::solid_box(2.0, Vector3::new(0.2, 0.1, 0.15)),
            Shape::Box { half_extents: [0.2, 0.1, 0.15] },
            0.0,
            0.0,
        );
        let s = state(&[0.0, 0.099, 0.0], &[0.0, -0.1, 0.0], &[0.0, 0.0, 0.0]);
        let ctx = w.step(&s, None).unwrap();
        assert_eq!(ctx.contacts.len(), 4);
        let j = step_jacobians(&w, &ctx, &JacobianOptions::default()).unwrap();
        let fd = fd_blocks(&w, &s);
        for (k, a) in [&j.dqd_dq, &j.dqd_dqd, &j.dqd_dtau].into_iter().enumerate() {
            assert!((a - &fd[3 + k]).abs().max() < 1e-6, "{a}\n{}", fd[3 + k]);
        }
    }

    #[test]
    fn single_blocks_match_the_full_assembly() {
        let w = planar(
            SpatialInertia::solid_box(2.0, Vector3::new(0.2, 0.1, 0.15)),
            Shape::Box { half_extents: [0.2, 0.1, 0.15] },
            0.3,
            0.0,
        );
        for s in [
            state(&[0.0, 0.175, 0.5], &[3.0, -0.5, 0.2], &[1.0, 0.0, 0.0]),
            state(&[0.0, 0.099, 0.0], &[0.0, -0.1, 0.0], &[0.0, 0.0, 0.0]),
            state(&[0.0, 1.0, 0.0], &[0.0, -0.1, 0.3], &[0.0, 1.0, 0.0]),
        ] {
            let ctx = w.step(&s, None).unwrap();
            let opts = JacobianOptions::default();
            let j = step_jacobians(&w, &ctx, &opts).unwrap();
            for (wrt, full) in [(Wrt::Q, &j.dqd_dq), (Wrt::Qd, &j.dqd_dqd), (Wrt::Tau, &j.dqd_dtau)] {
                let b = velocity_block(&w, &ctx, wrt, &opts).unwrap();
                assert!((&b - full).amax() < 1e-12, "{wrt:?}\n{b}\n{full}");
            }
        }
    }

    #[test]
    fn separating_rows_do_not_matter() {
        let w = planar(SpatialInertia::solid_sphere(1.0, 0.1), Shape::Sphere { radius: 0.1 }, 0.5, 0.0);
        let s = state(&[0.0, 0.095, 0.0], &[0.3, 2.0, 0.0], &[0.0, 0.0, 0.0]);
        let ctx = w.step(&s, None).unwrap();
        assert_eq!(ctx.solution.classes[0], RowClass::Separating);
        let mut lin = linearize(&w, &ctx).unwrap();
        let a = assemble(&w, &ctx, &mut lin, &JacobianOptions::default()).unwrap();
        for r in 0..lin.jac.nrows() {
            if a.classes[r] == RowClass::Separating {
                lin.jac.row_mut(r).fill(0.0);
                lin.djac[r].fill(0.0);
            }
        }
        let b = assemble(&w, &ctx, &mut lin, &JacobianOptions::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_bounce_position_block_is_exact() {
        for sigma in [0.2, 0.5, 1.0] {
            let skel = Skeleton::new(
                vec![Body {
                    name: "ball".into(),
                    parent: None,
                    placement: Transform::identity(),
                    joint: Joint::prismatic(Vector3::y()),
                    inertia: SpatialInertia::solid_sphere(1.0, 0.1),
                }],
                Vector3::new(0.0, -9.81, 0.0),
            )
            .unwrap();
            let ball = Collider {
                name: "ball".into(),
                body: Some(0),
                local: Transform::identity(),
                shape: Shape::Sphere { radius: 0.1 },
                restitution: sigma,
                friction: 0.0,
            };
            let w = World::new(skel, vec![ball, ground(0.0)], vec![true]).unwrap();
            let s = state(&[0.099], &[-2.0], &[0.0]);
            let ctx = w.step(&s, None).unwrap();
            let j = step_jacobians(&w, &ctx, &JacobianOptions::default()).unwrap();
            assert!(j.bounce_corrected);
            assert!((j.dq_dq[(0, 0)] + sigma).abs() < 1e-12);
            assert!((j.dq_dqd[(0, 0)] + sigma * 0.01).abs() < 1e-12);
        }
    }

    #[test]
    fn multi_bounce_matches_dense_least_squares() {
        let n = 4;
        let rows = vec![
            (DVector::from_row_slice(&[1.0, 0.5, 0.0, -0.2]), 0.5),
            (DVector::from_row_slice(&[0.0, 1.0, 0.3, 0.0]), 0.8),
        ];
        let x = bounce_position_jacobian(&rows, n).unwrap();
        // minimize ||X - I||_F subject to J_i X J_i^+ = -sigma_i: Lagrange
        // solution X = I + sum_k l_k J_k^T J_k^{+T}, with a small dense solve
        let outer: Vec<DMatrix<f64>> = rows.iter().map(|(j, _)| j * j.transpose() / j.norm_squared()).collect();
        let g = DMatrix::from_fn(2, 2, |a, b| outer[a].dot(&outer[b]));
        let rhs = DVector::from_fn(2, |a, _| -rows[a].1 - outer[a].trace());
        let l = g.lu().solve(&rhs).unwrap();
        let mut dense = DMatrix::identity(n, n);
        for k in 0..2 {
            dense += &outer[k] * l[k];
        }
        assert!((x - dense).abs().max() < 1e-12);
    }

    #[test]
    fn zero_bounce_row_is_rejected() {
        let rows = vec![(DVector::zeros(3), 0.5)];
        assert_eq!(bounce_position_jacobian(&rows, 3), Err(Error::DegenerateBounceRows { row: 0 }));
    }

    #[test]
    fn inertial_block_matches_differences() {
        let w = planar(SpatialInertia::solid_sphere(1.0, 0.1), Shape::Sphere { radius: 0.1 }, 0.5, 0.0);
        let s = state(&[0.0, 0.095, 0.2], &[0.05, -0.2, 0.3], &[0.1, 0.0, 0.01]);
        let ctx = w.step(&s, None).unwrap();
        let opts = JacobianOptions { inertial: true, ..Default::default() };
        let j = step_jacobians(&w, &ctx, &opts).unwrap();
        let mu = w.skeleton.inertial_params();
        let fd = central_difference(|m| Ok(w.with_inertial_params(m)?.step_state(&s)?.qd), &mu, 1e-5).unwrap();
        let a = j.dqd_dmu.unwrap();
        let err = (&a - &fd).abs().max();
        let diff = (&a - &fd).abs();
        let (i, k) = diff.iter().enumerate().fold((0, 0.0), |b, (i, v)| if *v > b.1 { (i, *v) } else { b });
        assert!(err < 1e-6 * fd.abs().max().max(1.0), "{err:e} at {i} {k} a={} fd={}", a[i], fd[i]);
    }

    #[test]
    fn ties_need_a_policy() {
        let classes = vec![RowClass::Clamping, RowClass::Tied, RowClass::Tied];
        assert_eq!(resolve_classes(&classes, None), Err(Error::TiedPresent { rows: vec![1, 2] }));
        let all = tied_subgradient(&classes, TiePolicy::AllSeparating);
        assert_eq!(all, vec![RowClass::Clamping, RowClass::Separating, RowClass::Separating]);
        let r1 = tied_subgradient(&classes, TiePolicy::Random { seed: 7 });
        assert_eq!(r1, tied_subgradient(&classes, TiePolicy::Random { seed: 7 }));
    }

    #[test]
    fn impulse_jacobian_of_offset_is_minus_inverse() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let b = DVector::from_row_slice(&[-1.0, -0.3]);
        let p = LcpProblem::new(a.clone(), b, vec![crate::lcp::RowKind::Normal; 2]).unwrap();
        let sol = p.solve(None).unwrap();
        let da = vec![DMatrix::zeros(2, 2); 2];
        let d = lcp_impulse_jacobian(&p, &sol, &da, &DMatrix::identity(2, 2)).unwrap();
        assert!((d + a.try_inverse().unwrap()).abs().max() < 1e-12);
    }

    #[test]
    fn aware_backprop_unsticks_a_resting_ball() {
        let w = planar(SpatialInertia::solid_sphere(1.0, 0.1), Shape::Sphere { radius: 0.1 }, 0.0, 0.0);
        let s = state(&[0.0, 0.0999, 0.0], &[0.0, 0.0, 0.0], &[0.0, 0.0, 0.0]);
        let ctx = w.step(&s, None).unwrap();
        assert_eq!(ctx.solution.classes, vec![RowClass::Clamping]);
        // loss is minus the next height: wants the ball to lift off
        let gq = DVector::from_row_slice(&[0.0, -1.0, 0.0]);
        let gqd = DVector::zeros(3);
        let plain = backprop_step(&step_jacobians(&w, &ctx, &JacobianOptions::default()).unwrap(), &gq, &gqd);
        assert!(plain.dtau[1].abs() < 1e-12);
        let mut lin = linearize(&w, &ctx).unwrap();
        let aware = complementarity_aware_backprop(&w, &ctx, &mut lin, &gq, &gqd, &JacobianOptions::default()).unwrap();
        assert!(aware.reclassified);
        assert_eq!(aware.classes, vec![RowClass::Separating]);
        assert!(aware.gradient.dtau[1] < 0.0);
        assert!(aware.gradient.dv.unwrap()[0] < 0.0);
    }

    #[test]
    fn aware_backprop_keeps_standard_when_loss_presses_down() {
        let w = planar(SpatialInertia::solid_sphere(1.0, 0.1), Shape::Sphere { radius: 0.1 }, 0.0, 0.0);
        let s = state(&[0.0, 0.0999, 0.0], &[0.0, 0.0, 0.0], &[0.0, 0.0, 0.0]);
        let ctx = w.step(&s, None).unwrap();
        let gq = DVector::from_row_slice(&[0.0, 1.0, 0.0]);
        let mut lin = linearize(&w, &ctx).unwrap();
        let aware =
            complementarity_aware_backprop(&w, &ctx, &mut lin, &gq, &DVector::zeros(3), &JacobianOptions::default())
                .unwrap();
        assert!(!aware.reclassified);
        assert!(aware.gradient.dtau[1].abs() < 1e-12);
    }
}
