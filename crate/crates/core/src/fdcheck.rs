//! Finite-difference Jacobian oracles and analytic-versus-oracle reports.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use crate::diffstep::StepJacobians;
use crate::error::{Error, Result};
use crate::world::{World, WorldState};

/// Relative step used by [`central_difference`] when none is given.
pub const CENTRAL_STEP: f64 = 1e-6;
/// Initial relative step of [`ridders`].
pub const RIDDERS_STEP: f64 = 1e-2;
const RIDDERS_CON: f64 = 1.4;
const RIDDERS_NTAB: usize = 10;
const RIDDERS_SAFE: f64 = 2.0;

fn eval<F>(f: &mut F, x: &DVector<f64>) -> Result<DVector<f64>>
where
    F: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
{
    let y = f(x)?;
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    Ok(y)
}

/// Central differences with step `h * max(1, |x_i|)` per column.
pub fn central_difference<F>(mut f: F, x: &DVector<f64>, h: f64) -> Result<DMatrix<f64>>
where
    F: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
{
    let mut cols = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let hi = h * x[i].abs().max(1.0);
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += hi;
        xm[i] -= hi;
        let d = (eval(&mut f, &xp)? - eval(&mut f, &xm)?) / (2.0 * hi);
        cols.push(d);
    }
    Ok(stack_columns(cols, x.len()))
}

fn stack_columns(cols: Vec<DVector<f64>>, n: usize) -> DMatrix<f64> {
    let m = cols.first().map_or(0, |c| c.len());
    let mut out = DMatrix::zeros(m, n);
    for (j, c) in cols.into_iter().enumerate() {
        out.set_column(j, &c);
    }
    out
}

/// Ridders' extrapolated central differences. Each output entry keeps the
/// tableau value with the smallest error estimate; the second matrix holds
/// those estimates.
pub fn ridders<F>(mut f: F, x: &DVector<f64>, h0: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)>
where
    F: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
{
    let mut jac_cols = Vec::with_capacity(x.len());
    let mut err_cols = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut hh = h0 * x[i].abs().max(1.0);
        // central difference and the round-off level of its numerator
        let central = |f: &mut F, hh: f64| -> Result<(DVector<f64>, DVector<f64>)> {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += hh;
            xm[i] -= hh;
            let (fp, fm) = (eval(f, &xp)?, eval(f, &xm)?);
            let rnd = fp.zip_map(&fm, |a, b| f64::EPSILON * a.abs().max(b.abs()) / hh);
            Ok(((fp - fm) / (2.0 * hh), rnd))
        };
        let (first, rnd0) = central(&mut f, hh)?;
        let m = first.len();
        let mut prev: Vec<DVector<f64>> = vec![first.clone()];
        let mut best = first;
        let mut err = DVector::from_element(m, f64::INFINITY);
        let mut best_rnd = rnd0;
        let mut done = vec![false; m];
        for _ in 1..RIDDERS_NTAB {
            hh /= RIDDERS_CON;
            let (d, rnd) = central(&mut f, hh)?;
            let mut cur: Vec<DVector<f64>> = vec![d];
            let mut fac = RIDDERS_CON * RIDDERS_CON;
            for j in 1..=prev.len() {
                let next = (&cur[j - 1] * fac - &prev[j - 1]) / (fac - 1.0);
                fac *= RIDDERS_CON * RIDDERS_CON;
                for k in 0..m {
                    if done[k] {
                        continue;
                    }
                    let e = (next[k] - cur[j - 1][k]).abs().max((next[k] - prev[j - 1][k]).abs());
                    if e <= err[k] {
                        err[k] = e;
                        best[k] = next[k];
                        best_rnd[k] = rnd[k];
                    }
                }
                cur.push(next);
            }
            let last = prev.len();
            for k in 0..m {
                if !done[k] && (cur[last][k] - prev[last - 1][k]).abs() >= RIDDERS_SAFE * err[k] {
                    done[k] = true;
                }
            }
            prev = cur;
            if done.iter().all(|&d| d) {
                break;
            }
        }
        // extrapolation amplifies round-off by a small constant factor
        let err = err + best_rnd * 4.0;
        jac_cols.push(best);
        err_cols.push(err);
    }
    Ok((stack_columns(jac_cols, x.len()), stack_columns(err_cols, x.len())))
}

/// Ridders over `x + diag(scale) u` at `u = 0`, returned in the original
/// coordinates. Keeps steps proportionate for parameters of very different
/// magnitude.
pub fn ridders_scaled<F>(mut f: F, x: &DVector<f64>, scale: &DVector<f64>, h0: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)>
where
    F: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
{
    let (mut d, mut e) = ridders(|u: &DVector<f64>| f(&(x + u.component_mul(scale))), &DVector::zeros(x.len()), h0)?;
    for (k, w) in scale.iter().enumerate() {
        let mut dc = d.column_mut(k);
        dc /= *w;
        let mut ec = e.column_mut(k);
        ec /= *w;
    }
    Ok((d, e))
}

/// Error statistics of one analytic block against its oracle.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockReport {
    pub name: String,
    pub max_abs: f64,
    /// `max |a - o| / max(max |o|, 1e-6)`.
    pub max_rel: f64,
    /// Row and column of the largest absolute error.
    pub worst: (usize, usize),
    pub step: f64,
    pub oracle_error: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffReport {
    pub tolerance: f64,
    pub blocks: Vec<BlockReport>,
}

impl DiffReport {
    pub fn pass(&self) -> bool {
        self.blocks.iter().all(|b| b.pass)
    }

    pub fn max_rel(&self) -> f64 {
        self.blocks.iter().fold(0.0, |a, b| a.max(b.max_rel))
    }

    /// Comma-separated table, one row per block.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("block,max_abs,max_rel,worst_row,worst_col,step,oracle_error,tolerance,pass\n");
        for b in &self.blocks {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                b.name,
                crate::format::float(b.max_abs),
                crate::format::float(b.max_rel),
                b.worst.0,
                b.worst.1,
                crate::format::float(b.step),
                crate::format::float(b.oracle_error),
                crate::format::float(self.tolerance),
                b.pass
            );
        }
        s
    }
}

/// One block to compare: name, analytic matrix, oracle matrix, step used and
/// oracle error estimate.
pub struct BlockPair<'a> {
    pub name: &'a str,
    pub analytic: &'a DMatrix<f64>,
    pub oracle: &'a DMatrix<f64>,
    pub step: f64,
    pub oracle_error: f64,
}

pub fn compare(pairs: &[BlockPair], tolerance: f64) -> Result<DiffReport> {
    let mut blocks = Vec::new();
    for p in pairs {
        if p.analytic.shape() != p.oracle.shape() {
            return Err(Error::ShapeMismatch {
                block: p.name.to_string(),
                detail: format!("analytic {:?} vs oracle {:?}", p.analytic.shape(), p.oracle.shape()),
            });
        }
        let mut max_abs = 0.0;
        let mut worst = (0, 0);
        let mut scale: f64 = 0.0;
        for r in 0..p.oracle.nrows() {
            for c in 0..p.oracle.ncols() {
                let e = (p.analytic[(r, c)] - p.oracle[(r, c)]).abs();
                if e > max_abs || e.is_nan() {
                    max_abs = e;
                    worst = (r, c);
                }
                scale = scale.max(p.oracle[(r, c)].abs());
            }
        }
        let max_rel = max_abs / scale.max(1e-6);
        blocks.push(BlockReport {
            name: p.name.to_string(),
            max_abs,
            max_rel,
            worst,
            step: p.step,
            oracle_error: p.oracle_error,
            pass: max_rel <= tolerance,
        });
    }
    Ok(DiffReport { tolerance, blocks })
}

/// Finite-difference oracle used for step checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Oracle {
    Central,
    Ridders,
}

/// Central-difference steps tried by [`check_step`]; each block reports the
/// step that agreed best.
pub const CENTRAL_SWEEP: [f64; 4] = [1e-4, 1e-5, 1e-6, 1e-7];

/// `(q, qd, tau) -> (q', qd')` through the public step function.
fn stacked_step<'a>(world: &'a World, dt: f64) -> impl FnMut(&DVector<f64>) -> Result<DVector<f64>> + 'a {
    let n = world.dofs();
    move |x: &DVector<f64>| {
        let s = WorldState::new(x.rows(0, n).into(), x.rows(n, n).into(), x.rows(2 * n, n).into(), dt);
        let next = world.step_state(&s)?;
        let mut out = DVector::zeros(2 * n);
        out.rows_mut(0, n).copy_from(&next.q);
        out.rows_mut(n, n).copy_from(&next.qd);
        Ok(out)
    }
}

fn split_blocks(d: &DMatrix<f64>, n: usize) -> Vec<DMatrix<f64>> {
    let blk = |r: usize, c: usize| d.view((r * n, c * n), (n, n)).into_owned();
    vec![blk(0, 0), blk(0, 1), blk(0, 2), blk(1, 0), blk(1, 1), blk(1, 2)]
}

/// Compares analytic step Jacobians at `state` against differences of
/// [`World::step_state`]. The inertial blocks are checked when present.
pub fn check_step(
    world: &World,
    state: &WorldState,
    analytic: &StepJacobians,
    oracle: Oracle,
    tolerance: f64,
) -> Result<DiffReport> {
    let n = world.dofs();
    let mut x = DVector::zeros(3 * n);
    x.rows_mut(0, n).copy_from(&state.q);
    x.rows_mut(n, n).copy_from(&state.qd);
    x.rows_mut(2 * n, n).copy_from(&state.tau);
    let named = analytic.blocks();
    // (oracle, step, oracle error) per block
    let mut chosen: Vec<(DMatrix<f64>, f64, f64)> = Vec::new();
    match oracle {
        Oracle::Ridders => {
            let (d, e) = ridders(stacked_step(world, state.dt), &x, RIDDERS_STEP)?;
            for (b, eb) in split_blocks(&d, n).into_iter().zip(split_blocks(&e, n)) {
                chosen.push((b, RIDDERS_STEP, eb.amax()));
            }
        }
        Oracle::Central => {
            let sweeps = CENTRAL_SWEEP
                .iter()
                .map(|&h| Ok((h, split_blocks(&central_difference(stacked_step(world, state.dt), &x, h)?, n))))
                .collect::<Result<Vec<_>>>()?;
            for k in 0..6 {
                let a = named[k].1;
                let (h, b) = sweeps
                    .iter()
                    .map(|(h, bs)| (*h, &bs[k]))
                    .min_by(|p, q| (a - p.1).amax().total_cmp(&(a - q.1).amax()))
                    .unwrap();
                chosen.push((b.clone(), h, 0.0));
            }
        }
    }
    if analytic.dqd_dmu.is_some() {
        let mu = world.skeleton.inertial_params();
        let scale = world.skeleton.inertial_param_scales();
        let f = |m: &DVector<f64>| world.with_inertial_params(m)?.step_state(state).map(|s| s.qd);
        let (o, h, err) = match oracle {
            Oracle::Ridders => {
                let (d, e) = ridders_scaled(f, &mu, &scale, RIDDERS_STEP)?;
                (d, RIDDERS_STEP, e.amax())
            }
            Oracle::Central => {
                let mut d = central_difference(|u: &DVector<f64>| f(&(&mu + u.component_mul(&scale))), &DVector::zeros(mu.len()), CENTRAL_STEP)?;
                for (k, w) in scale.iter().enumerate() {
                    let mut c = d.column_mut(k);
                    c /= *w;
                }
                (d, CENTRAL_STEP, 0.0)
            }
        };
        chosen.push((&o * state.dt, h, err * state.dt));
        chosen.push((o, h, err));
    }
    let pairs: Vec<BlockPair> = named
        .iter()
        .zip(&chosen)
        .map(|((name, a), (o, h, e))| BlockPair { name, analytic: a, oracle: o, step: *h, oracle_error: *e })
        .collect();
    compare(&pairs, tolerance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn scalar(g: impl Fn(f64) -> f64) -> impl FnMut(&DVector<f64>) -> Result<DVector<f64>> {
        move |x: &DVector<f64>| Ok(DVector::from_element(1, g(x[0])))
    }

    #[test]
    fn central_on_square() {
        let j = central_difference(scalar(|x| x * x), &DVector::from_element(1, 3.0), 1e-5 / 3.0).unwrap();
        assert!((j[(0, 0)] - 6.0).abs() < 1e-9);
    }

    #[test]
    fn central_is_exact_for_linear_maps() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -3.0, 0.5]);
        let j = central_difference(|x| Ok(&a * x), &DVector::from_vec(vec![0.2, -0.1]), 0.25).unwrap();
        assert!((j - a).amax() < 1e-15);
    }

    #[test]
    fn ridders_on_smooth_functions() {
        let (j, _) = ridders(scalar(f64::exp), &DVector::zeros(1), RIDDERS_STEP).unwrap();
        assert!((j[(0, 0)] - 1.0).abs() < 1e-10);
        let (j, _) = ridders(scalar(f64::abs), &DVector::from_element(1, 0.5), RIDDERS_STEP).unwrap();
        assert!((j[(0, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ridders_error_estimate_bounds_true_error() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut ok = 0;
        let total = 1000;
        for k in 0..total {
            let x: f64 = rng.gen_range(-2.0..2.0);
            let (g, dg): (Box<dyn Fn(f64) -> f64>, f64) = match k % 3 {
                0 => (Box::new(|x: f64| x * x * x), 3.0 * x * x),
                1 => (Box::new(f64::sin), x.cos()),
                _ => (Box::new(f64::exp), x.exp()),
            };
            let (j, e) = ridders(scalar(g), &DVector::from_element(1, x), RIDDERS_STEP).unwrap();
            // estimates carry an absolute floor at round-off level
            if (j[(0, 0)] - dg).abs() <= e[(0, 0)] {
                ok += 1;
            }
        }
        assert!(ok as f64 >= 0.99 * total as f64, "{ok}/{total}");
    }

    #[test]
    fn non_finite_is_reported() {
        let r = central_difference(scalar(|x| 1.0 / x), &DVector::zeros(1), 0.0);
        assert_eq!(r.unwrap_err(), Error::NonFinite);
    }

    #[test]
    fn compare_names_the_failing_block() {
        let a = DMatrix::identity(2, 2);
        let mut b = a.clone();
        let ok = compare(&[BlockPair { name: "x", analytic: &a, oracle: &b, step: 1e-6, oracle_error: 0.0 }], 1e-6).unwrap();
        assert!(ok.pass() && ok.blocks[0].max_abs == 0.0);
        b[(1, 0)] = 0.5;
        let bad = compare(&[BlockPair { name: "y", analytic: &a, oracle: &b, step: 1e-6, oracle_error: 0.0 }], 1e-6).unwrap();
        assert!(!bad.pass());
        assert_eq!((bad.blocks[0].name.as_str(), bad.blocks[0].worst), ("y", (1, 0)));
        let c = DMatrix::zeros(3, 2);
        assert!(matches!(
            compare(&[BlockPair { name: "z", analytic: &a, oracle: &c, step: 0.0, oracle_error: 0.0 }], 1e-6),
            Err(Error::ShapeMismatch { .. })
        ));
    }
}
