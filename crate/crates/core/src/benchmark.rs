//! Timing of analytic step Jacobians against central and Ridders
//! differencing of the same step function.
//!
//! Analytic timings start from a completed [`StepContext`], since a
//! simulation produces it anyway; the difference oracles re-run the step for
//! every perturbed input. Everything runs on the calling thread.

use std::fmt::Write as _;
use std::hint::black_box;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use crate::diffstep::{bounce_position_jacobian, step_jacobians, velocity_block, JacobianOptions, Wrt};
use crate::error::{Error, Result};
use crate::fdcheck::{central_difference, ridders, CENTRAL_STEP, RIDDERS_STEP};
use crate::format::float;
use crate::world::{StepContext, World, WorldState};

/// Column header of [`to_csv`]; the first speedup is against central
/// differences, the second against Ridders.
pub const HEADER: &str = "scene,jacobian,analytic,central,speedup,ridders,speedup";

/// Row labels after `All`, matching the matrix export labels.
pub const BLOCKS: [&str; 5] = ["dq_next/dq", "dqd_next/dq", "dq_next/dqd", "dqd_next/dqd", "dqd_next/dtau"];

/// Median wall-clock seconds per Jacobian.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkRow {
    pub scene: String,
    pub jacobian: String,
    pub analytic: f64,
    pub central: f64,
    pub ridders: f64,
}

impl BenchmarkRow {
    pub fn central_speedup(&self) -> f64 {
        self.central / self.analytic
    }

    pub fn ridders_speedup(&self) -> f64 {
        self.ridders / self.analytic
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BenchmarkConfig {
    pub repetitions: usize,
    pub warmup: usize,
    /// Skip the Ridders columns (reported as NaN); they dominate run time.
    pub skip_ridders: bool,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self { repetitions: 100, warmup: 10, skip_ridders: false }
    }
}

fn median_seconds<T>(cfg: &BenchmarkConfig, mut f: impl FnMut() -> Result<T>) -> Result<f64> {
    for _ in 0..cfg.warmup {
        black_box(f()?);
    }
    let mut times = Vec::with_capacity(cfg.repetitions);
    for _ in 0..cfg.repetitions.max(1) {
        let t = Instant::now();
        black_box(f()?);
        times.push(t.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    let k = times.len();
    let med = if k % 2 == 1 { times[k / 2] } else { 0.5 * (times[k / 2 - 1] + times[k / 2]) };
    // a timer tick of zero would make the speedup infinite
    Ok(med.max(1e-9))
}

/// `x -> (q', qd')` where `x` replaces the inputs listed in `wrt` (stacked in
/// that order) and every other input stays at `state`.
fn step_map<'a>(world: &'a World, state: &'a WorldState, wrt: &'a [Wrt]) -> impl FnMut(&DVector<f64>) -> Result<DVector<f64>> + 'a {
    let n = world.dofs();
    move |x: &DVector<f64>| {
        let mut s = state.clone();
        for (k, w) in wrt.iter().enumerate() {
            let part = x.rows(k * n, n);
            match w {
                Wrt::Q => s.q.copy_from(&part),
                Wrt::Qd => s.qd.copy_from(&part),
                Wrt::Tau => s.tau.copy_from(&part),
            }
        }
        let next = world.step_state(&s)?;
        let mut out = DVector::zeros(2 * n);
        out.rows_mut(0, n).copy_from(&next.q);
        out.rows_mut(n, n).copy_from(&next.qd);
        Ok(out)
    }
}

fn inputs(state: &WorldState, wrt: &[Wrt]) -> DVector<f64> {
    let n = state.q.len();
    let mut x = DVector::zeros(n * wrt.len());
    for (k, w) in wrt.iter().enumerate() {
        let v = match w {
            Wrt::Q => &state.q,
            Wrt::Qd => &state.qd,
            Wrt::Tau => &state.tau,
        };
        x.rows_mut(k * n, n).copy_from(v);
    }
    x
}

/// Analytic computation of one labeled block.
fn analytic_block(world: &World, ctx: &StepContext, label: &str) -> Result<DMatrix<f64>> {
    let opts = JacobianOptions::default();
    let n = world.dofs();
    let dt = ctx.state.dt;
    let bounce = || -> Result<Option<DMatrix<f64>>> {
        let clamped: Vec<(DVector<f64>, f64)> = ctx
            .bouncing
            .iter()
            .filter(|(r, _)| ctx.solution.classes[*r] == crate::lcp::RowClass::Clamping)
            .map(|&(r, s)| (ctx.jac.row(r).transpose(), s))
            .collect();
        if clamped.is_empty() {
            Ok(None)
        } else {
            bounce_position_jacobian(&clamped, n).map(Some)
        }
    };
    Ok(match label {
        "dq_next/dq" => match bounce()? {
            Some(x) => x,
            None => DMatrix::identity(n, n) + velocity_block(world, ctx, Wrt::Q, &opts)? * dt,
        },
        "dq_next/dqd" => match bounce()? {
            Some(x) => x * dt,
            None => velocity_block(world, ctx, Wrt::Qd, &opts)? * dt,
        },
        "dqd_next/dq" => velocity_block(world, ctx, Wrt::Q, &opts)?,
        "dqd_next/dqd" => velocity_block(world, ctx, Wrt::Qd, &opts)?,
        "dqd_next/dtau" => velocity_block(world, ctx, Wrt::Tau, &opts)?,
        other => return Err(Error::InvalidModel(format!("unknown Jacobian block `{other}`"))),
    })
}

fn block_inputs(label: &str) -> &'static [Wrt] {
    match label {
        "dq_next/dq" | "dqd_next/dq" => &[Wrt::Q],
        "dq_next/dqd" | "dqd_next/dqd" => &[Wrt::Qd],
        _ => &[Wrt::Tau],
    }
}

/// Times `All` and each of [`BLOCKS`] at the first step from `state`.
pub fn benchmark_scene(scene: &str, world: &World, state: &WorldState, cfg: &BenchmarkConfig) -> Result<Vec<BenchmarkRow>> {
    let ctx = world.step(state, None)?;
    let s = &ctx.state;
    let mut rows = Vec::with_capacity(1 + BLOCKS.len());
    let all: &[Wrt] = &[Wrt::Q, Wrt::Qd, Wrt::Tau];
    let opts = JacobianOptions::default();
    let mut time_row = |label: &str, wrt: &[Wrt], analytic: &mut dyn FnMut() -> Result<()>| -> Result<()> {
        let x = inputs(s, wrt);
        let a = median_seconds(cfg, &mut *analytic)?;
        let c = median_seconds(cfg, || central_difference(step_map(world, s, wrt), &x, CENTRAL_STEP))?;
        let r = if cfg.skip_ridders { f64::NAN } else { median_seconds(cfg, || ridders(step_map(world, s, wrt), &x, RIDDERS_STEP))? };
        rows.push(BenchmarkRow { scene: scene.to_string(), jacobian: label.to_string(), analytic: a, central: c, ridders: r });
        Ok(())
    };
    time_row("All", all, &mut || step_jacobians(world, &ctx, &opts).map(drop))?;
    for label in BLOCKS {
        time_row(label, block_inputs(label), &mut || analytic_block(world, &ctx, label).map(drop))?;
    }
    Ok(rows)
}

/// Comma-separated table under [`HEADER`].
pub fn to_csv(rows: &[BenchmarkRow]) -> String {
    let mut s = format!("{HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.scene,
            r.jacobian,
            float(r.analytic),
            float(r.central),
            float(r.central_speedup()),
            float(r.ridders),
            float(r.ridders_speedup())
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenes::Scene;

    fn pendulum() -> Scene {
        Scene::load(concat!(env!("CARGO_MANIFEST_DIR"), "/../../corpus/pendulum.scene")).unwrap()
    }

    #[test]
    fn analytic_blocks_match_the_full_jacobians() {
        for name in ["pendulum", "box_on_plane", "bounce_ball"] {
            let scene = Scene::load(format!("{}/../../corpus/{name}.scene", env!("CARGO_MANIFEST_DIR"))).unwrap();
            let ctx = scene.world.step(&scene.initial, None).unwrap();
            let j = step_jacobians(&scene.world, &ctx, &JacobianOptions::default()).unwrap();
            let full: Vec<(&str, &DMatrix<f64>)> = j.blocks();
            for label in BLOCKS {
                let b = analytic_block(&scene.world, &ctx, label).unwrap();
                let f = full.iter().find(|(l, _)| *l == label).unwrap().1;
                assert!((&b - f).amax() < 1e-12, "{name} {label}");
            }
        }
    }

    #[test]
    fn table_has_all_and_five_blocks() {
        let scene = pendulum();
        let cfg = BenchmarkConfig { repetitions: 3, warmup: 1, skip_ridders: false };
        let rows = benchmark_scene("pendulum", &scene.world, &scene.initial, &cfg).unwrap();
        let labels: Vec<&str> = rows.iter().map(|r| r.jacobian.as_str()).collect();
        assert_eq!(labels, ["All", "dq_next/dq", "dqd_next/dq", "dq_next/dqd", "dqd_next/dqd", "dqd_next/dtau"]);
        assert!(rows.iter().all(|r| r.analytic > 0.0 && r.central > 0.0 && r.ridders > 0.0));
        let csv = to_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(HEADER));
        for (line, r) in lines.zip(&rows) {
            let cells: Vec<&str> = line.split(',').collect();
            assert_eq!(cells.len(), 7);
            let speedup: f64 = cells[4].parse().unwrap();
            assert_eq!(speedup, r.central / r.analytic);
        }
    }
}
