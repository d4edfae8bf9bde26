//! The boxed contact LCP: assembly, a pivoting solver, a brute-force
//! enumeration solver, index classification and stabilization.
//!
//! Rows satisfy `v = A f + b`. Normal rows require `f >= 0`, `v >= 0`,
//! `f v = 0`. A friction row linked to normal row `k` with coefficient `mu`
//! requires `|f| <= mu f_k`, with `v = 0` strictly inside the box, `v <= 0`
//! at the upper bound and `v >= 0` at the lower bound.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{max_abs, max_abs_vec, pinv};

/// Base classification tolerance, scaled by the problem magnitude.
pub const CLASS_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RowKind {
    Normal,
    Friction { normal: usize, mu: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RowClass {
    /// Strictly inside its bounds with zero velocity.
    Clamping,
    /// Zero impulse (normal rows with positive velocity, or friction rows
    /// whose normal carries no load).
    Separating,
    /// Impulse and velocity both zero at a bound: both readings are valid.
    Tied,
    /// Friction at `+mu f_n`.
    BoundUpper,
    /// Friction at `-mu f_n`.
    BoundLower,
}

impl RowClass {
    pub fn code(&self) -> &'static str {
        match self {
            RowClass::Clamping => "C",
            RowClass::Separating => "S",
            RowClass::Tied => "T",
            RowClass::BoundUpper => "B+",
            RowClass::BoundLower => "B-",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LcpProblem {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub rows: Vec<RowKind>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LcpSolution {
    pub f: DVector<f64>,
    pub v: DVector<f64>,
    pub classes: Vec<RowClass>,
    /// True when the warm-start hint was accepted without pivoting.
    pub warm_started: bool,
}

/// Index sets and bound linkage for a classification.
#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    pub clamped: Vec<usize>,
    pub bounded: Vec<usize>,
    pub separating: Vec<usize>,
    /// `|B| x |C|`; row `k` holds `+-mu` in the column of the normal row
    /// linked to `bounded[k]`.
    pub e: DMatrix<f64>,
}

impl LcpProblem {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>, rows: Vec<RowKind>) -> Result<Self> {
        let m = b.len();
        if a.nrows() != m || a.ncols() != m || rows.len() != m {
            return Err(Error::DimensionMismatch(format!(
                "LCP with A {}x{}, b {}, {} row kinds",
                a.nrows(),
                a.ncols(),
                m,
                rows.len()
            )));
        }
        for (i, r) in rows.iter().enumerate() {
            if let RowKind::Friction { normal, mu } = r {
                if *normal >= m || rows[*normal] != RowKind::Normal || !(*mu >= 0.0) {
                    return Err(Error::DimensionMismatch(format!("friction row {i} has an invalid normal link")));
                }
            }
        }
        Ok(Self { a, b, rows })
    }

    /// `A = J M^-1 J^T`, `b = J (qd + dt M^-1 (tau - c))`.
    pub fn assemble(
        minv: &DMatrix<f64>,
        j: &DMatrix<f64>,
        qd: &DVector<f64>,
        tau: &DVector<f64>,
        c: &DVector<f64>,
        dt: f64,
        rows: Vec<RowKind>,
    ) -> Result<Self> {
        let n = minv.nrows();
        if minv.ncols() != n || j.ncols() != n || qd.len() != n || tau.len() != n || c.len() != n {
            return Err(Error::DimensionMismatch("LCP assembly inputs disagree on dof count".into()));
        }
        let mj = minv * j.transpose();
        let a = j * &mj;
        let a = (&a + a.transpose()) * 0.5;
        let free = qd + minv * (tau - c) * dt;
        let b = j * free;
        let p = Self::new(a, b, rows)?;
        p.check_psd()?;
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.b.is_empty()
    }

    pub fn check_psd(&self) -> Result<()> {
        let scale = max_abs(&self.a).max(1.0);
        if (&self.a - self.a.transpose()).amax() > 1e-10 * scale {
            return Err(Error::DimensionMismatch("LCP matrix is not symmetric".into()));
        }
        if !self.is_empty() {
            let eig = self.a.clone().symmetric_eigenvalues();
            if eig.min() < -1e-10 * scale {
                return Err(Error::DimensionMismatch("LCP matrix is not positive semidefinite".into()));
            }
        }
        Ok(())
    }

    pub fn velocity(&self, f: &DVector<f64>) -> DVector<f64> {
        &self.a * f + &self.b
    }

    fn bound(&self, i: usize, f: &DVector<f64>) -> f64 {
        match self.rows[i] {
            RowKind::Normal => f64::INFINITY,
            RowKind::Friction { normal, mu } => mu * f[normal],
        }
    }

    /// Absolute tolerance for classification and verification.
    pub fn tolerance(&self, f: &DVector<f64>) -> f64 {
        CLASS_TOL * 1f64.max(max_abs_vec(&self.b)).max(max_abs(&self.a) * max_abs_vec(f))
    }

    fn inert(&self, i: usize, eps: f64) -> bool {
        self.a.row(i).amax() <= 1e-12 * max_abs(&self.a).max(1e-300) && self.b[i].abs() <= eps
    }

    /// Classifies every row of a candidate solution.
    pub fn classify(&self, f: &DVector<f64>) -> Vec<RowClass> {
        let v = self.velocity(f);
        let eps = self.tolerance(f);
        let mut out = vec![RowClass::Separating; self.len()];
        for i in 0..self.len() {
            if self.inert(i, eps) {
                continue;
            }
            out[i] = match self.rows[i] {
                RowKind::Normal => {
                    if f[i] > eps {
                        RowClass::Clamping
                    } else if v[i] > eps {
                        RowClass::Separating
                    } else {
                        RowClass::Tied
                    }
                }
                RowKind::Friction { normal, .. } => {
                    let hi = self.bound(i, f);
                    if f[normal] <= eps || hi <= eps {
                        RowClass::Separating
                    } else if f[i] >= hi - eps {
                        if v[i] < -eps { RowClass::BoundUpper } else { RowClass::Tied }
                    } else if f[i] <= -hi + eps {
                        if v[i] > eps { RowClass::BoundLower } else { RowClass::Tied }
                    } else {
                        RowClass::Clamping
                    }
                }
            };
        }
        out
    }

    /// Checks every LCP condition to the scaled tolerance.
    pub fn verify(&self, f: &DVector<f64>) -> std::result::Result<(), String> {
        if f.len() != self.len() || f.iter().any(|x| !x.is_finite()) {
            return Err("impulse vector has the wrong length or is not finite".into());
        }
        let v = self.velocity(f);
        let eps = self.tolerance(f);
        for i in 0..self.len() {
            match self.rows[i] {
                RowKind::Normal => {
                    if f[i] < -eps {
                        return Err(format!("row {i}: negative normal impulse {:e}", f[i]));
                    }
                    if v[i] < -eps {
                        return Err(format!("row {i}: penetrating velocity {:e}", v[i]));
                    }
                    if (f[i] * v[i]).abs() > eps * (1.0 + f[i].abs() + v[i].abs()) {
                        return Err(format!("row {i}: complementarity violated ({:e} * {:e})", f[i], v[i]));
                    }
                }
                RowKind::Friction { .. } => {
                    let hi = self.bound(i, f);
                    if f[i].abs() > hi + eps {
                        return Err(format!("row {i}: friction {:e} outside bound {:e}", f[i], hi));
                    }
                    if f[i] >= hi - eps && hi > eps {
                        if v[i] > eps {
                            return Err(format!("row {i}: upper-bound friction with velocity {:e}", v[i]));
                        }
                    } else if f[i] <= -hi + eps && hi > eps {
                        if v[i] < -eps {
                            return Err(format!("row {i}: lower-bound friction with velocity {:e}", v[i]));
                        }
                    } else if v[i].abs() > eps && hi > eps {
                        return Err(format!("row {i}: interior friction with velocity {:e}", v[i]));
                    }
                }
            }
        }
        Ok(())
    }

    /// Clamped, bounded and separating sets for a classification, with tied
    /// rows placed as `tied_as` dictates.
    pub fn partition(&self, classes: &[RowClass], tied_clamped: bool, f_hint: Option<&DVector<f64>>) -> Partition {
        let m = self.len();
        let mut class = classes.to_vec();
        for i in 0..m {
            if class[i] == RowClass::Tied {
                class[i] = if tied_clamped {
                    RowClass::Clamping
                } else {
                    match (self.rows[i], f_hint) {
                        (RowKind::Friction { .. }, Some(f)) if f[i] > 0.0 => RowClass::BoundUpper,
                        (RowKind::Friction { .. }, Some(f)) if f[i] < 0.0 => RowClass::BoundLower,
                        _ => RowClass::Separating,
                    }
                };
            }
        }
        // friction rows whose normal carries no impulse cannot be clamped or bounded
        for i in 0..m {
            if let RowKind::Friction { normal, .. } = self.rows[i] {
                if class[normal] != RowClass::Clamping {
                    class[i] = RowClass::Separating;
                }
            }
        }
        let clamped: Vec<usize> = (0..m).filter(|&i| class[i] == RowClass::Clamping).collect();
        let bounded: Vec<usize> =
            (0..m).filter(|&i| matches!(class[i], RowClass::BoundUpper | RowClass::BoundLower)).collect();
        let separating: Vec<usize> = (0..m).filter(|&i| class[i] == RowClass::Separating).collect();
        let mut e = DMatrix::zeros(bounded.len(), clamped.len());
        for (k, &i) in bounded.iter().enumerate() {
            if let RowKind::Friction { normal, mu } = self.rows[i] {
                let col = clamped.iter().position(|&c| c == normal).expect("linked normal is clamped");
                e[(k, col)] = if class[i] == RowClass::BoundUpper { mu } else { -mu };
            }
        }
        Partition { clamped, bounded, separating, e }
    }

    /// `A_CC + A_CB E`.
    pub fn effective_matrix(&self, p: &Partition) -> DMatrix<f64> {
        let acc = DMatrix::from_fn(p.clamped.len(), p.clamped.len(), |r, c| self.a[(p.clamped[r], p.clamped[c])]);
        let acb = DMatrix::from_fn(p.clamped.len(), p.bounded.len(), |r, c| self.a[(p.clamped[r], p.bounded[c])]);
        acc + acb * &p.e
    }

    /// Impulses implied by a partition: `f_C = -pinv(A_eff) b_C`,
    /// `f_B = E f_C`, `f_S = 0`.
    pub fn impulses_for(&self, p: &Partition) -> DVector<f64> {
        let mut f = DVector::zeros(self.len());
        if p.clamped.is_empty() {
            return f;
        }
        let aeff = self.effective_matrix(p);
        let bc = DVector::from_fn(p.clamped.len(), |r, _| self.b[p.clamped[r]]);
        let fc = -(pinv(&aeff).0 * bc);
        for (k, &i) in p.clamped.iter().enumerate() {
            f[i] = fc[k];
        }
        let fb = &p.e * fc;
        for (k, &i) in p.bounded.iter().enumerate() {
            f[i] = fb[k];
        }
        f
    }

    /// Least-squares-minimal exact solution for a classification. Tied rows
    /// are first treated as clamping, then as their bound.
    pub fn stabilize(&self, classes: &[RowClass]) -> Result<LcpSolution> {
        if classes.len() != self.len() {
            return Err(Error::DimensionMismatch(format!(
                "classification has {} rows, problem has {}",
                classes.len(),
                self.len()
            )));
        }
        let has_tied = classes.contains(&RowClass::Tied);
        let mut last_err = String::new();
        for tied_clamped in [true, false] {
            if !tied_clamped && !has_tied {
                break;
            }
            // bound signs for tied friction rows come from the first attempt
            let hint = if tied_clamped { None } else { Some(self.impulses_for(&self.partition(classes, true, None))) };
            let p = self.partition(classes, tied_clamped, hint.as_ref());
            let mut f = self.impulses_for(&p);
            if tied_clamped && self.verify(&f).is_err() {
                // friction rows of newly clamped normals start out separating
                let v = self.velocity(&f);
                let eps = self.tolerance(&f);
                let mut adjusted = classes.to_vec();
                let mut changed = false;
                for i in 0..self.len() {
                    if let RowKind::Friction { normal, .. } = self.rows[i] {
                        if classes[normal] == RowClass::Tied && classes[i] == RowClass::Separating {
                            adjusted[i] = if v[i] < -eps {
                                RowClass::BoundUpper
                            } else if v[i] > eps {
                                RowClass::BoundLower
                            } else {
                                RowClass::Clamping
                            };
                            changed = true;
                        }
                    }
                }
                if changed {
                    f = self.impulses_for(&self.partition(&adjusted, true, None));
                }
            }
            match self.verify(&f) {
                Ok(()) => {
                    let v = self.velocity(&f);
                    let classes = self.classify(&f);
                    return Ok(LcpSolution { f, v, classes, warm_started: false });
                }
                Err(e) => last_err = e,
            }
        }
        Err(Error::StaleClassification(last_err))
    }

    /// Pivoting solve followed by stabilization. A warm-start classification
    /// that stabilizes to a valid solution is returned without pivoting.
    pub fn solve(&self, warm: Option<&[RowClass]>) -> Result<LcpSolution> {
        if self.is_empty() {
            return Ok(LcpSolution {
                f: DVector::zeros(0),
                v: DVector::zeros(0),
                classes: vec![],
                warm_started: warm.is_some(),
            });
        }
        if let Some(w) = warm {
            if w.len() == self.len() {
                if let Ok(mut s) = self.stabilize(w) {
                    s.warm_started = true;
                    return Ok(s);
                }
            }
        }
        let raw = self.solve_pivoting()?;
        let classes = self.classify(&raw);
        match self.stabilize(&classes) {
            Ok(s) => Ok(s),
            Err(_) => {
                // the raw pivot solution is valid to tolerance; keep it
                self.verify(&raw).map_err(Error::StaleClassification)?;
                let v = self.velocity(&raw);
                Ok(LcpSolution { f: raw, v, classes, warm_started: false })
            }
        }
    }

    /// Lemke's method on the standard-form reformulation of the boxed
    /// problem: friction rows split into nonnegative `beta+` and `beta-` plus
    /// a bound multiplier `lambda`.
    pub fn solve_pivoting(&self) -> Result<DVector<f64>> {
        let normals: Vec<usize> = (0..self.len()).filter(|&i| self.rows[i] == RowKind::Normal).collect();
        let frictions: Vec<usize> = (0..self.len()).filter(|&i| self.rows[i] != RowKind::Normal).collect();
        let (nn, nf) = (normals.len(), frictions.len());
        let size = nn + 3 * nf;
        let mut m = DMatrix::zeros(size, size);
        let mut q = DVector::zeros(size);
        let a = &self.a;
        for (r, &i) in normals.iter().enumerate() {
            q[r] = self.b[i];
            for (c, &j) in normals.iter().enumerate() {
                m[(r, c)] = a[(i, j)];
            }
            for (c, &j) in frictions.iter().enumerate() {
                m[(r, nn + c)] = a[(i, j)];
                m[(r, nn + nf + c)] = -a[(i, j)];
            }
        }
        for (r, &i) in frictions.iter().enumerate() {
            let (rp, rm, rl) = (nn + r, nn + nf + r, nn + 2 * nf + r);
            q[rp] = self.b[i];
            q[rm] = -self.b[i];
            for (c, &j) in normals.iter().enumerate() {
                m[(rp, c)] = a[(i, j)];
                m[(rm, c)] = -a[(i, j)];
            }
            for (c, &j) in frictions.iter().enumerate() {
                m[(rp, nn + c)] = a[(i, j)];
                m[(rp, nn + nf + c)] = -a[(i, j)];
                m[(rm, nn + c)] = -a[(i, j)];
                m[(rm, nn + nf + c)] = a[(i, j)];
            }
            m[(rp, nn + 2 * nf + r)] = 1.0;
            m[(rm, nn + 2 * nf + r)] = 1.0;
            if let RowKind::Friction { normal, mu } = self.rows[i] {
                let c = normals.iter().position(|&k| k == normal).expect("normal row");
                m[(rl, c)] = mu;
            }
            m[(rl, nn + r)] = -1.0;
            m[(rl, nn + nf + r)] = -1.0;
        }
        let z = lemke(&m, &q, 50 * size.max(10))?;
        let mut f = DVector::zeros(self.len());
        for (r, &i) in normals.iter().enumerate() {
            f[i] = z[r];
        }
        for (r, &i) in frictions.iter().enumerate() {
            f[i] = z[nn + r] - z[nn + nf + r];
        }
        Ok(f)
    }

    /// Every feasible classification found by exhaustive enumeration, with
    /// its impulses. Normal rows range over {C, S}; friction rows over
    /// {C, B+, B-} (always S when their normal is S).
    pub fn enumerate_feasible(&self) -> Vec<(Vec<RowClass>, DVector<f64>)> {
        let m = self.len();
        let mut out = Vec::new();
        let mut classes = vec![RowClass::Separating; m];
        self.enumerate_rec(0, &mut classes, &mut out);
        let _ = m;
        out
    }

    fn enumerate_rec(&self, i: usize, classes: &mut Vec<RowClass>, out: &mut Vec<(Vec<RowClass>, DVector<f64>)>) {
        if i == self.len() {
            let p = self.partition(classes, true, None);
            // solve the equality system of the candidate directly
            let f = self.impulses_for(&p);
            if self.candidate_consistent(&p, classes, &f) && self.verify(&f).is_ok() {
                out.push((classes.clone(), f));
            }
            return;
        }
        let options: &[RowClass] = match self.rows[i] {
            RowKind::Normal => &[RowClass::Clamping, RowClass::Separating],
            RowKind::Friction { normal, .. } => {
                if classes[normal] == RowClass::Separating {
                    &[RowClass::Separating]
                } else {
                    &[RowClass::Clamping, RowClass::BoundUpper, RowClass::BoundLower]
                }
            }
        };
        for &c in options {
            classes[i] = c;
            self.enumerate_rec(i + 1, classes, out);
        }
        classes[i] = RowClass::Separating;
    }

    /// The least-squares solution must actually satisfy the clamped equations.
    fn candidate_consistent(&self, p: &Partition, _classes: &[RowClass], f: &DVector<f64>) -> bool {
        let v = self.velocity(f);
        let eps = self.tolerance(f);
        p.clamped.iter().all(|&i| v[i].abs() <= eps)
    }

    /// Brute-force solve: the least-norm impulse among all feasible
    /// classifications.
    pub fn solve_enumerate(&self) -> Result<LcpSolution> {
        if self.len() > 12 {
            return Err(Error::DimensionMismatch(format!("enumeration limited to 12 rows, got {}", self.len())));
        }
        let best = self
            .enumerate_feasible()
            .into_iter()
            .min_by(|a, b| a.1.norm().total_cmp(&b.1.norm()))
            .ok_or(Error::Infeasible)?;
        let f = best.1;
        let v = self.velocity(&f);
        let classes = self.classify(&f);
        Ok(LcpSolution { f, v, classes, warm_started: false })
    }

    /// Text dump of the problem and an optional solution for failure triage.
    pub fn dump(&self, solution: Option<&LcpSolution>) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# lcp rows={}", self.len());
        let a = crate::format::matrix_block("A", &self.a);
        s.push_str(&a);
        let b = DMatrix::from_column_slice(self.len(), 1, self.b.as_slice());
        s.push_str(&crate::format::matrix_block("b", &b));
        let _ = writeln!(s, "[bounds]");
        for (i, r) in self.rows.iter().enumerate() {
            match r {
                RowKind::Normal => {
                    let _ = writeln!(s, "{i},normal,0,inf");
                }
                RowKind::Friction { normal, mu } => {
                    let _ = writeln!(s, "{i},friction,{},{}", normal, crate::format::float(*mu));
                }
            }
        }
        if let Some(sol) = solution {
            let f = DMatrix::from_column_slice(self.len(), 1, sol.f.as_slice());
            s.push_str(&crate::format::matrix_block("f", &f));
            let v = DMatrix::from_column_slice(self.len(), 1, sol.v.as_slice());
            s.push_str(&crate::format::matrix_block("v", &v));
            let _ = writeln!(s, "[classification]");
            let codes: Vec<&str> = sol.classes.iter().map(|c| c.code()).collect();
            let _ = writeln!(s, "{}", codes.join(","));
        }
        s
    }
}

/// Lemke's complementary pivoting with lexicographic ratio tests:
/// finds `z >= 0` with `w = M z + q >= 0` and `w . z = 0`.
pub fn lemke(m: &DMatrix<f64>, q: &DVector<f64>, max_pivots: usize) -> Result<DVector<f64>> {
    let n = q.len();
    if q.iter().all(|&x| x >= 0.0) {
        return Ok(DVector::zeros(n));
    }
    // tableau columns: w (n), z (n), z0, rhs
    let cols = 2 * n + 2;
    let z0 = 2 * n;
    let rhs = 2 * n + 1;
    let mut t = DMatrix::zeros(n, cols);
    for i in 0..n {
        t[(i, i)] = 1.0;
        for j in 0..n {
            t[(i, n + j)] = -m[(i, j)];
        }
        t[(i, z0)] = -1.0;
        t[(i, rhs)] = q[i];
    }
    let mut basis: Vec<usize> = (0..n).collect();
    let scale = max_abs(m).max(max_abs_vec(q)).max(1.0);
    let piv_tol = 1e-13 * scale;

    let pivot = |t: &mut DMatrix<f64>, r: usize, c: usize| {
        let p = t[(r, c)];
        for k in 0..cols {
            t[(r, k)] /= p;
        }
        for i in 0..n {
            if i != r {
                let factor = t[(i, c)];
                if factor != 0.0 {
                    for k in 0..cols {
                        let d = factor * t[(r, k)];
                        t[(i, k)] -= d;
                    }
                }
            }
        }
    };

    // z0 enters at the most negative q (lexicographic tie-break)
    let mut r = 0;
    for i in 1..n {
        let better = if q[i] < q[r] {
            true
        } else if q[i] == q[r] {
            lex_less(&t, i, r, n, -1.0, -1.0)
        } else {
            false
        };
        if better {
            r = i;
        }
    }
    pivot(&mut t, r, z0);
    let mut leaving = basis[r];
    basis[r] = z0;

    for _ in 0..max_pivots {
        let entering = if leaving < n { leaving + n } else { leaving - n };
        // lexicographic minimum ratio test
        let mut best: Option<usize> = None;
        for i in 0..n {
            let a = t[(i, entering)];
            if a <= piv_tol {
                continue;
            }
            best = Some(match best {
                None => i,
                Some(b) => {
                    let (ri, rb) = (t[(i, rhs)] / a, t[(b, rhs)] / t[(b, entering)]);
                    let tol = 1e-12 * (1.0 + ri.abs().max(rb.abs()));
                    if ri < rb - tol {
                        i
                    } else if ri > rb + tol {
                        b
                    } else if basis[i] == z0 {
                        i
                    } else if basis[b] == z0 {
                        b
                    } else if lex_less(&t, i, b, n, a, t[(b, entering)]) {
                        i
                    } else {
                        b
                    }
                }
            });
        }
        let Some(r) = best else {
            return Err(Error::NoConvergence { pivots: max_pivots });
        };
        pivot(&mut t, r, entering);
        leaving = basis[r];
        basis[r] = entering;
        if leaving == z0 {
            let mut z = DVector::zeros(n);
            for (i, &var) in basis.iter().enumerate() {
                if var >= n && var < 2 * n {
                    z[var - n] = t[(i, rhs)].max(0.0);
                }
            }
            return Ok(z);
        }
    }
    Err(Error::NoConvergence { pivots: max_pivots })
}

/// Lexicographic comparison of rows `i` and `j` of the basis inverse (the
/// first `n` tableau columns), each scaled by its pivot-column entry.
fn lex_less(t: &DMatrix<f64>, i: usize, j: usize, n: usize, ai: f64, aj: f64) -> bool {
    for k in 0..n {
        let (x, y) = (t[(i, k)] / ai, t[(j, k)] / aj);
        if (x - y).abs() > 1e-14 * (1.0 + x.abs().max(y.abs())) {
            return x < y;
        }
    }
    i < j
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn normal_only(a: &[f64], b: &[f64]) -> LcpProblem {
        let m = b.len();
        LcpProblem::new(DMatrix::from_row_slice(m, m, a), DVector::from_row_slice(b), vec![RowKind::Normal; m]).unwrap()
    }

    #[test]
    fn single_row_examples() {
        let p = normal_only(&[1.0], &[-1.0]);
        for s in [p.solve(None).unwrap(), p.solve_enumerate().unwrap()] {
            assert_eq!(s.f[0], 1.0);
            assert_eq!(s.v[0], 0.0);
            assert_eq!(s.classes, vec![RowClass::Clamping]);
        }
        let p = normal_only(&[1.0], &[1.0]);
        let s = p.solve(None).unwrap();
        assert_eq!((s.f[0], s.v[0], s.classes[0]), (0.0, 1.0, RowClass::Separating));
    }

    #[test]
    fn rank_deficient_box_splits_evenly() {
        let g = 9.81;
        let p = normal_only(&[1.0, 1.0, 1.0, 1.0], &[-g, -g]);
        let s = p.solve(None).unwrap();
        assert!((s.f[0] - g / 2.0).abs() < 1e-12 && (s.f[1] - g / 2.0).abs() < 1e-12);
        let again = p.stabilize(&s.classes).unwrap();
        assert_eq!(again.f, p.stabilize(&again.classes).unwrap().f);
        let e = p.solve_enumerate().unwrap();
        assert!((e.f - s.f).amax() < 1e-12);
    }

    #[test]
    fn point_mass_assembly() {
        let (dt, g) = (0.01, 9.81);
        let p = LcpProblem::assemble(
            &DMatrix::identity(1, 1),
            &DMatrix::from_element(1, 1, 1.0),
            &DVector::from_element(1, -1.0),
            &DVector::zeros(1),
            &DVector::from_element(1, g),
            dt,
            vec![RowKind::Normal],
        )
        .unwrap();
        assert_eq!(p.a[(0, 0)], 1.0);
        assert_eq!(p.b[0], -1.0 - dt * g);
        let zero = LcpProblem::assemble(
            &DMatrix::identity(2, 2),
            &DMatrix::zeros(1, 2),
            &DVector::from_element(2, 1.0),
            &DVector::zeros(2),
            &DVector::zeros(2),
            dt,
            vec![RowKind::Normal],
        )
        .unwrap();
        assert_eq!((zero.a[(0, 0)], zero.b[0]), (0.0, 0.0));
    }

    #[test]
    fn sliding_block_saturates_friction() {
        // unit mass pushed sideways at speed 1, pressed down with impulse 0.1
        let a = DMatrix::identity(2, 2);
        let b = DVector::from_vec(vec![-0.1, 1.0]);
        let p = LcpProblem::new(a, b, vec![RowKind::Normal, RowKind::Friction { normal: 0, mu: 0.3 }]).unwrap();
        let s = p.solve(None).unwrap();
        assert_eq!(s.classes, vec![RowClass::Clamping, RowClass::BoundLower]);
        assert!((s.f[1] + 0.3 * s.f[0]).abs() < 1e-12);
        assert!((s.f[0] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn stabilize_is_linear_in_b_within_a_class() {
        let p = normal_only(&[2.0, 0.5, 0.5, 1.0], &[-1.0, -0.7]);
        let s = p.solve(None).unwrap();
        let mut p2 = p.clone();
        let db = DVector::from_vec(vec![1e-3, -2e-3]);
        p2.b += &db;
        let s2 = p2.stabilize(&s.classes).unwrap();
        let expect = &s.f - p.a.clone().try_inverse().unwrap() * db;
        assert!((s2.f - expect).amax() < 1e-14);
    }

    #[test]
    fn stale_classification_is_reported() {
        let p = normal_only(&[1.0], &[1.0]);
        assert!(matches!(p.stabilize(&[RowClass::Clamping]), Err(Error::StaleClassification(_))));
    }

    #[test]
    fn infeasible_enumeration() {
        // a friction-free row that can only be satisfied with negative impulse
        let p = LcpProblem::new(DMatrix::zeros(1, 1), DVector::from_element(1, -1.0), vec![RowKind::Normal]).unwrap();
        assert_eq!(p.solve_enumerate(), Err(Error::Infeasible));
    }

    #[test]
    fn pivoting_agrees_with_enumeration_on_random_problems() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let p = random_problem(&mut rng, 6);
            let d = p.solve(None).unwrap();
            p.verify(&d.f).unwrap();
            let all = p.enumerate_feasible();
            assert!(all.iter().any(|(_, f)| (f - &d.f).amax() < 1e-8), "{}", p.dump(Some(&d)));
        }
    }

    #[test]
    fn warm_start_reuses_classification() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_problem(&mut rng, 5);
        let cold = p.solve(None).unwrap();
        let warm = p.solve(Some(&cold.classes)).unwrap();
        assert!(warm.warm_started);
        assert!((warm.f - cold.f).amax() < 1e-12);
    }

    #[test]
    fn dump_lists_every_section() {
        let p = normal_only(&[1.0], &[-1.0]);
        let s = p.solve(None).unwrap();
        let d = p.dump(Some(&s));
        for key in ["[A]", "[b]", "[bounds]", "[f]", "[v]", "[classification]"] {
            assert!(d.contains(key), "{key}");
        }
    }

    pub(crate) fn random_problem(rng: &mut ChaCha8Rng, max_rows: usize) -> LcpProblem {
        let contacts = rng.gen_range(1..=(max_rows / 3).max(1) + 1);
        let mut rows = Vec::new();
        for _ in 0..contacts {
            if rows.len() >= max_rows {
                break;
            }
            let k = rows.len();
            rows.push(RowKind::Normal);
            let mu: f64 = rng.gen_range(0.1..0.8);
            for _ in 0..rng.gen_range(0..=2) {
                if rows.len() < max_rows {
                    rows.push(RowKind::Friction { normal: k, mu });
                }
            }
        }
        let m = rows.len();
        let l = DMatrix::from_fn(m, m, |_, _| rng.gen_range(-1.0..1.0));
        let a = &l * l.transpose() + DMatrix::identity(m, m) * 0.1;
        let b = DVector::from_fn(m, |_, _| rng.gen_range(-1.0..1.0));
        LcpProblem::new(a, b, rows).unwrap()
    }
}
