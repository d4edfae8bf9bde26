//! Small dense helpers shared by the solver and gradient code.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

/// Relative singular-value cutoff used by every pseudo-inverse in the crate.
pub const PINV_CUTOFF: f64 = 1e-10;

#[inline]
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Moore-Penrose pseudo-inverse with singular values below
/// `PINV_CUTOFF * sigma_max` treated as zero. Returns the inverse and the
/// numerical rank.
pub fn pinv(a: &DMatrix<f64>) -> (DMatrix<f64>, usize) {
    let (r, c) = a.shape();
    if r == 0 || c == 0 {
        return (DMatrix::zeros(c, r), 0);
    }
    let svd = a.clone().svd(true, true);
    let u = svd.u.as_ref().expect("svd u");
    let vt = svd.v_t.as_ref().expect("svd v_t");
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let tol = PINV_CUTOFF * smax;
    let mut out = DMatrix::zeros(c, r);
    let mut rank = 0;
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > tol && s > 0.0 {
            rank += 1;
            let vk = vt.row(k).transpose();
            let uk = u.column(k);
            out += (vk / s) * uk.transpose();
        }
    }
    (out, rank)
}

/// Solves `a x = b` for square `a`, preferring LU and falling back to the
/// pseudo-inverse when `a` is singular.
pub fn solve_or_pinv(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    if a.nrows() == a.ncols() {
        if let Some(x) = a.clone().lu().solve(b) {
            if x.iter().all(|v| v.is_finite()) {
                return x;
            }
        }
    }
    pinv(a).0 * b
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

pub fn max_abs_vec(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

/// Picks the rows listed in `idx`.
pub fn select_rows(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), m.ncols(), |i, j| m[(idx[i], j)])
}

pub fn select_entries(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_fn(idx.len(), |i, _| v[idx[i]])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pinv_of_rank_one_block() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let (p, rank) = pinv(&a);
        assert_eq!(rank, 1);
        let expect = DMatrix::from_element(2, 2, 0.25);
        assert!((p - expect).abs().max() < 1e-14);
    }

    #[test]
    fn pinv_inverts_full_rank() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 1.0, 0.0, 1.0, 2.0]);
        let (p, rank) = pinv(&a);
        assert_eq!(rank, 3);
        let id = &a * &p;
        assert!((id - DMatrix::identity(3, 3)).abs().max() < 1e-12);
    }

    #[test]
    fn skew_matches_cross() {
        let a = Vector3::new(0.3, -1.2, 2.0);
        let b = Vector3::new(-0.7, 0.1, 0.5);
        assert!((skew(&a) * b - a.cross(&b)).norm() < 1e-15);
    }
}
