use crate::error::{shape_err, ApexError, Result};
use crate::numerics::Tensor;

pub const JACOBI_TOL: f64 = 1e-12;
pub const JACOBI_MAX_SWEEPS: usize = 60;
const MAX_SIDE: usize = 1024;

/// Singular values of `w` in descending order (one-sided Jacobi).
///
/// Columns are orthogonalised pairwise by plane rotations until every pair
/// has `|a_p . a_q| <= tol * |a_p| |a_q|`; the column norms are then the
/// singular values. Columns whose norm is below machine precision times
/// `||W||_F` are treated as zero. Wide inputs are transposed first.
pub fn svd_small(w: &Tensor<f64>) -> Result<Vec<f64>> {
    let (m, n) = w.shape2()?;
    if m.max(n) > MAX_SIDE {
        return Err(shape_err!("svd_small handles sides up to {MAX_SIDE}, got {m}x{n}"));
    }
    let a = if n > m { w.transpose()? } else { w.clone() };
    let (rows, cols) = a.shape2()?;
    // column-major copy so each column is contiguous
    let mut c: Vec<Vec<f64>> = (0..cols).map(|j| (0..rows).map(|i| a.at(i, j)).collect()).collect();
    // columns below this squared norm are numerical zeros and are not rotated
    let floor = (f64::EPSILON * a.sq_norm().sqrt()).powi(2);
    let mut converged = false;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let (alpha, beta, gamma) = c[p].iter().zip(&c[q]).fold((0.0, 0.0, 0.0), |(a, b, g), (x, y)| {
                    (a + x * x, b + y * y, g + x * y)
                });
                if alpha <= floor || beta <= floor || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta: f64 = (beta - alpha) / (2.0 * gamma);
                let t: f64 = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                let (left, right) = c.split_at_mut(q);
                for (x, y) in left[p].iter_mut().zip(right[0].iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = cs * xp - sn * yq;
                    *y = sn * xp + cs * yq;
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(ApexError::Numeric(format!("Jacobi SVD did not converge in {JACOBI_MAX_SWEEPS} sweeps")));
    }
    let mut s: Vec<f64> = c.iter().map(|col| col.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(s)
}
