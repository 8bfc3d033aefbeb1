use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::{Error, Result};

/// Relative tolerance of the dual feasibility test.
const DUAL_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NnlsSolution {
    /// One non-negative weight per atom.
    pub coefficients: Vec<f64>,
    /// `‖target − Σ coefficient·atom‖₂`.
    pub residual_norm: f64,
    pub iterations: usize,
}

/// Non-negative least squares over matrix-valued atoms.
///
/// Every atom is flattened row-major into one column of the design system,
/// and the target likewise. Solved with the Lawson–Hanson active-set method;
/// the outer loop is capped at ten times the atom count.
pub fn nnls_solve(atoms: &[Matrix], target: &Matrix) -> Result<NnlsSolution> {
    let first = atoms.first().ok_or(Error::Empty("nnls_solve atoms"))?;
    for a in atoms {
        if a.shape() != target.shape() {
            return Err(Error::ShapeMismatch {
                op: "nnls_solve",
                left: a.shape(),
                right: target.shape(),
            });
        }
    }
    debug_assert_eq!(first.shape(), target.shape());
    let columns: Vec<&[f64]> = atoms.iter().map(Matrix::as_slice).collect();
    lawson_hanson(&columns, target.as_slice(), 10 * atoms.len())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    libm::sqrt(dot(a, a))
}

fn residual(columns: &[&[f64]], b: &[f64], x: &[f64]) -> Vec<f64> {
    let mut r = b.to_vec();
    for (col, &xj) in columns.iter().zip(x) {
        if xj != 0.0 {
            for (ri, &c) in r.iter_mut().zip(*col) {
                *ri -= xj * c;
            }
        }
    }
    r
}

fn lawson_hanson(columns: &[&[f64]], b: &[f64], max_iter: usize) -> Result<NnlsSolution> {
    let m = columns.len();
    let scale = columns.iter().map(|c| norm(c)).fold(0.0, f64::max) * norm(b);
    let tol = DUAL_TOL * scale;

    let mut x = vec![0.0; m];
    let mut passive = vec![false; m];
    // Indices whose entry into the passive set failed numerically; retried
    // once the iterate moves.
    let mut blocked = vec![false; m];
    let mut iterations = 0;

    loop {
        let r = residual(columns, b, &x);
        let candidate = (0..m)
            .filter(|&j| !passive[j] && !blocked[j])
            .map(|j| (j, dot(columns[j], &r)))
            .filter(|&(_, w)| w > tol)
            .max_by(|a, b| a.1.total_cmp(&b.1));
        let Some((t, _)) = candidate else {
            break;
        };
        if iterations >= max_iter {
            let residual_norm = norm(&r);
            return Err(Error::NnlsNotConverged {
                iterations,
                best: alloc::boxed::Box::new(NnlsSolution {
                    coefficients: x,
                    residual_norm,
                    iterations,
                }),
            });
        }
        iterations += 1;
        passive[t] = true;

        let mut entered = true;
        loop {
            let idx: Vec<usize> = (0..m).filter(|&j| passive[j]).collect();
            let sub: Vec<&[f64]> = idx.iter().map(|&j| columns[j]).collect();
            let z = least_squares(&sub, b);
            let z = match z {
                Some(z) if !(entered && z[idx.iter().position(|&j| j == t).unwrap()] <= 0.0) => z,
                _ if entered => {
                    passive[t] = false;
                    blocked[t] = true;
                    break;
                }
                // Rank loss after a removal: keep the current iterate.
                _ => break,
            };
            entered = false;
            if z.iter().all(|&v| v > 0.0) {
                x.iter_mut().for_each(|v| *v = 0.0);
                for (&j, &v) in idx.iter().zip(&z) {
                    x[j] = v;
                }
                blocked.iter_mut().for_each(|v| *v = false);
                break;
            }
            let mut step = 1.0_f64;
            for (&j, &zj) in idx.iter().zip(&z) {
                if zj <= 0.0 {
                    step = step.min(x[j] / (x[j] - zj));
                }
            }
            for (&j, &zj) in idx.iter().zip(&z) {
                x[j] += step * (zj - x[j]);
            }
            let floor = 1e-14 * x.iter().fold(1.0_f64, |a, &v| a.max(v));
            for &j in &idx {
                if x[j] <= floor {
                    x[j] = 0.0;
                    passive[j] = false;
                }
            }
            if !passive.iter().any(|&p| p) {
                break;
            }
        }
    }

    let residual_norm = norm(&residual(columns, b, &x));
    Ok(NnlsSolution {
        coefficients: x,
        residual_norm,
        iterations,
    })
}

/// Unconstrained least squares `min ‖Σ z_j·col_j − b‖` via Householder QR.
/// Returns `None` when the columns are numerically rank deficient.
fn least_squares(columns: &[&[f64]], b: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    let p = columns.len();
    if p > n {
        return None;
    }
    let mut a: Vec<Vec<f64>> = columns.iter().map(|c| c.to_vec()).collect();
    let mut rhs = b.to_vec();
    let col_scale = columns.iter().map(|c| norm(c)).fold(0.0, f64::max);

    for k in 0..p {
        let alpha = norm(&a[k][k..]);
        if alpha <= 1e-12 * col_scale || alpha == 0.0 {
            return None;
        }
        let sign = if a[k][k] >= 0.0 { 1.0 } else { -1.0 };
        let mut v = a[k][k..].to_vec();
        v[0] += sign * alpha;
        let vnorm2 = dot(&v, &v);
        for col in a.iter_mut().skip(k) {
            let s = 2.0 * dot(&v, &col[k..]) / vnorm2;
            for (ci, vi) in col[k..].iter_mut().zip(&v) {
                *ci -= s * vi;
            }
        }
        let s = 2.0 * dot(&v, &rhs[k..]) / vnorm2;
        for (ri, vi) in rhs[k..].iter_mut().zip(&v) {
            *ri -= s * vi;
        }
    }

    let mut z = vec![0.0; p];
    for k in (0..p).rev() {
        let mut acc = rhs[k];
        for j in k + 1..p {
            acc -= a[j][k] * z[j];
        }
        z[k] = acc / a[k][k];
    }
    z.iter().all(|v| v.is_finite()).then_some(z)
}
