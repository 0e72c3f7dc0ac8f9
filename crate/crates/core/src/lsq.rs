//! Least squares with nonnegativity on a subset of the unknowns:
//!
//! ```text
//!     minimize ‖A x − b‖₂   subject to   x_i ≥ 0  for i with nonneg[i]
//! ```
//!
//! Lawson–Hanson active-set iteration in which the unconstrained unknowns
//! never leave the passive set. Subproblems are solved by Householder QR on
//! column-scaled submatrices.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LsqError {
    #[error("dimension mismatch: A is {rows}x{cols}, b has {b}, mask has {mask}")]
    Dimension { rows: usize, cols: usize, b: usize, mask: usize },
    #[error("no convergence after {0} iterations")]
    MaxIterations(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LsqSolution {
    pub x: Vec<f64>,
    pub residual_norm: f64,
    /// The final passive-set submatrix was numerically rank deficient, so
    /// the minimizer is not unique; `x` is then a minimum-norm choice.
    pub rank_deficient: bool,
    pub iterations: usize,
}

/// Relative pivot size below which a column is treated as dependent.
const RANK_TOL: f64 = 1e-11;

struct SubSolve {
    z: Vec<f64>,
    rank_deficient: bool,
}

fn solve_subset(a: &DMatrix<f64>, b: &DVector<f64>, cols: &[usize]) -> SubSolve {
    let m = a.nrows();
    let k = cols.len();
    if k == 0 {
        return SubSolve { z: Vec::new(), rank_deficient: false };
    }
    let mut sub = DMatrix::<f64>::zeros(m, k);
    let mut scale = alloc::vec![1.0; k];
    for (j, &c) in cols.iter().enumerate() {
        let col = a.column(c);
        let norm = col.norm();
        scale[j] = if norm > 0.0 { norm } else { 1.0 };
        sub.set_column(j, &(col / scale[j]));
    }
    let rank_deficient;
    let y = if m >= k {
        let qr = sub.clone().qr();
        let r = qr.r();
        let rmax = (0..k).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
        rank_deficient = (0..k).any(|i| r[(i, i)].abs() <= RANK_TOL * rmax.max(f64::MIN_POSITIVE));
        if rank_deficient {
            None
        } else {
            let mut qtb = b.clone();
            qr.q_tr_mul(&mut qtb);
            r.solve_upper_triangular(&qtb.rows(0, k).into_owned())
        }
    } else {
        rank_deficient = true;
        None
    };
    let y = y.unwrap_or_else(|| {
        let svd = sub.svd(true, true);
        let smax = svd.singular_values.max();
        svd.solve(b, RANK_TOL * smax).unwrap_or_else(|_| DVector::zeros(k))
    });
    SubSolve { z: y.iter().zip(&scale).map(|(v, s)| v / s).collect(), rank_deficient }
}

fn residual(a: &DMatrix<f64>, b: &DVector<f64>, x: &[f64]) -> DVector<f64> {
    a * DVector::from_column_slice(x) - b
}

pub fn bounded_least_squares(a: &DMatrix<f64>, b: &DVector<f64>, nonneg: &[bool]) -> Result<LsqSolution, LsqError> {
    let (m, n) = a.shape();
    if b.len() != m || nonneg.len() != n {
        return Err(LsqError::Dimension { rows: m, cols: n, b: b.len(), mask: nonneg.len() });
    }
    let max_iter = 3 * n + 10;
    let mut x = alloc::vec![0.0; n];
    let mut passive: Vec<bool> = nonneg.iter().map(|&c| !c).collect();
    let mut rank_deficient;
    let mut iterations = 0;

    loop {
        // Inner loop: solve on the passive set, backtracking into the
        // feasible region whenever a constrained unknown goes non-positive.
        loop {
            iterations += 1;
            if iterations > max_iter {
                return Err(LsqError::MaxIterations(max_iter));
            }
            let cols: Vec<usize> = (0..n).filter(|&j| passive[j]).collect();
            let sub = solve_subset(a, b, &cols);
            rank_deficient = sub.rank_deficient;
            let mut z = alloc::vec![0.0; n];
            for (j, &c) in cols.iter().enumerate() {
                z[c] = sub.z[j];
            }
            let bad: Vec<usize> = cols.iter().copied().filter(|&j| nonneg[j] && z[j] <= 0.0).collect();
            if bad.is_empty() {
                x = z;
                break;
            }
            let alpha = bad
                .iter()
                .map(|&j| x[j] / (x[j] - z[j]))
                .fold(f64::INFINITY, f64::min)
                .clamp(0.0, 1.0);
            for j in 0..n {
                x[j] += alpha * (z[j] - x[j]);
            }
            for &j in &cols {
                if nonneg[j] && x[j] <= 1e-15 * (1.0 + x[j].abs()) {
                    x[j] = 0.0;
                    passive[j] = false;
                }
            }
            // Guarantee progress: the unknown that defined alpha leaves.
            if let Some(&j) = bad.iter().min_by(|&&p, &&q| {
                let tp = x[p] / (x[p] - z[p]);
                let tq = x[q] / (x[q] - z[q]);
                tp.partial_cmp(&tq).unwrap_or(core::cmp::Ordering::Equal)
            }) {
                x[j] = 0.0;
                passive[j] = false;
            }
        }

        let r = residual(a, b, &x);
        let w = -(a.transpose() * &r);
        let wscale = 1e-12 * (1.0 + r.norm()) * (1.0 + a.norm());
        let entering = (0..n)
            .filter(|&j| nonneg[j] && !passive[j] && w[j] > wscale)
            .max_by(|&p, &q| w[p].partial_cmp(&w[q]).unwrap_or(core::cmp::Ordering::Equal));
        match entering {
            Some(j) => passive[j] = true,
            None => {
                for j in 0..n {
                    if nonneg[j] && x[j] < 0.0 {
                        x[j] = 0.0;
                    }
                }
                let residual_norm = residual(a, b, &x).norm();
                return Ok(LsqSolution { x, residual_norm, rank_deficient, iterations });
            }
        }
    }
}
