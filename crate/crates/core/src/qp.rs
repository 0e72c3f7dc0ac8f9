//! Dense primal active-set solver for convex quadratic programs
//!
//! ```text
//!     minimize     ½ xᵀH x + cᵀx
//!     subject to   lower ≤ x ≤ upper
//!                  G x ≤ h
//! ```
//!
//! `H` must be positive definite on the null space of every working set the
//! iteration visits; in practice callers keep it positive definite. Bounds
//! are handled by fixing variables, so each iteration solves the reduced
//! KKT system over the free variables only.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Dimension(&'static str),
    #[error("starting point violates constraint {0}")]
    InfeasibleStart(usize),
    #[error("singular KKT system at iteration {iteration} (free={free}, working rows={rows})")]
    Singular { iteration: usize, free: usize, rows: usize },
    #[error("no convergence after {iterations} iterations (last step norm {step_norm:e})")]
    MaxIterations { iterations: usize, step_norm: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundState {
    Free,
    Lower,
    Upper,
}

#[derive(Debug, Clone)]
pub struct Qp {
    pub h: DMatrix<f64>,
    pub c: DVector<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub g: DMatrix<f64>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct QpSettings {
    pub max_iterations: usize,
    /// Feasibility slack allowed for the starting point.
    pub feasibility_tol: f64,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self { max_iterations: 2000, feasibility_tol: 1e-9 }
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub bounds: Vec<BoundState>,
    /// Working-set rows of `G` and their multipliers at the optimum.
    pub active_rows: Vec<(usize, f64)>,
}

impl Qp {
    pub fn dim(&self) -> usize {
        self.c.len()
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        let x = DVector::from_column_slice(x);
        0.5 * x.dot(&(&self.h * &x)) + self.c.dot(&x)
    }

    fn check(&self) -> Result<(), QpError> {
        let n = self.dim();
        if self.h.nrows() != n || self.h.ncols() != n {
            return Err(QpError::Dimension("H must be n x n"));
        }
        if self.lower.len() != n || self.upper.len() != n {
            return Err(QpError::Dimension("bounds must have length n"));
        }
        if self.g.ncols() != n || self.g.nrows() != self.b.len() {
            return Err(QpError::Dimension("G must be m x n with h of length m"));
        }
        Ok(())
    }

    /// Solve from a feasible starting point. Variables sitting exactly on a
    /// bound at `x0` start in the working set.
    pub fn solve(&self, x0: &[f64], settings: &QpSettings) -> Result<QpSolution, QpError> {
        self.check()?;
        let n = self.dim();
        let m = self.b.len();
        if x0.len() != n {
            return Err(QpError::Dimension("x0 must have length n"));
        }
        let tol = settings.feasibility_tol;
        for i in 0..n {
            if x0[i] < self.lower[i] - tol || x0[i] > self.upper[i] + tol {
                return Err(QpError::InfeasibleStart(i));
            }
        }
        let gx0 = &self.g * DVector::from_column_slice(x0);
        for r in 0..m {
            if gx0[r] > self.b[r] + tol * (1.0 + self.b[r].abs()) {
                return Err(QpError::InfeasibleStart(n + r));
            }
        }

        let mut x: Vec<f64> = x0.iter().enumerate().map(|(i, &v)| v.clamp(self.lower[i], self.upper[i])).collect();
        let mut bounds: Vec<BoundState> = (0..n)
            .map(|i| {
                if x[i] == self.lower[i] {
                    BoundState::Lower
                } else if x[i] == self.upper[i] {
                    BoundState::Upper
                } else {
                    BoundState::Free
                }
            })
            .collect();
        let mut rows: Vec<usize> = Vec::new();
        let mut last_step = f64::INFINITY;

        for iteration in 0..settings.max_iterations {
            let xv = DVector::from_column_slice(&x);
            let grad = &self.h * &xv + &self.c;
            let free: Vec<usize> = (0..n).filter(|&i| bounds[i] == BoundState::Free).collect();
            let nf = free.len();
            let nw = rows.len();

            let (p_free, lambda) = if nf == 0 {
                (Vec::new(), Vec::new())
            } else {
                let dim = nf + nw;
                let mut kkt = DMatrix::<f64>::zeros(dim, dim);
                let mut rhs = DVector::<f64>::zeros(dim);
                for (a, &i) in free.iter().enumerate() {
                    for (b, &j) in free.iter().enumerate() {
                        kkt[(a, b)] = self.h[(i, j)];
                    }
                    rhs[a] = -grad[i];
                }
                for (r, &row) in rows.iter().enumerate() {
                    for (a, &i) in free.iter().enumerate() {
                        let v = self.g[(row, i)];
                        kkt[(nf + r, a)] = v;
                        kkt[(a, nf + r)] = v;
                    }
                }
                let sol = kkt
                    .lu()
                    .solve(&rhs)
                    .filter(|s| s.iter().all(|v| v.is_finite()))
                    .ok_or(QpError::Singular { iteration, free: nf, rows: nw })?;
                (sol.rows(0, nf).iter().copied().collect::<Vec<_>>(), sol.rows(nf, nw).iter().copied().collect::<Vec<_>>())
            };

            let xscale = 1.0 + x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let pnorm = p_free.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            last_step = pnorm;

            // On ill-conditioned faces the Newton step is pure rounding noise;
            // a negligible model decrease counts as stationary too.
            let decrease = {
                let mut hp = 0.0;
                for (a, &i) in free.iter().enumerate() {
                    let mut row = 0.0;
                    for (b, &j) in free.iter().enumerate() {
                        row += self.h[(i, j)] * p_free[b];
                    }
                    hp += p_free[a] * row;
                }
                0.5 * hp
            };
            let fscale = 1.0 + self.objective(&x).abs();
            if pnorm <= 1e-12 * xscale || decrease <= 1e-15 * fscale {
                // Stationary on the working set; check multiplier signs.
                let gscale = 1.0 + grad.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                let dual_tol = 1e-11 * gscale;
                let mut worst: Option<(f64, Drop)> = None;
                for (r, &lam) in lambda.iter().enumerate() {
                    if lam < -dual_tol && worst.is_none_or(|w| lam < w.0) {
                        worst = Some((lam, Drop::Row(r)));
                    }
                }
                for i in 0..n {
                    if bounds[i] == BoundState::Free {
                        continue;
                    }
                    let mut r = grad[i];
                    for (k, &row) in rows.iter().enumerate() {
                        r += self.g[(row, i)] * lambda[k];
                    }
                    let nu = if bounds[i] == BoundState::Lower { r } else { -r };
                    if nu < -dual_tol && worst.is_none_or(|w| nu < w.0) {
                        worst = Some((nu, Drop::Bound(i)));
                    }
                }
                match worst {
                    None => {
                        let objective = self.objective(&x);
                        let active_rows = rows.iter().copied().zip(lambda).collect();
                        return Ok(QpSolution { x, objective, iterations: iteration + 1, bounds, active_rows });
                    }
                    Some((_, Drop::Row(r))) => {
                        rows.remove(r);
                    }
                    Some((_, Drop::Bound(i))) => bounds[i] = BoundState::Free,
                }
                continue;
            }

            // Full-length direction and ratio test.
            let mut p = alloc::vec![0.0; n];
            for (a, &i) in free.iter().enumerate() {
                p[i] = p_free[a];
            }
            let mut alpha = 1.0;
            let mut block: Option<Block> = None;
            for &i in &free {
                let pi = p[i];
                if pi < 0.0 && self.lower[i].is_finite() {
                    let t = (self.lower[i] - x[i]) / pi;
                    if t < alpha {
                        alpha = t.max(0.0);
                        block = Some(Block::Bound(i, BoundState::Lower));
                    }
                } else if pi > 0.0 && self.upper[i].is_finite() {
                    let t = (self.upper[i] - x[i]) / pi;
                    if t < alpha {
                        alpha = t.max(0.0);
                        block = Some(Block::Bound(i, BoundState::Upper));
                    }
                }
            }
            let pv = DVector::from_column_slice(&p);
            let gp = &self.g * &pv;
            let gx = &self.g * &xv;
            for r in 0..m {
                if rows.contains(&r) {
                    continue;
                }
                let scale = 1e-14 * (1.0 + self.b[r].abs() + gx[r].abs());
                if gp[r] > scale {
                    let t = (self.b[r] - gx[r]) / gp[r];
                    if t < alpha {
                        alpha = t.max(0.0);
                        block = Some(Block::Row(r));
                    }
                }
            }
            for i in 0..n {
                x[i] += alpha * p[i];
            }
            match block {
                Some(Block::Bound(i, side)) => {
                    x[i] = if side == BoundState::Lower { self.lower[i] } else { self.upper[i] };
                    bounds[i] = side;
                }
                Some(Block::Row(r)) => rows.push(r),
                None => {}
            }
        }
        Err(QpError::MaxIterations { iterations: settings.max_iterations, step_norm: last_step })
    }
}

#[derive(Clone, Copy)]
enum Drop {
    Row(usize),
    Bound(usize),
}

enum Block {
    Bound(usize, BoundState),
    Row(usize),
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use approx::assert_relative_eq;

    fn unconstrained(h: DMatrix<f64>, c: Vec<f64>) -> Qp {
        let n = c.len();
        Qp {
            h,
            c: DVector::from_vec(c),
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
            g: DMatrix::zeros(0, n),
            b: vec![],
        }
    }

    #[test]
    fn unconstrained_minimum() {
        let qp = unconstrained(DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]), vec![-1.0, 1.0]);
        let sol = qp.solve(&[0.0, 0.0], &QpSettings::default()).unwrap();
        let expect = qp.h.clone().lu().solve(&(-&qp.c)).unwrap();
        assert_relative_eq!(sol.x[0], expect[0], max_relative = 1e-12);
        assert_relative_eq!(sol.x[1], expect[1], max_relative = 1e-12);
    }

    #[test]
    fn quadprog_reference_problem() {
        // min ½x² + ½y² + x  s.t. x + 2y ≥ 1  →  (−0.6, 0.8)
        let mut qp = unconstrained(DMatrix::identity(2, 2), vec![1.0, 0.0]);
        qp.g = DMatrix::from_row_slice(1, 2, &[-1.0, -2.0]);
        qp.b = vec![-1.0];
        let sol = qp.solve(&[1.0, 1.0], &QpSettings::default()).unwrap();
        assert_relative_eq!(sol.x[0], -0.6, epsilon = 1e-12);
        assert_relative_eq!(sol.x[1], 0.8, epsilon = 1e-12);
        assert_eq!(sol.active_rows.len(), 1);
        assert_relative_eq!(sol.active_rows[0].1, 0.4, epsilon = 1e-12);
    }

    #[test]
    fn box_constrained() {
        // min (x-3)² + (y+2)² on [0,1]²  →  (1, 0)
        let mut qp = unconstrained(DMatrix::identity(2, 2) * 2.0, vec![-6.0, 4.0]);
        qp.lower = vec![0.0, 0.0];
        qp.upper = vec![1.0, 1.0];
        let sol = qp.solve(&[0.5, 0.5], &QpSettings::default()).unwrap();
        assert_eq!(sol.x, vec![1.0, 0.0]);
        assert_eq!(sol.bounds, vec![BoundState::Upper, BoundState::Lower]);
    }

    #[test]
    fn rejects_infeasible_start() {
        let mut qp = unconstrained(DMatrix::identity(1, 1), vec![0.0]);
        qp.lower = vec![0.0];
        assert!(matches!(qp.solve(&[-1.0], &QpSettings::default()), Err(QpError::InfeasibleStart(0))));
    }
}
