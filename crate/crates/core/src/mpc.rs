//! Linear MPC for ecological cruise control.
//!
//! All quantities are deviations from the linearization point
//! `(v_lin, te_lin)`. Over a horizon of `N` steps the controller minimizes
//!
//! ```text
//! γ · Σ_{k=1..N} (f_s · m̃(k))²  +  (V_ref − 1/(N+1) Σ_{k=1..N+1} V(k))²  +  w · Σ s(k)²
//! ```
//!
//! where `m̃(k) = c0 + c_v·V(k) + c_t·Te(k)` is the affine fuel rate in kg/m and
//! `f_s = 3600·v_lin` expresses it in kg/h at the linearization speed. The
//! dynamics are the linearized space-domain model, torque bounds are hard and
//! velocity bounds are softened by the nonnegative slacks `s`.
//!
//! The QP is condensed onto `z = [u, s]` with `u = Te / torque_scale`.

use alloc::vec::Vec;
use core::fmt::{self, Write};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::lsq::bounded_least_squares;
use crate::math;
use crate::qp::{Qp, QpError, QpSettings};
use crate::vehicle::{LinearizedModel, VehicleParams};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MpcError {
    #[error("fuel weight must be finite and non-negative, got {0}")]
    NegativeGamma(f64),
    #[error("grade window has {got} entries, horizon is {horizon}")]
    WindowLength { got: usize, horizon: usize },
    #[error("invalid MPC configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("warm start has {got} torques, horizon is {horizon}")]
    WarmStartLength { got: usize, horizon: usize },
    #[error("QP solver failed: {0}")]
    Solver(#[from] QpError),
    #[error("solution not certified: KKT residual {0:e}")]
    NotCertified(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MpcConfig {
    pub horizon: usize,
    /// Quadratic penalty on velocity-bound violation.
    pub soft_weight: f64,
    /// Torque variables are divided by this inside the QP.
    pub torque_scale: f64,
    /// Tiny ridge on scaled torque; keeps `γ = 0` problems strictly convex.
    pub regularization: f64,
    pub max_iterations: usize,
    /// Solutions whose KKT residual exceeds this are rejected.
    pub kkt_tolerance: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 60,
            soft_weight: 1e3,
            torque_scale: 100.0,
            regularization: 1e-10,
            max_iterations: 2000,
            kkt_tolerance: 1e-6,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<(), MpcError> {
        if self.horizon == 0 {
            return Err(MpcError::InvalidConfig("horizon must be at least 1"));
        }
        if !(self.soft_weight > 0.0 && self.soft_weight.is_finite()) {
            return Err(MpcError::InvalidConfig("soft_weight must be positive"));
        }
        if !(self.torque_scale > 0.0 && self.torque_scale.is_finite()) {
            return Err(MpcError::InvalidConfig("torque_scale must be positive"));
        }
        if !(self.regularization >= 0.0 && self.regularization.is_finite()) {
            return Err(MpcError::InvalidConfig("regularization must be non-negative"));
        }
        if !(self.kkt_tolerance > 0.0) {
            return Err(MpcError::InvalidConfig("kkt_tolerance must be positive"));
        }
        Ok(())
    }
}

/// Factor turning the kg/m fuel rate into kg/h at the linearization speed.
pub fn fuel_scale(lin: &LinearizedModel) -> f64 {
    3600.0 * lin.v_lin
}

/// Deviation-space box `[lo, hi]` on velocity and torque.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeviationBounds {
    pub v_lo: f64,
    pub v_hi: f64,
    pub te_lo: f64,
    pub te_hi: f64,
}

impl DeviationBounds {
    pub fn from_params(params: &VehicleParams, lin: &LinearizedModel) -> Self {
        Self {
            v_lo: params.v_min - lin.v_lin,
            v_hi: params.v_max - lin.v_lin,
            te_lo: params.te_min - lin.te_lin,
            te_hi: params.te_max - lin.te_lin,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcProblem {
    pub gamma: f64,
    pub n: usize,
    pub lin: LinearizedModel,
    pub grade_window: Vec<f64>,
    pub v_init: f64,
    pub v_ref_dev: f64,
    pub bounds: DeviationBounds,
    pub soft_weight: f64,
    /// Converts the kg/m fuel rate to kg/h at `v_lin`.
    pub fuel_scale: f64,
    pub torque_scale: f64,
    pub regularization: f64,
    pub max_iterations: usize,
    pub kkt_tolerance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcSolution {
    pub v: Vec<f64>,
    pub te: Vec<f64>,
    pub slack: Vec<f64>,
    pub objective: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
}

/// Affine map from torque deviations to velocity deviations:
/// `V(k) = free[k] + Σ_j gain[k][j]·Te(j)`.
struct Response {
    free: Vec<f64>,
    gain: DMatrix<f64>,
}

impl MpcProblem {
    pub fn build(
        gamma: f64,
        lin: &LinearizedModel,
        grade_window: &[f64],
        v_init: f64,
        params: &VehicleParams,
        cfg: &MpcConfig,
    ) -> Result<Self, MpcError> {
        cfg.validate()?;
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(MpcError::NegativeGamma(gamma));
        }
        if grade_window.len() != cfg.horizon {
            return Err(MpcError::WindowLength { got: grade_window.len(), horizon: cfg.horizon });
        }
        Ok(Self {
            gamma,
            n: cfg.horizon,
            lin: *lin,
            grade_window: grade_window.to_vec(),
            v_init,
            v_ref_dev: 0.0,
            bounds: DeviationBounds::from_params(params, lin),
            soft_weight: cfg.soft_weight,
            fuel_scale: fuel_scale(lin),
            torque_scale: cfg.torque_scale,
            regularization: cfg.regularization,
            max_iterations: cfg.max_iterations,
            kkt_tolerance: cfg.kkt_tolerance,
        })
    }

    /// Velocity deviations `V(1..N+1)` under torque deviations `te`.
    pub fn predict(&self, te: &[f64]) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n + 1);
        v.push(self.v_init);
        for k in 0..self.n {
            v.push(self.lin.step(v[k], te[k], self.grade_window[k]));
        }
        v
    }

    /// Fuel rate in kg/h along a trajectory, the quantity squared in the cost.
    pub fn scaled_fuel(&self, v: &[f64], te: &[f64]) -> Vec<f64> {
        (0..self.n).map(|k| self.fuel_scale * self.lin.fuel_lin.eval(v[k], te[k])).collect()
    }

    pub fn mean_velocity(&self, v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / (self.n + 1) as f64
    }

    /// The fuel term without its weight.
    pub fn fuel_term(&self, v: &[f64], te: &[f64]) -> f64 {
        self.scaled_fuel(v, te).iter().map(|m| m * m).sum()
    }

    pub fn tracking_term(&self, v: &[f64]) -> f64 {
        let e = self.v_ref_dev - self.mean_velocity(v);
        e * e
    }

    pub fn objective(&self, v: &[f64], te: &[f64], slack: &[f64]) -> f64 {
        let reg: f64 = te.iter().map(|t| (t / self.torque_scale) * (t / self.torque_scale)).sum();
        self.gamma * self.fuel_term(v, te)
            + self.tracking_term(v)
            + self.soft_weight * slack.iter().map(|s| s * s).sum::<f64>()
            + self.regularization * reg
    }

    fn response(&self) -> Response {
        let n = self.n;
        let mut free = Vec::with_capacity(n + 1);
        free.push(self.v_init);
        for k in 0..n {
            free.push(self.lin.step(free[k], 0.0, self.grade_window[k]));
        }
        let mut gain = DMatrix::<f64>::zeros(n + 1, n);
        for k in 1..=n {
            for j in 0..k {
                gain[(k, j)] = if j + 1 == k { self.lin.b1 } else { self.lin.a_coef * gain[(k - 1, j)] };
            }
        }
        Response { free, gain }
    }

    /// The condensed QP over `z = [u (N), s (N)]`, plus the constant that
    /// makes `qp.objective(z) + constant` equal [`MpcProblem::objective`].
    pub fn condensed(&self) -> (Qp, f64) {
        let n = self.n;
        let ts = self.torque_scale;
        let Response { free, gain } = self.response();
        let f = &self.lin.fuel_lin;
        let sg = math::sqrt(self.gamma) * self.fuel_scale;

        // Residual vector d = D·u + e whose squared norm is fuel + tracking.
        let mut d = DMatrix::<f64>::zeros(n + 1, n);
        let mut e = DVector::<f64>::zeros(n + 1);
        for k in 0..n {
            for j in 0..k {
                d[(k, j)] = sg * f.c_v * gain[(k, j)] * ts;
            }
            d[(k, k)] = sg * f.c_t * ts;
            e[k] = sg * (f.c0 + f.c_v * free[k]);
        }
        let inv = 1.0 / (n + 1) as f64;
        for j in 0..n {
            let col: f64 = (0..=n).map(|k| gain[(k, j)]).sum();
            d[(n, j)] = -inv * col * ts;
        }
        e[n] = self.v_ref_dev - inv * free.iter().sum::<f64>();

        let mut h = DMatrix::<f64>::zeros(2 * n, 2 * n);
        let dtd = d.transpose() * &d;
        let dte = d.transpose() * &e;
        let mut c = DVector::<f64>::zeros(2 * n);
        for i in 0..n {
            for j in 0..n {
                h[(i, j)] = 2.0 * dtd[(i, j)];
            }
            h[(i, i)] += 2.0 * self.regularization;
            h[(n + i, n + i)] = 2.0 * self.soft_weight;
            c[i] = 2.0 * dte[i];
        }

        let mut lower = alloc::vec![self.bounds.te_lo / ts; n];
        let mut upper = alloc::vec![self.bounds.te_hi / ts; n];
        lower.extend(core::iter::repeat_n(0.0, n));
        upper.extend(core::iter::repeat_n(f64::INFINITY, n));

        // Rows 0..N: V(k+1) − s(k) ≤ v_hi; rows N..2N: −V(k+1) − s(k) ≤ −v_lo.
        let mut g = DMatrix::<f64>::zeros(2 * n, 2 * n);
        let mut b = alloc::vec![0.0; 2 * n];
        for k in 0..n {
            for j in 0..=k {
                g[(k, j)] = gain[(k + 1, j)] * ts;
                g[(n + k, j)] = -gain[(k + 1, j)] * ts;
            }
            g[(k, n + k)] = -1.0;
            g[(n + k, n + k)] = -1.0;
            b[k] = self.bounds.v_hi - free[k + 1];
            b[n + k] = free[k + 1] - self.bounds.v_lo;
        }
        (Qp { h, c, lower, upper, g, b }, e.dot(&e))
    }

    /// Feasible starting point from a torque guess: clamp, then set each
    /// slack to the violation it has to absorb.
    fn start_point(&self, te_guess: &[f64]) -> Vec<f64> {
        let n = self.n;
        let ts = self.torque_scale;
        let te: Vec<f64> = te_guess.iter().map(|t| t.clamp(self.bounds.te_lo, self.bounds.te_hi)).collect();
        let v = self.predict(&te);
        let mut z: Vec<f64> = te.iter().map(|t| t / ts).collect();
        for k in 0..n {
            let over = v[k + 1] - self.bounds.v_hi;
            let under = self.bounds.v_lo - v[k + 1];
            z.push(over.max(under).max(0.0));
        }
        z
    }

    /// Solve, optionally warm-started from a torque sequence (typically the
    /// previous solution shifted by one step).
    pub fn solve(&self, warm: Option<&[f64]>) -> Result<MpcSolution, MpcError> {
        let n = self.n;
        let zero = alloc::vec![0.0; n];
        let guess = match warm {
            Some(w) if w.len() != n => return Err(MpcError::WarmStartLength { got: w.len(), horizon: n }),
            Some(w) => w,
            None => &zero,
        };
        let (qp, _) = self.condensed();
        let z0 = self.start_point(guess);
        let settings = QpSettings { max_iterations: self.max_iterations, ..QpSettings::default() };
        let qs = qp.solve(&z0, &settings)?;

        let te: Vec<f64> = qs.x[..n].iter().map(|u| u * self.torque_scale).collect();
        let slack: Vec<f64> = qs.x[n..].iter().map(|s| s.max(0.0)).collect();
        let v = self.predict(&te);
        let objective = self.objective(&v, &te, &slack);
        let mut sol = MpcSolution { v, te, slack, objective, kkt_residual: 0.0, iterations: qs.iterations };
        sol.kkt_residual = self.kkt_residual(&sol);
        if !(sol.kkt_residual <= self.kkt_tolerance) {
            return Err(MpcError::NotCertified(sol.kkt_residual));
        }
        Ok(sol)
    }

    /// Gradient of the objective in `x = [V(1..N+1), Te(1..N), s(1..N)]`.
    pub fn gradient(&self, v: &[f64], te: &[f64], slack: &[f64]) -> Vec<f64> {
        let n = self.n;
        let f = &self.lin.fuel_lin;
        let fs = self.fuel_scale;
        let track = -2.0 * (self.v_ref_dev - self.mean_velocity(v)) / (n + 1) as f64;
        let mut grad = alloc::vec![0.0; 3 * n + 1];
        for k in 0..n {
            let m = fs * f.eval(v[k], te[k]);
            grad[k] = 2.0 * self.gamma * m * fs * f.c_v + track;
            let ts2 = self.torque_scale * self.torque_scale;
            grad[n + 1 + k] = 2.0 * self.gamma * m * fs * f.c_t + 2.0 * self.regularization * te[k] / ts2;
            grad[2 * n + 1 + k] = 2.0 * self.soft_weight * slack[k];
        }
        grad[n] = track;
        grad
    }

    /// Stationarity residual `‖∇f + Σ p_i ∇g_i + Σ q_j ∇h_j‖₂` with the
    /// multipliers fitted by least squares (`q ≥ 0` on the active inequalities).
    pub fn kkt_residual(&self, sol: &MpcSolution) -> f64 {
        let n = self.n;
        let dim = 3 * n + 1;
        let (iv, it, is) = (0, n + 1, 2 * n + 1);
        let grad = self.gradient(&sol.v, &sol.te, &sol.slack);

        let mut cols: Vec<Vec<(usize, f64)>> = Vec::new();
        let mut nonneg: Vec<bool> = Vec::new();
        cols.push(alloc::vec![(iv, 1.0)]);
        nonneg.push(false);
        for k in 0..n {
            cols.push(alloc::vec![(iv + k + 1, 1.0), (iv + k, -self.lin.a_coef), (it + k, -self.lin.b1)]);
            nonneg.push(false);
        }
        let near = |x: f64, bound: f64| (x - bound).abs() <= 1e-8 * (1.0 + bound.abs());
        let b = &self.bounds;
        for k in 0..n {
            let v = sol.v[k + 1];
            let s = sol.slack[k];
            let hi = near(v - s, b.v_hi);
            let lo = near(v + s, b.v_lo);
            if hi {
                cols.push(alloc::vec![(iv + k + 1, 1.0), (is + k, -1.0)]);
                nonneg.push(true);
            }
            if lo {
                cols.push(alloc::vec![(iv + k + 1, -1.0), (is + k, -1.0)]);
                nonneg.push(true);
            }
            // Without a coupled velocity row the slack-bound multiplier is
            // forced to 2w·s = 0, so only include it when it can matter.
            if (hi || lo) && near(s, 0.0) {
                cols.push(alloc::vec![(is + k, -1.0)]);
                nonneg.push(true);
            }
            if near(sol.te[k], b.te_lo) {
                cols.push(alloc::vec![(it + k, -1.0)]);
                nonneg.push(true);
            }
            if near(sol.te[k], b.te_hi) {
                cols.push(alloc::vec![(it + k, 1.0)]);
                nonneg.push(true);
            }
        }
        let mut a = DMatrix::<f64>::zeros(dim, cols.len());
        for (j, col) in cols.iter().enumerate() {
            for &(i, val) in col {
                a[(i, j)] += val;
            }
        }
        let rhs = -DVector::from_vec(grad);
        match bounded_least_squares(&a, &rhs, &nonneg) {
            Ok(s) => s.residual_norm,
            Err(_) => f64::INFINITY,
        }
    }

    /// Write the condensed QP as plain text: a header line per block
    /// (`name rows cols`) followed by row-major values.
    pub fn write_dump<W: Write>(&self, out: &mut W) -> fmt::Result {
        let (qp, constant) = self.condensed();
        writeln!(out, "# minimize 0.5 z'Hz + c'z + constant s.t. lower <= z <= upper, G z <= b")?;
        writeln!(out, "# z = [te / {} ({}), slack ({})]", self.torque_scale, self.n, self.n)?;
        writeln!(out, "constant 1 1")?;
        writeln!(out, "{:.17e}", constant)?;
        dump_matrix(out, "H", &qp.h)?;
        dump_vector(out, "c", qp.c.as_slice())?;
        dump_vector(out, "lower", &qp.lower)?;
        dump_vector(out, "upper", &qp.upper)?;
        dump_matrix(out, "G", &qp.g)?;
        dump_vector(out, "b", &qp.b)
    }
}

fn dump_matrix<W: Write>(out: &mut W, name: &str, m: &DMatrix<f64>) -> fmt::Result {
    writeln!(out, "{} {} {}", name, m.nrows(), m.ncols())?;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if j > 0 {
                out.write_char(' ')?;
            }
            write!(out, "{:.17e}", m[(i, j)])?;
        }
        out.write_char('\n')?;
    }
    Ok(())
}

fn dump_vector<W: Write>(out: &mut W, name: &str, v: &[f64]) -> fmt::Result {
    writeln!(out, "{} {} 1", name, v.len())?;
    for x in v {
        writeln!(out, "{:.17e}", x)?;
    }
    Ok(())
}
