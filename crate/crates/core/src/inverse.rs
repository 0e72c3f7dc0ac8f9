//! Inverse optimization of the MPC fuel weight.
//!
//! Given a trajectory window `x* = [V(1..N+1), Te(1..N)]` (deviation
//! variables), stationarity of the MPC Lagrangian reads
//!
//! ```text
//! γ·∇F(x*) + ∇T(x*) + Σ p_i ∇g_i + Σ_{j active} q_j ∇h_j = 0
//! ```
//!
//! with `F` the squared scaled fuel term, `T` the tracking term, `g` the
//! linear dynamics and `h` the velocity/torque bounds. Moving `∇T` to the
//! right gives `Q·Y = W` with `Y = [γ, p_1..p_{N+1}, q_active]`, solved in
//! the weighted least-squares sense with `γ ≥ 0` and `q ≥ 0`. Row weights
//! decay linearly from 1 on the first step to 0 at the horizon end.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::lsq::{bounded_least_squares, LsqError};
use crate::math;
use crate::mpc::{fuel_scale, DeviationBounds};
use crate::road::RoadProfile;
use crate::trajectory::Trajectory;
use crate::vehicle::{LinearizedModel, VehicleParams};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InverseError {
    #[error("window needs {n1} velocities and {n} torques/grades, got {v}, {te}, {grade}")]
    Dimension { n: usize, n1: usize, v: usize, te: usize, grade: usize },
    #[error("active index {index} outside 0..{limit}")]
    ActiveIndex { index: usize, limit: usize },
    #[error("horizon must be at least 1")]
    ZeroHorizon,
    #[error("trajectory has no steps")]
    EmptyTrajectory,
    #[error(transparent)]
    Lsq(#[from] LsqError),
}

/// Bit set describing how trustworthy a recovered weight is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GammaFlags(pub u8);

impl GammaFlags {
    pub const NONE: Self = Self(0);
    /// The weighted system was rank deficient; the weight is not unique.
    pub const DEGENERATE: Self = Self(1);
    /// The raw weight fell outside the clamp range.
    pub const CLAMPED: Self = Self(2);
    /// The least-squares solve itself failed; the weight is 0.
    pub const FAILED: Self = Self(4);

    pub fn contains(self, other: Self) -> bool {
        self.0 & other.0 == other.0
    }

    pub fn is_clean(self) -> bool {
        self.0 == 0
    }

    pub fn bits(self) -> u8 {
        self.0
    }
}

impl core::ops::BitOr for GammaFlags {
    type Output = Self;
    fn bitor(self, rhs: Self) -> Self {
        Self(self.0 | rhs.0)
    }
}

impl core::ops::BitOrAssign for GammaFlags {
    fn bitor_assign(&mut self, rhs: Self) {
        self.0 |= rhs.0;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InverseConfig {
    pub horizon: usize,
    /// Normalized distance to a bound under which it counts as active.
    pub active_tol: f64,
    pub gamma_max: f64,
    /// Reference in deviation units; 0 when linearized at the set point.
    pub v_ref_dev: f64,
}

impl Default for InverseConfig {
    fn default() -> Self {
        Self { horizon: 60, active_tol: 1e-6, gamma_max: 0.05, v_ref_dev: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KktSystem {
    pub n: usize,
    /// `(2N+1) × (N+2+|active|)`; column 0 is `γ`, then `p_1..p_{N+1}`,
    /// then one column per active inequality in `active_set` order.
    pub q_mat: DMatrix<f64>,
    pub w_vec: DVector<f64>,
    pub r_weights: Vec<f64>,
    pub active_set: Vec<usize>,
}

impl KktSystem {
    pub fn gamma_column(&self) -> usize {
        0
    }

    pub fn p_columns(&self) -> core::ops::Range<usize> {
        1..self.n + 2
    }

    pub fn q_columns(&self) -> core::ops::Range<usize> {
        self.n + 2..self.n + 2 + self.active_set.len()
    }

    pub fn unknowns(&self) -> usize {
        self.q_mat.ncols()
    }

    /// `‖√R (Q·Y − W)‖₂`.
    pub fn weighted_residual(&self, y: &[f64]) -> f64 {
        let r = &self.q_mat * DVector::from_column_slice(y) - &self.w_vec;
        math::sqrt(r.iter().zip(&self.r_weights).map(|(e, w)| w * e * e).sum())
    }

    pub fn nonneg_mask(&self) -> Vec<bool> {
        (0..self.unknowns()).map(|j| j == 0 || j >= self.n + 2).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Recovery {
    /// Weight clamped to `[0, gamma_max]`.
    pub gamma: f64,
    pub raw_gamma: f64,
    pub residual: f64,
    pub flags: GammaFlags,
}

/// Inequality indices met within `tol` (relative to the bound span):
/// `0..N` velocity min on `V(2..N+1)`, `N..2N` velocity max, `2N..3N`
/// torque min, `3N..4N` torque max.
pub fn detect_active(v: &[f64], te: &[f64], bounds: &DeviationBounds, tol: f64) -> Vec<usize> {
    let n = te.len();
    let vspan = bounds.v_hi - bounds.v_lo;
    let tspan = bounds.te_hi - bounds.te_lo;
    let mut out = Vec::new();
    let hit = |x: f64, bound: f64, span: f64| (x - bound).abs() <= tol * span;
    for k in 0..n {
        if hit(v[k + 1], bounds.v_lo, vspan) || v[k + 1] < bounds.v_lo {
            out.push(k);
        }
    }
    for k in 0..n {
        if hit(v[k + 1], bounds.v_hi, vspan) || v[k + 1] > bounds.v_hi {
            out.push(n + k);
        }
    }
    for k in 0..n {
        if hit(te[k], bounds.te_lo, tspan) || te[k] < bounds.te_lo {
            out.push(2 * n + k);
        }
    }
    for k in 0..n {
        if hit(te[k], bounds.te_hi, tspan) || te[k] > bounds.te_hi {
            out.push(3 * n + k);
        }
    }
    out
}

/// Assemble `Q`, `W` and `R` for a deviation-variable window.
pub fn build_kkt(
    v: &[f64],
    te: &[f64],
    grade: &[f64],
    lin: &LinearizedModel,
    active: &[usize],
    v_ref_dev: f64,
) -> Result<KktSystem, InverseError> {
    let n = te.len();
    if n == 0 {
        return Err(InverseError::ZeroHorizon);
    }
    if v.len() != n + 1 || grade.len() != n {
        return Err(InverseError::Dimension { n, n1: n + 1, v: v.len(), te: te.len(), grade: grade.len() });
    }
    if let Some(&index) = active.iter().find(|&&j| j >= 4 * n) {
        return Err(InverseError::ActiveIndex { index, limit: 4 * n });
    }
    let rows = 2 * n + 1;
    let (iv, it) = (0, n + 1);
    let cols = n + 2 + active.len();
    let mut q = DMatrix::<f64>::zeros(rows, cols);
    let f = &lin.fuel_lin;
    let fs = fuel_scale(lin);

    for k in 0..n {
        let m = fs * f.eval(v[k], te[k]);
        q[(iv + k, 0)] = 2.0 * m * fs * f.c_v;
        q[(it + k, 0)] = 2.0 * m * fs * f.c_t;
    }
    // g_1 = V(1) − v_init; g_{k+1} = V(k+1) − A·V(k) − B1·Te(k) − B2·φ(k).
    q[(iv, 1)] = 1.0;
    for k in 0..n {
        let c = 2 + k;
        q[(iv + k + 1, c)] = 1.0;
        q[(iv + k, c)] = -lin.a_coef;
        q[(it + k, c)] = -lin.b1;
    }
    for (a, &j) in active.iter().enumerate() {
        let c = n + 2 + a;
        let k = j % n;
        match j / n {
            0 => q[(iv + k + 1, c)] = -1.0,
            1 => q[(iv + k + 1, c)] = 1.0,
            2 => q[(it + k, c)] = -1.0,
            _ => q[(it + k, c)] = 1.0,
        }
    }

    let mean = v.iter().sum::<f64>() / (n + 1) as f64;
    let mut w = DVector::<f64>::zeros(rows);
    for k in 0..=n {
        w[iv + k] = 2.0 * (v_ref_dev - mean) / (n + 1) as f64;
    }

    let mut r = alloc::vec![0.0; rows];
    for k in 0..=n {
        r[iv + k] = 1.0 - k as f64 / n as f64;
    }
    for k in 0..n {
        r[it + k] = 1.0 - k as f64 / n as f64;
    }
    Ok(KktSystem { n, q_mat: q, w_vec: w, r_weights: r, active_set: active.to_vec() })
}

fn weighted(kkt: &KktSystem) -> (DMatrix<f64>, DVector<f64>) {
    let mut a = kkt.q_mat.clone();
    let mut b = kkt.w_vec.clone();
    for (i, w) in kkt.r_weights.iter().enumerate() {
        let s = math::sqrt(*w);
        a.row_mut(i).scale_mut(s);
        b[i] *= s;
    }
    (a, b)
}

/// Whether the weighted `γ` column lies in the span of the multiplier
/// columns, in which case any `γ` fits equally well.
pub fn gamma_unidentifiable(kkt: &KktSystem) -> bool {
    let (a, _) = weighted(kkt);
    let g = a.column(0).into_owned();
    let gn = g.norm();
    if gn == 0.0 {
        return true;
    }
    let others = a.columns(1, a.ncols() - 1).into_owned();
    let svd = others.svd(true, false);
    let Some(u) = svd.u else { return false };
    let smax = svd.singular_values.max();
    let mut proj = DVector::<f64>::zeros(g.len());
    for (j, &sv) in svd.singular_values.iter().enumerate() {
        if sv > SPAN_TOL * smax {
            let uj = u.column(j);
            proj += uj * uj.dot(&g);
        }
    }
    (g - proj).norm() <= SPAN_TOL * gn
}

const SPAN_TOL: f64 = 1e-9;

/// Full unknown vector `Y` of the weighted nonnegative least-squares fit.
pub fn solve_kkt(kkt: &KktSystem) -> Result<(Vec<f64>, f64, bool), InverseError> {
    let (a, b) = weighted(kkt);
    let sol = bounded_least_squares(&a, &b, &kkt.nonneg_mask())?;
    Ok((sol.x, sol.residual_norm, sol.rank_deficient))
}

pub fn recover_gamma(kkt: &KktSystem, gamma_max: f64) -> Recovery {
    match solve_kkt(kkt) {
        Ok((y, residual, rank_deficient)) => {
            let raw = y[0];
            let mut flags = GammaFlags::NONE;
            if rank_deficient || gamma_unidentifiable(kkt) {
                flags |= GammaFlags::DEGENERATE;
            }
            if raw > gamma_max {
                flags |= GammaFlags::CLAMPED;
            }
            Recovery { gamma: raw.clamp(0.0, gamma_max), raw_gamma: raw, residual, flags }
        }
        Err(_) => Recovery { gamma: 0.0, raw_gamma: 0.0, residual: f64::INFINITY, flags: GammaFlags::FAILED },
    }
}

/// Deviation-variable window of an absolute trajectory starting at step
/// `k`. Past the road end the last speed is held at its flat-road
/// equilibrium torque.
pub fn window(
    traj: &Trajectory,
    road: &RoadProfile,
    params: &VehicleParams,
    lin: &LinearizedModel,
    k: usize,
    n: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let p = traj.steps();
    let v_end = traj.v[p];
    let te_end = params.equilibrium_torque(v_end);
    let v = (k..=k + n).map(|i| traj.v.get(i).copied().unwrap_or(v_end) - lin.v_lin).collect();
    let te = (k..k + n).map(|i| traj.te.get(i).copied().unwrap_or(te_end) - lin.te_lin).collect();
    let grade = road.preview(k, n).samples;
    (v, te, grade)
}

/// Recover the weight for the window starting at step `k`.
pub fn recover_at(
    traj: &Trajectory,
    road: &RoadProfile,
    params: &VehicleParams,
    lin: &LinearizedModel,
    cfg: &InverseConfig,
    k: usize,
) -> Result<Recovery, InverseError> {
    let (v, te, grade) = window(traj, road, params, lin, k, cfg.horizon);
    let bounds = DeviationBounds::from_params(params, lin);
    let active = detect_active(&v, &te, &bounds, cfg.active_tol);
    let kkt = build_kkt(&v, &te, &grade, lin, &active, cfg.v_ref_dev)?;
    Ok(recover_gamma(&kkt, cfg.gamma_max))
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GammaSeries {
    pub positions: Vec<usize>,
    pub gamma: Vec<f64>,
    pub residuals: Vec<f64>,
    pub flags: Vec<GammaFlags>,
}

impl GammaSeries {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn push(&mut self, position: usize, r: &Recovery) {
        self.positions.push(position);
        self.gamma.push(r.gamma);
        self.residuals.push(r.residual);
        self.flags.push(r.flags);
    }

    /// Weight at step `k`, holding the last value beyond the end.
    pub fn at(&self, k: usize) -> f64 {
        match self.gamma.get(k) {
            Some(&g) => g,
            None => self.gamma.last().copied().unwrap_or(0.0),
        }
    }
}

/// One recovery per road step, in order.
pub fn gamma_series(
    traj: &Trajectory,
    road: &RoadProfile,
    params: &VehicleParams,
    lin: &LinearizedModel,
    cfg: &InverseConfig,
) -> Result<GammaSeries, InverseError> {
    if cfg.horizon == 0 {
        return Err(InverseError::ZeroHorizon);
    }
    if traj.steps() == 0 {
        return Err(InverseError::EmptyTrajectory);
    }
    let mut out = GammaSeries::default();
    for k in 0..traj.steps() {
        let r = recover_at(traj, road, params, lin, cfg, k)?;
        out.push(k, &r);
    }
    Ok(out)
}
