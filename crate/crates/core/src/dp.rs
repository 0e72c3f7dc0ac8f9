//! Whole-road minimum-fuel problem by grid dynamic programming.
//!
//! States are the velocity `V` and the running average velocity `V_avg`,
//! the input is the engine torque. The backward pass stores the cost-to-go
//! on the `(V, V_avg)` grid for every stage; the forward pass starts from the
//! continuous initial state `(V_i, V_i)`, picks the best torque against the
//! bilinearly interpolated cost-to-go and integrates the exact nonlinear
//! dynamics, so the returned trajectory is reproduced bit-for-bit by
//! [`replay`].

use alloc::vec::Vec;

use thiserror::Error;

use crate::math;
use crate::road::RoadProfile;
use crate::trajectory::Trajectory;
use crate::vehicle::{VehicleError, VehicleParams};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DpError {
    #[error("velocity must be strictly positive (v={v}, v_avg={vavg})")]
    NonPositiveVelocity { v: f64, vavg: f64 },
    #[error("grid must be non-empty and strictly increasing")]
    BadGrid,
    #[error("invalid DP configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("road must have at least 2 segments, got {0}")]
    RoadTooShort(usize),
    #[error("no feasible torque at step {step} (v={v}, v_avg={vavg})")]
    Infeasible { step: usize, v: f64, vavg: f64 },
    #[error("torque sequence has {got} entries, road has {expected} segments")]
    LengthMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Vehicle(#[from] VehicleError),
}

/// Harmonic average-velocity update: total distance over total time after
/// one more segment of length `ds` driven at `v_k`.
pub fn vavg_update(s_k: f64, vavg_k: f64, v_k: f64, ds: f64) -> Result<f64, DpError> {
    if !(v_k > 0.0) || !(vavg_k > 0.0) {
        return Err(DpError::NonPositiveVelocity { v: v_k, vavg: vavg_k });
    }
    Ok(vavg_update_raw(s_k, vavg_k, v_k, ds))
}

#[inline]
pub(crate) fn vavg_update_raw(s_k: f64, vavg_k: f64, v_k: f64, ds: f64) -> f64 {
    (s_k + ds) / (s_k / vavg_k + ds / v_k)
}

/// Strictly increasing sample points of one state or input axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    points: Vec<f64>,
    uniform_step: Option<f64>,
}

impl Grid {
    /// `lo, lo + step, …` up to `hi` (inclusive within round-off).
    pub fn uniform(lo: f64, hi: f64, step: f64) -> Result<Self, DpError> {
        if !(step > 0.0) || !(hi >= lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(DpError::BadGrid);
        }
        let n = math::floor((hi - lo) / step + 1e-9) as usize + 1;
        let points = (0..n).map(|i| lo + i as f64 * step).collect();
        Ok(Self { points, uniform_step: (n > 1).then_some(step) })
    }

    /// Uniform grid through `anchor`, spanning as much of `[lo, hi]` as fits.
    pub fn anchored(anchor: f64, lo: f64, hi: f64, step: f64) -> Result<Self, DpError> {
        if !(step > 0.0) || !(lo <= anchor && anchor <= hi) {
            return Err(DpError::BadGrid);
        }
        let below = math::floor((anchor - lo) / step + 1e-9) as usize;
        let above = math::floor((hi - anchor) / step + 1e-9) as usize;
        let points = (0..=below + above)
            .map(|i| anchor + (i as f64 - below as f64) * step)
            .collect();
        Ok(Self { points, uniform_step: (below + above > 0).then_some(step) })
    }

    pub fn from_points(points: Vec<f64>) -> Result<Self, DpError> {
        if points.is_empty()
            || points.iter().any(|p| !p.is_finite())
            || points.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(DpError::BadGrid);
        }
        Ok(Self { points, uniform_step: None })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn first(&self) -> f64 {
        self.points[0]
    }

    pub fn last(&self) -> f64 {
        self.points[self.points.len() - 1]
    }

    /// Cell index `i` and weight `w` with `x = (1−w)·p[i] + w·p[i+1]`, or
    /// `None` outside the grid. Grid nodes come back with `w == 0` exactly.
    #[inline]
    pub fn locate(&self, x: f64) -> Option<(usize, f64)> {
        let n = self.points.len();
        let lo = self.points[0];
        let hi = self.points[n - 1];
        let slack = 1e-9 * (1.0 + x.abs());
        if !(x >= lo - slack && x <= hi + slack) {
            return None;
        }
        if n == 1 {
            return (x == lo).then_some((0, 0.0));
        }
        let x = x.clamp(lo, hi);
        let mut i = match self.uniform_step {
            Some(step) => (math::floor((x - lo) / step) as usize).min(n - 2),
            None => self.points.partition_point(|&p| p <= x).saturating_sub(1).min(n - 2),
        };
        // Uniform index arithmetic can be one cell off near nodes.
        if x < self.points[i] && i > 0 {
            i -= 1;
        } else if x >= self.points[i + 1] && i + 2 < n {
            i += 1;
        }
        let w = (x - self.points[i]) / (self.points[i + 1] - self.points[i]);
        Some((i, w))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpConfig {
    pub v_grid: Grid,
    pub vavg_grid: Grid,
    pub te_grid: Grid,
    pub vavg_min: f64,
    pub vavg_max: f64,
    pub v_ref: f64,
    pub v_i: f64,
    /// Cost assigned to any state outside the hard bounds.
    pub infeasible_cost: f64,
    /// kg per m/s of terminal average-velocity shortfall below `v_ref`.
    pub terminal_slope: f64,
    pub keep_cost_to_go: bool,
}

impl DpConfig {
    /// 0.25 m/s velocity grid over the vehicle bounds, 0.1 m/s average-velocity
    /// grid through `v_ref` spanning ±7 %, 10 N·m torque grid.
    pub fn new(params: &VehicleParams, v_ref: f64) -> Result<Self, DpError> {
        let vavg_min = 0.93 * v_ref;
        let vavg_max = 1.07 * v_ref;
        Ok(Self {
            v_grid: Grid::uniform(params.v_min, params.v_max, 0.25)?,
            vavg_grid: Grid::anchored(v_ref, vavg_min, vavg_max, 0.1)?,
            te_grid: Grid::uniform(params.te_min, params.te_max, 10.0)?,
            vavg_min,
            vavg_max,
            v_ref,
            v_i: v_ref,
            infeasible_cost: 1e4,
            terminal_slope: 100.0,
            keep_cost_to_go: false,
        })
    }

    pub fn validate(&self, params: &VehicleParams, road: &RoadProfile) -> Result<(), DpError> {
        params.validate()?;
        let tol = 1e-9;
        if self.v_grid.first() < params.v_min - tol || self.v_grid.last() > params.v_max + tol {
            return Err(DpError::InvalidConfig("velocity grid outside [v_min, v_max]"));
        }
        if self.te_grid.first() < params.te_min - tol || self.te_grid.last() > params.te_max + tol {
            return Err(DpError::InvalidConfig("torque grid outside [te_min, te_max]"));
        }
        if !(self.vavg_min > 0.0 && self.vavg_min <= self.vavg_max) {
            return Err(DpError::InvalidConfig("average-velocity bounds"));
        }
        if !(self.v_ref >= self.vavg_min && self.v_ref <= self.vavg_max) {
            return Err(DpError::InvalidConfig("v_ref outside average-velocity bounds"));
        }
        if !(self.v_i >= params.v_min && self.v_i <= params.v_max)
            || !(self.v_i >= self.vavg_min && self.v_i <= self.vavg_max)
        {
            return Err(DpError::InvalidConfig("initial velocity outside bounds"));
        }
        if !(self.terminal_slope > 0.0) {
            return Err(DpError::InvalidConfig("terminal slope must be positive"));
        }
        // Fuel rate is a convex quadratic over a box divided by V: the worst
        // corner at the slowest speed bounds every path.
        let worst_rate = [params.te_min, params.te_max]
            .iter()
            .flat_map(|&te| [params.v_min, params.v_max].map(|v| params.fuel_rate_time(v, te)))
            .fold(0.0f64, f64::max)
            / (3600.0 * params.v_min);
        let bound = worst_rate * road.length_m() + self.terminal_slope * (self.vavg_max - self.vavg_min);
        if !(self.infeasible_cost >= 10.0 * bound) {
            return Err(DpError::InvalidConfig("infeasible_cost below 10x the worst path cost"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpSolution {
    pub trajectory: Trajectory,
    /// Fuel over the road in kg.
    pub total_fuel: f64,
    /// Optimal objective: fuel plus any terminal shortfall penalty.
    pub cost: f64,
    /// Stage-major cost-to-go tables (`[stage][iv * n_vavg + ia]`), kept on request.
    pub cost_to_go: Option<Vec<Vec<f64>>>,
}

struct Stage<'a> {
    params: &'a VehicleParams,
    cfg: &'a DpConfig,
    s_k: f64,
    phi: f64,
    last: bool,
}

impl Stage<'_> {
    #[inline]
    fn terminal(&self, v: f64, va: f64) -> f64 {
        let p = self.params;
        let c = self.cfg;
        if v < p.v_min || v > p.v_max || va < c.vavg_min || va > c.vavg_max {
            c.infeasible_cost
        } else {
            (c.terminal_slope * (c.v_ref - va).max(0.0)).min(c.infeasible_cost)
        }
    }

    #[inline]
    fn state_ok(&self, v: f64, va: f64) -> bool {
        v >= self.params.v_min
            && v <= self.params.v_max
            && va >= self.cfg.vavg_min
            && va <= self.cfg.vavg_max
    }
}

#[inline]
fn bilinear(table: &[f64], na: usize, (iv, wv): (usize, f64), (ia, wa): (usize, f64), inf: f64) -> f64 {
    let at = |i: usize, j: usize| table[i * na + j];
    let iv1 = if wv > 0.0 { iv + 1 } else { iv };
    let ia1 = if wa > 0.0 { ia + 1 } else { ia };
    let v = (1.0 - wv) * ((1.0 - wa) * at(iv, ia) + wa * at(iv, ia1))
        + wv * ((1.0 - wa) * at(iv1, ia) + wa * at(iv1, ia1));
    v.min(inf)
}

/// Solve the whole-road minimum-fuel problem.
pub fn solve(params: &VehicleParams, road: &RoadProfile, cfg: &DpConfig) -> Result<DpSolution, DpError> {
    let steps = road.steps();
    if steps < 2 {
        return Err(DpError::RoadTooShort(steps));
    }
    cfg.validate(params, road)?;
    let ds = params.ds;
    let inf = cfg.infeasible_cost;
    let vg = cfg.v_grid.points();
    let ag = cfg.vavg_grid.points();
    let tg = cfg.te_grid.points();
    let (nv, na, nt) = (vg.len(), ag.len(), tg.len());

    // tables[k] is the cost-to-go at the start of segment k (k = 1..P-1);
    // stage P uses the analytic terminal cost.
    let mut tables: Vec<Vec<f64>> = Vec::with_capacity(steps);
    tables.resize_with(steps, Vec::new);
    let mut next_v = alloc::vec![0.0; nt];
    let mut next_loc: Vec<Option<(usize, f64)>> = alloc::vec![None; nt];
    let mut stage_cost = alloc::vec![0.0; nt];

    for k in (0..steps).rev() {
        let stage = Stage { params, cfg, s_k: k as f64 * ds, phi: road.grade_at(k), last: k + 1 == steps };
        let mut table = alloc::vec![inf; nv * na];
        for (iv, &v) in vg.iter().enumerate() {
            for (it, &te) in tg.iter().enumerate() {
                let vn = params.step_raw(v, te, stage.phi);
                next_v[it] = vn;
                stage_cost[it] = params.fuel_space_raw(v, te) * ds;
                next_loc[it] = if vn >= params.v_min && vn <= params.v_max {
                    cfg.v_grid.locate(vn)
                } else {
                    None
                };
            }
            for (ia, &va) in ag.iter().enumerate() {
                if !stage.state_ok(v, va) {
                    continue;
                }
                let van = vavg_update_raw(stage.s_k, va, v, ds);
                let mut best = inf;
                if stage.last {
                    for it in 0..nt {
                        best = best.min(stage_cost[it] + stage.terminal(next_v[it], van));
                    }
                } else if van >= cfg.vavg_min && van <= cfg.vavg_max {
                    if let Some(aloc) = cfg.vavg_grid.locate(van) {
                        let next = &tables[k + 1];
                        for it in 0..nt {
                            if let Some(vloc) = next_loc[it] {
                                best = best.min(stage_cost[it] + bilinear(next, na, vloc, aloc, inf));
                            }
                        }
                    }
                }
                table[iv * na + ia] = best.min(inf);
            }
        }
        tables[k] = table;
    }

    // Forward rollout from the continuous initial state.
    let mut traj = Trajectory::start(ds, cfg.v_i);
    let mut cost = 0.0;
    for k in 0..steps {
        let stage = Stage { params, cfg, s_k: k as f64 * ds, phi: road.grade_at(k), last: k + 1 == steps };
        let v = traj.v[k];
        let va = traj.vavg[k];
        let van = vavg_update_raw(stage.s_k, va, v, ds);
        let aloc = if van >= cfg.vavg_min && van <= cfg.vavg_max { cfg.vavg_grid.locate(van) } else { None };
        let mut best: Option<(f64, f64, f64, f64)> = None;
        for &te in tg {
            let vn = params.step_raw(v, te, stage.phi);
            let fuel = params.fuel_space_raw(v, te);
            let tail = if stage.last {
                stage.terminal(vn, van)
            } else {
                match (aloc, cfg.v_grid.locate(vn)) {
                    (Some(a), Some(vl)) if vn >= params.v_min && vn <= params.v_max => {
                        bilinear(&tables[k + 1], na, vl, a, inf)
                    }
                    _ => inf,
                }
            };
            let total = fuel * ds + tail;
            if best.is_none_or(|b| total < b.0) {
                best = Some((total, te, fuel, vn));
            }
        }
        let (total, te, fuel, vn) = best.expect("torque grid is non-empty");
        if total >= inf {
            return Err(DpError::Infeasible { step: k, v, vavg: va });
        }
        cost += fuel * ds;
        traj.push(te, fuel, vn);
    }
    let final_va = traj.vavg[steps];
    cost += cfg.terminal_slope * (cfg.v_ref - final_va).max(0.0);
    let total_fuel = traj.total_fuel();
    Ok(DpSolution {
        trajectory: traj,
        total_fuel,
        cost,
        cost_to_go: cfg.keep_cost_to_go.then_some(tables),
    })
}

/// Open-loop forward simulation of a torque sequence through the nonlinear plant.
pub fn replay(params: &VehicleParams, road: &RoadProfile, torque: &[f64], v_i: f64) -> Result<Trajectory, DpError> {
    if torque.len() != road.steps() {
        return Err(DpError::LengthMismatch { expected: road.steps(), got: torque.len() });
    }
    if !(v_i > 0.0) {
        return Err(DpError::NonPositiveVelocity { v: v_i, vavg: v_i });
    }
    let mut traj = Trajectory::start(params.ds, v_i);
    for (k, &te) in torque.iter().enumerate() {
        let v = traj.v[k];
        let vn = params.space_step(v, te, road.grade_at(k))?;
        traj.push(te, params.fuel_space_raw(v, te), vn);
    }
    Ok(traj)
}
