//! Closed-loop simulation on the nonlinear plant.
//!
//! Every controller drives the same plant: one forward-Euler space step of
//! `ds` per road sample with fuel integrated as `rate·ds`. MPC controllers
//! re-solve the QP each step and apply only the first torque.

use alloc::vec::Vec;

use thiserror::Error;

use crate::inverse::GammaSeries;
use crate::mpc::{MpcConfig, MpcError, MpcProblem};
use crate::nn::{MlpModel, NnError};
use crate::road::RoadProfile;
use crate::trajectory::Trajectory;
use crate::vehicle::{VehicleError, VehicleParams};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("{0} controller needs an artifact that was not supplied")]
    MissingArtifact(&'static str),
    #[error("DP torque sequence has {got} entries, road has {need} steps")]
    ReplayLength { got: usize, need: usize },
    #[error("invalid controller: {0}")]
    InvalidController(&'static str),
    #[error("plant failure at step {step} ({position_m} m): {source}")]
    Plant { step: usize, position_m: f64, source: VehicleError },
    #[error("MPC failure at step {step} ({position_m} m): {source}")]
    Mpc { step: usize, position_m: f64, source: MpcError },
    #[error("gamma prediction failed at step {step}: {source}")]
    Predict { step: usize, source: NnError },
    #[error(transparent)]
    Vehicle(#[from] VehicleError),
}

/// Wall-clock hook for per-step controller latency; the core crate has no
/// clock of its own.
pub trait StepTimer {
    fn start(&mut self);
    /// Seconds since the matching `start`.
    fn stop(&mut self) -> f64;
}

/// Records zero for every step.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoTimer;

impl StepTimer for NoTimer {
    fn start(&mut self) {}
    fn stop(&mut self) -> f64 {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ControllerKind {
    /// MPC with the weight predicted online from the grade preview.
    AtMpc,
    /// MPC with the weight read from a precomputed series.
    PtMpc,
    FixedLmpc { gamma: f64 },
    Pi { kp: f64, ki: f64 },
    /// Open-loop replay of the DP torque sequence.
    DpReplay,
}

impl ControllerKind {
    pub const DEFAULT_PI: Self = Self::Pi { kp: 200.0, ki: 20.0 };

    pub fn label(&self) -> &'static str {
        match self {
            Self::AtMpc => "at_mpc",
            Self::PtMpc => "pt_mpc",
            Self::FixedLmpc { .. } => "lmpc",
            Self::Pi { .. } => "pi",
            Self::DpReplay => "dp",
        }
    }

    pub fn fixed_gamma(&self) -> Option<f64> {
        match *self {
            Self::FixedLmpc { gamma } => Some(gamma),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerSpec {
    pub kind: ControllerKind,
    pub v_ref: f64,
    pub v_i: f64,
    pub mpc: MpcConfig,
    /// Grade samples fed to the weight predictor.
    pub preview_len: usize,
    /// Series and predicted weights are clipped to `[0, gamma_max]`.
    pub gamma_max: f64,
}

impl ControllerSpec {
    pub fn new(kind: ControllerKind, v_ref: f64) -> Self {
        Self { kind, v_ref, v_i: v_ref, mpc: MpcConfig::default(), preview_len: 100, gamma_max: 0.05 }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        match self.kind {
            ControllerKind::FixedLmpc { gamma } if !(gamma >= 0.0 && gamma.is_finite()) => {
                Err(SimError::InvalidController("fixed LMPC weight must be non-negative"))
            }
            ControllerKind::Pi { kp, ki } if !(kp > 0.0 && ki > 0.0) => {
                Err(SimError::InvalidController("PI gains must be positive"))
            }
            _ if !(self.v_ref > 0.0 && self.v_i > 0.0) => Err(SimError::InvalidController("speeds must be positive")),
            _ => Ok(()),
        }
    }
}

/// Trained or precomputed inputs some controllers need.
#[derive(Debug, Clone, Copy, Default)]
pub struct Artifacts<'a> {
    pub model: Option<&'a MlpModel>,
    pub gamma_series: Option<&'a GammaSeries>,
    pub dp_torque: Option<&'a [f64]>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub distance_km: f64,
    pub total_fuel_kg: f64,
    pub avg_velocity_mps: f64,
    /// km per kg; infinite for a zero-fuel run.
    pub fuel_economy_km_per_kg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimResult {
    pub controller: ControllerKind,
    pub trajectory: Trajectory,
    pub total_fuel_kg: f64,
    pub distance_km: f64,
    pub avg_velocity_mps: f64,
    pub fuel_economy_km_per_kg: f64,
    /// Same metrics with the first `TRANSIENT_M` metres dropped.
    pub after_transient: Summary,
    pub step_runtimes: Vec<f64>,
    /// Weight used at each step (MPC controllers only).
    pub gammas: Vec<f64>,
}

impl SimResult {
    pub fn median_step_s(&self) -> f64 {
        median(&self.step_runtimes)
    }

    pub fn summary(&self) -> Summary {
        Summary {
            distance_km: self.distance_km,
            total_fuel_kg: self.total_fuel_kg,
            avg_velocity_mps: self.avg_velocity_mps,
            fuel_economy_km_per_kg: self.fuel_economy_km_per_kg,
        }
    }
}

pub const TRANSIENT_M: f64 = 500.0;

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Distance, fuel, harmonic average speed and economy, skipping segments
/// that start before `skip_m`.
pub fn metrics(traj: &Trajectory, skip_m: f64) -> Summary {
    let first = (0..traj.steps()).find(|&k| traj.position(k) >= skip_m).unwrap_or(traj.steps());
    let ds = traj.ds;
    let segs = traj.steps() - first;
    let distance = segs as f64 * ds;
    let time: f64 = traj.v[first..traj.steps()].iter().map(|v| ds / v).sum();
    let fuel: f64 = traj.fuel[first..].iter().sum::<f64>() * ds;
    let avg = if time > 0.0 { distance / time } else { 0.0 };
    let km = distance / 1000.0;
    let economy = if fuel > 0.0 { km / fuel } else { f64::INFINITY };
    Summary { distance_km: km, total_fuel_kg: fuel, avg_velocity_mps: avg, fuel_economy_km_per_kg: economy }
}

/// PI speed controller with conditional-integration anti-windup.
#[derive(Debug, Clone, Copy)]
pub struct PiController {
    pub kp: f64,
    pub ki: f64,
    pub v_ref: f64,
    pub integral: f64,
    pub te_min: f64,
    pub te_max: f64,
}

impl PiController {
    pub fn new(kp: f64, ki: f64, v_ref: f64, params: &VehicleParams) -> Self {
        Self {
            kp,
            ki,
            v_ref,
            integral: params.equilibrium_torque(v_ref),
            te_min: params.te_min,
            te_max: params.te_max,
        }
    }

    /// Torque for the next segment; `dt` is the time the previous one took.
    pub fn step(&mut self, v: f64, dt: f64) -> f64 {
        let e = self.v_ref - v;
        let candidate = self.integral + self.ki * e * dt;
        let raw = self.kp * e + candidate;
        let saturated_high = raw > self.te_max && e > 0.0;
        let saturated_low = raw < self.te_min && e < 0.0;
        if !(saturated_high || saturated_low) {
            self.integral = candidate;
        }
        (self.kp * e + self.integral).clamp(self.te_min, self.te_max)
    }
}

enum GammaSource<'a> {
    Fixed(f64),
    Series(&'a GammaSeries),
    Model(&'a MlpModel),
}

/// Drive the whole road with `spec`.
pub fn run(
    spec: &ControllerSpec,
    road: &RoadProfile,
    params: &VehicleParams,
    artifacts: &Artifacts<'_>,
    timer: &mut dyn StepTimer,
) -> Result<SimResult, SimError> {
    spec.validate()?;
    params.validate()?;
    let p = road.steps();
    let ds = road.ds();
    let mut traj = Trajectory::start(ds, spec.v_i);
    let mut runtimes = Vec::with_capacity(p);
    let mut gammas = Vec::new();

    let plant = |traj: &mut Trajectory, k: usize, te: f64| -> Result<(), SimError> {
        let v = traj.v[k];
        let phi = road.grade_at(k);
        let next = params
            .space_step(v, te, phi)
            .map_err(|source| SimError::Plant { step: k, position_m: road.position(k), source })?;
        traj.push(te, params.fuel_space_raw(v, te), next);
        Ok(())
    };

    match spec.kind {
        ControllerKind::DpReplay => {
            let torque = artifacts.dp_torque.ok_or(SimError::MissingArtifact("dp"))?;
            if torque.len() < p {
                return Err(SimError::ReplayLength { got: torque.len(), need: p });
            }
            for (k, &te) in torque.iter().take(p).enumerate() {
                timer.start();
                runtimes.push(timer.stop());
                plant(&mut traj, k, te)?;
            }
        }
        ControllerKind::Pi { kp, ki } => {
            let mut pi = PiController::new(kp, ki, spec.v_ref, params);
            let mut dt = 0.0;
            for k in 0..p {
                timer.start();
                let te = pi.step(traj.v[k], dt);
                runtimes.push(timer.stop());
                plant(&mut traj, k, te)?;
                dt = ds / traj.v[k];
            }
        }
        kind => {
            let source = match kind {
                ControllerKind::FixedLmpc { gamma } => GammaSource::Fixed(gamma),
                ControllerKind::PtMpc => GammaSource::Series(artifacts.gamma_series.ok_or(SimError::MissingArtifact("pt_mpc"))?),
                _ => GammaSource::Model(artifacts.model.ok_or(SimError::MissingArtifact("at_mpc"))?),
            };
            let lin = params.linearize(spec.v_ref)?;
            let n = spec.mpc.horizon;
            let mut warm: Option<Vec<f64>> = None;
            for k in 0..p {
                timer.start();
                let gamma = match source {
                    GammaSource::Fixed(g) => g,
                    GammaSource::Series(s) => s.at(k).clamp(0.0, spec.gamma_max),
                    GammaSource::Model(m) => {
                        let preview = road.preview(k, spec.preview_len);
                        m.predict(&preview.samples, spec.v_ref)
                            .map_err(|source| SimError::Predict { step: k, source })?
                            .clamp(0.0, spec.gamma_max)
                    }
                };
                let window = road.preview(k, n);
                let mpc_err = |source| SimError::Mpc { step: k, position_m: road.position(k), source };
                let prob =
                    MpcProblem::build(gamma, &lin, &window.samples, traj.v[k] - lin.v_lin, params, &spec.mpc).map_err(mpc_err)?;
                let sol = match prob.solve(warm.as_deref()) {
                    Ok(s) => s,
                    Err(_) if warm.is_some() => prob.solve(None).map_err(mpc_err)?,
                    Err(e) => return Err(mpc_err(e)),
                };
                runtimes.push(timer.stop());
                let mut next_warm = sol.te[1..].to_vec();
                next_warm.push(sol.te[n - 1]);
                warm = Some(next_warm);
                gammas.push(gamma);
                let te = (lin.te_lin + sol.te[0]).clamp(params.te_min, params.te_max);
                plant(&mut traj, k, te)?;
            }
        }
    }

    let all = metrics(&traj, 0.0);
    Ok(SimResult {
        controller: spec.kind,
        after_transient: metrics(&traj, TRANSIENT_M),
        trajectory: traj,
        total_fuel_kg: all.total_fuel_kg,
        distance_km: all.distance_km,
        avg_velocity_mps: all.avg_velocity_mps,
        fuel_economy_km_per_kg: all.fuel_economy_km_per_kg,
        step_runtimes: runtimes,
        gammas,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn harmonic_average() {
        let mut t = Trajectory::start(1500.0, 20.0);
        t.push(0.0, 0.0, 30.0);
        t.push(0.0, 0.0, 30.0);
        let m = metrics(&t, 0.0);
        assert_relative_eq!(m.avg_velocity_mps, 24.0, max_relative = 1e-15);
        assert!(m.fuel_economy_km_per_kg.is_infinite());
    }

    #[test]
    fn constant_speed_average_is_exact() {
        let mut t = Trajectory::start(30.0, 30.0);
        for _ in 0..100 {
            t.push(120.0, 1e-4, 30.0);
        }
        let m = metrics(&t, 0.0);
        assert_eq!(m.avg_velocity_mps, 30.0);
        assert_relative_eq!(m.distance_km, 3.0);
        let late = metrics(&t, 500.0);
        assert_relative_eq!(late.distance_km, 2.49);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(&[]), 0.0);
    }

    #[test]
    fn pi_on_flat_road_holds_speed() {
        let params = VehicleParams::default();
        let road = RoadProfile::flat(30.0, 200);
        let spec = ControllerSpec::new(ControllerKind::DEFAULT_PI, 30.0);
        let r = run(&spec, &road, &params, &Artifacts::default(), &mut NoTimer).unwrap();
        assert!(r.trajectory.v.iter().all(|v| (v - 30.0).abs() < 1e-9));
    }

    #[test]
    fn missing_artifacts_are_reported() {
        let params = VehicleParams::default();
        let road = RoadProfile::flat(30.0, 10);
        for kind in [ControllerKind::AtMpc, ControllerKind::PtMpc, ControllerKind::DpReplay] {
            let spec = ControllerSpec::new(kind, 30.0);
            assert!(matches!(
                run(&spec, &road, &params, &Artifacts::default(), &mut NoTimer),
                Err(SimError::MissingArtifact(_))
            ));
        }
    }
}
