//! Controller comparison sweeps and the Pareto front they trace.

use std::path::Path;
use std::time::Instant;

use ecocruise_core::sim::{self, StepTimer};
use ecocruise_core::{Artifacts, ControllerKind, ControllerSpec, MpcConfig, RoadProfile, SimError, SimResult, VehicleParams};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::{g9, render_csv, Meta, Table};

/// Per-step latency from the monotonic clock.
#[derive(Debug, Default)]
pub struct WallTimer(Option<Instant>);

impl StepTimer for WallTimer {
    fn start(&mut self) {
        self.0 = Some(Instant::now());
    }

    fn stop(&mut self) -> f64 {
        self.0.take().map_or(0.0, |t| t.elapsed().as_secs_f64())
    }
}

/// Shared settings for every run in a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSetup {
    pub v_ref: f64,
    pub mpc: MpcConfig,
    pub preview_len: usize,
    pub gamma_max: f64,
    pub pi: ControllerKind,
}

impl SweepSetup {
    pub fn new(v_ref: f64) -> Self {
        Self { v_ref, mpc: MpcConfig::default(), preview_len: 100, gamma_max: 0.05, pi: ControllerKind::DEFAULT_PI }
    }

    pub fn spec(&self, kind: ControllerKind) -> ControllerSpec {
        ControllerSpec {
            mpc: self.mpc,
            preview_len: self.preview_len,
            gamma_max: self.gamma_max,
            ..ControllerSpec::new(kind, self.v_ref)
        }
    }

    /// The ladder's fixed-weight runs followed by AT-MPC, PT-MPC, PI and DP replay.
    pub fn kinds(&self, ladder: &[f64]) -> Vec<ControllerKind> {
        let mut k: Vec<ControllerKind> = ladder.iter().map(|&gamma| ControllerKind::FixedLmpc { gamma }).collect();
        k.extend([ControllerKind::AtMpc, ControllerKind::PtMpc, self.pi, ControllerKind::DpReplay]);
        k
    }
}

pub fn simulate(
    setup: &SweepSetup,
    kind: ControllerKind,
    road: &RoadProfile,
    params: &VehicleParams,
    artifacts: &Artifacts<'_>,
) -> Result<SimResult, SimError> {
    sim::run(&setup.spec(kind), road, params, artifacts, &mut WallTimer::default())
}

pub struct SweepRun {
    pub kind: ControllerKind,
    pub result: Result<SimResult, SimError>,
}

impl SweepRun {
    pub fn row(&self) -> SweepRow {
        let mut row = SweepRow {
            controller: self.kind.label().to_string(),
            gamma: self.kind.fixed_gamma(),
            avg_velocity_mps: f64::NAN,
            fuel_economy_km_per_kg: f64::NAN,
            total_fuel_kg: f64::NAN,
            median_step_s: f64::NAN,
            error: None,
        };
        match &self.result {
            Ok(r) => {
                row.avg_velocity_mps = r.avg_velocity_mps;
                row.fuel_economy_km_per_kg = r.fuel_economy_km_per_kg;
                row.total_fuel_kg = r.total_fuel_kg;
                row.median_step_s = r.median_step_s();
            }
            Err(e) => row.error = Some(e.to_string()),
        }
        row
    }
}

/// Runs every controller concurrently; a failing run is kept as a failed
/// row and the remaining runs continue.
pub fn pareto_sweep(
    setup: &SweepSetup,
    road: &RoadProfile,
    params: &VehicleParams,
    ladder: &[f64],
    artifacts: &Artifacts<'_>,
) -> Result<Vec<SweepRun>> {
    if ladder.is_empty() {
        return Err(Error::Validation("gamma ladder is empty".into()));
    }
    if ladder.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Validation("gamma ladder must be strictly ascending".into()));
    }
    Ok(setup
        .kinds(ladder)
        .into_par_iter()
        .map(|kind| SweepRun { kind, result: simulate(setup, kind, road, params, artifacts) })
        .collect())
}

pub const SWEEP_HEADER: [&str; 6] =
    ["controller", "gamma", "avg_velocity_mps", "fuel_economy_km_per_kg", "total_fuel_kg", "median_step_s"];

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub controller: String,
    pub gamma: Option<f64>,
    pub avg_velocity_mps: f64,
    pub fuel_economy_km_per_kg: f64,
    pub total_fuel_kg: f64,
    pub median_step_s: f64,
    pub error: Option<String>,
}

impl SweepRow {
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }

    fn label(&self) -> String {
        match self.gamma {
            Some(g) => format!("{} {}", self.controller, g9(g)),
            None => self.controller.clone(),
        }
    }
}

/// Failed rows keep their controller and weight with empty metrics; the
/// messages follow the table as `# failed ...` comment lines.
pub fn render_sweep(rows: &[SweepRow], meta: &Meta) -> String {
    let cell = |x: f64, ok: bool| if ok { g9(x) } else { String::new() };
    let body = rows.iter().map(|r| {
        let ok = r.ok();
        [
            r.controller.clone(),
            r.gamma.map_or(String::new(), g9),
            cell(r.avg_velocity_mps, ok),
            cell(r.fuel_economy_km_per_kg, ok),
            cell(r.total_fuel_kg, ok),
            cell(r.median_step_s, ok),
        ]
    });
    let mut s = render_csv(meta, &SWEEP_HEADER, body);
    for r in rows {
        if let Some(e) = &r.error {
            s.push_str(&format!("# failed {}: {}\n", r.label(), e.replace('\n', " ")));
        }
    }
    s
}

pub fn parse_sweep(path: &Path, text: &str) -> Result<(Vec<SweepRow>, Meta)> {
    // A sweep that produced nothing may be saved as metadata only, or not at all.
    if text.lines().all(|l| l.trim().is_empty() || l.starts_with('#')) {
        return Ok((Vec::new(), Meta::parse(text)));
    }
    let t = Table::parse(path, text)?;
    t.expect_header(&SWEEP_HEADER)?;
    let failures: Vec<(String, String)> = text
        .lines()
        .filter_map(|l| l.strip_prefix("# failed "))
        .filter_map(|l| l.split_once(": "))
        .map(|(who, why)| (who.to_string(), why.to_string()))
        .collect();
    let mut rows = Vec::with_capacity(t.rows.len());
    for (line, rec) in &t.rows {
        let controller = rec.get(0).unwrap_or("").to_string();
        if controller.is_empty() {
            return Err(Error::parse(path, *line, "empty controller"));
        }
        let metrics = [2, 3, 4, 5].map(|c| t.opt_num(*line, rec, c));
        let mut row = SweepRow {
            controller,
            gamma: t.opt_num(*line, rec, 1)?,
            avg_velocity_mps: f64::NAN,
            fuel_economy_km_per_kg: f64::NAN,
            total_fuel_kg: f64::NAN,
            median_step_s: f64::NAN,
            error: None,
        };
        match metrics {
            [Ok(Some(v)), Ok(Some(e)), Ok(Some(f)), Ok(Some(m))] => {
                row.avg_velocity_mps = v;
                row.fuel_economy_km_per_kg = e;
                row.total_fuel_kg = f;
                row.median_step_s = m;
            }
            [Ok(None), Ok(None), Ok(None), Ok(None)] => {
                let label = row.label();
                let why = failures.iter().find(|(w, _)| *w == label).map_or("run failed", |(_, m)| m.as_str());
                row.error = Some(why.to_string());
            }
            [a, b, c, d] => {
                for r in [a, b, c, d] {
                    r?;
                }
                return Err(Error::parse(path, *line, "metrics must be all present or all empty"));
            }
        }
        rows.push(row);
    }
    Ok((rows, t.meta))
}

pub fn read_sweep(path: &Path) -> Result<(Vec<SweepRow>, Meta)> {
    parse_sweep(path, &crate::io::read_text(path)?)
}

/// Successful fixed-weight rows as `(avg velocity, fuel economy)`, sorted by velocity.
pub fn lmpc_front(rows: &[SweepRow]) -> Vec<(f64, f64)> {
    let mut f: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.ok() && r.controller == "lmpc")
        .map(|r| (r.avg_velocity_mps, r.fuel_economy_km_per_kg))
        .collect();
    f.sort_by(|a, b| a.0.total_cmp(&b.0));
    f
}

/// Economy on the piecewise-linear front at velocity `v`, if inside its span.
pub fn front_at(front: &[(f64, f64)], v: f64) -> Option<f64> {
    let (first, last) = (front.first()?, front.last()?);
    if v < first.0 || v > last.0 {
        return None;
    }
    for w in front.windows(2) {
        let ((v0, e0), (v1, e1)) = (w[0], w[1]);
        if v <= v1 {
            return Some(if v1 > v0 { e0 + (e1 - e0) * (v - v0) / (v1 - v0) } else { e0.max(e1) });
        }
    }
    Some(last.1)
}

/// Smallest relative economy gap `|e_front(v') − econ| / e_front(v')` over
/// front velocities `v'` within `tol_v` of `v`; `None` when the window
/// misses the front.
pub fn front_gap(front: &[(f64, f64)], v: f64, econ: f64, tol_v: f64) -> Option<f64> {
    let lo = v - tol_v;
    let hi = v + tol_v;
    let gap = |e: f64| (e - econ).abs() / e;
    if front.len() == 1 {
        let (fv, fe) = front[0];
        return (fv >= lo && fv <= hi).then(|| gap(fe));
    }
    let mut best: Option<f64> = None;
    let mut take = |g: f64| best = Some(best.map_or(g, |b: f64| b.min(g)));
    for w in front.windows(2) {
        let ((v0, e0), (v1, e1)) = (w[0], w[1]);
        let (a, b) = (v0.max(lo), v1.min(hi));
        if a > b {
            continue;
        }
        let at = |x: f64| if v1 > v0 { e0 + (e1 - e0) * (x - v0) / (v1 - v0) } else { e0 };
        let (ea, eb) = (at(a), at(b));
        // The relative gap is monotone on either side of a crossing.
        if (ea - econ) * (eb - econ) <= 0.0 {
            take(0.0);
        } else {
            take(gap(ea).min(gap(eb)));
        }
    }
    best
}

/// Largest economy drop when moving to a slower ladder point; zero for a
/// front whose economy never falls as average velocity decreases.
pub fn front_violation(front: &[(f64, f64)]) -> f64 {
    front.windows(2).map(|w| (w[1].1 - w[0].1) / w[0].1).fold(0.0, f64::max)
}
