//! Text summary of a sweep and plot-ready CSV exports.

use std::fmt::Write as _;

use crate::io::{g9, render_csv, Meta};
use crate::sweep::{front_gap, lmpc_front, SweepRow};

/// Matched-velocity window when placing a point against the fixed-weight front.
pub const FRONT_TOL_MPS: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub label: String,
    pub avg_velocity_mps: f64,
    pub fuel_economy_km_per_kg: f64,
    /// Economy gain over the PI baseline in percent.
    pub vs_pi_pct: Option<f64>,
    /// Relative economy distance to the fixed-weight front.
    pub front_gap: Option<f64>,
}

pub fn compare(rows: &[SweepRow]) -> Vec<Comparison> {
    let pi = rows.iter().find(|r| r.ok() && r.controller == "pi").map(|r| r.fuel_economy_km_per_kg);
    let front = lmpc_front(rows);
    rows.iter()
        .filter(|r| r.ok())
        .map(|r| Comparison {
            label: match r.gamma {
                Some(g) => format!("{} γ={}", r.controller, g9(g)),
                None => r.controller.clone(),
            },
            avg_velocity_mps: r.avg_velocity_mps,
            fuel_economy_km_per_kg: r.fuel_economy_km_per_kg,
            vs_pi_pct: pi.map(|p| 100.0 * (r.fuel_economy_km_per_kg / p - 1.0)),
            front_gap: if r.controller == "lmpc" {
                None
            } else {
                front_gap(&front, r.avg_velocity_mps, r.fuel_economy_km_per_kg, FRONT_TOL_MPS)
            },
        })
        .collect()
}

pub fn render(title: &str, rows: &[SweepRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "== {title}");
    if rows.is_empty() {
        let _ = writeln!(s, "sweep has no rows; nothing to report");
        return s;
    }
    let dp = rows.iter().find(|r| r.ok() && r.controller == "dp");
    let pi = rows.iter().find(|r| r.ok() && r.controller == "pi");
    if let (Some(dp), Some(pi)) = (dp, pi) {
        let _ = writeln!(
            s,
            "DP vs PI fuel economy: {:+.2}% ({:.3} vs {:.3} km/kg)",
            100.0 * (dp.fuel_economy_km_per_kg / pi.fuel_economy_km_per_kg - 1.0),
            dp.fuel_economy_km_per_kg,
            pi.fuel_economy_km_per_kg
        );
    }
    let _ = writeln!(s, "{:<22} {:>9} {:>10} {:>9} {:>10}", "controller", "v_avg", "km/kg", "vs PI", "front gap");
    for c in compare(rows) {
        let pct = c.vs_pi_pct.map_or("-".into(), |p| format!("{p:+.2}%"));
        let gap = c.front_gap.map_or("-".into(), |g| format!("{:.2}%", 100.0 * g));
        let _ = writeln!(
            s,
            "{:<22} {:>9.3} {:>10.3} {:>9} {:>10}",
            c.label, c.avg_velocity_mps, c.fuel_economy_km_per_kg, pct, gap
        );
    }
    for r in rows.iter().filter(|r| !r.ok()) {
        let _ = writeln!(s, "failed {}: {}", r.controller, r.error.as_deref().unwrap_or(""));
    }
    if let Some(m) = rows.iter().filter(|r| r.ok() && r.controller == "at_mpc").map(|r| r.median_step_s).next() {
        let _ = writeln!(s, "median AT-MPC step: {:.3} ms", 1e3 * m);
    }
    s
}

pub const PLOT_HEADER: [&str; 4] = ["series", "gamma", "avg_velocity_mps", "fuel_economy_km_per_kg"];

/// One scatter panel: every successful row tagged with its series name.
pub fn plot_csv(rows: &[SweepRow], meta: &Meta) -> String {
    let body = rows.iter().filter(|r| r.ok()).map(|r| {
        [r.controller.clone(), r.gamma.map_or(String::new(), g9), g9(r.avg_velocity_mps), g9(r.fuel_economy_km_per_kg)]
    });
    render_csv(meta, &PLOT_HEADER, body)
}
