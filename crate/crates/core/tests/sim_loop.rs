use ecocruise_core::road::gen_sinusoidal;
use ecocruise_core::sim::{run, NoTimer};
use ecocruise_core::{
    dp, Artifacts, ControllerKind, ControllerSpec, DpConfig, GammaFlags, GammaSeries, GeneratorSpec, RoadProfile,
    SimError, VehicleParams,
};

fn hilly(seed: u64, km: f64) -> RoadProfile {
    gen_sinusoidal(seed, km * 1000.0, &GeneratorSpec::default()).unwrap()
}

fn drive(kind: ControllerKind, road: &RoadProfile, art: &Artifacts<'_>) -> Result<ecocruise_core::SimResult, SimError> {
    run(&ControllerSpec::new(kind, 30.0), road, &VehicleParams::default(), art, &mut NoTimer)
}

#[test]
fn dp_replay_reproduces_the_dp_fuel() {
    let p = VehicleParams::default();
    let road = hilly(3, 3.0);
    let cfg = DpConfig::new(&p, 30.0).unwrap();
    let sol = dp::solve(&p, &road, &cfg).unwrap();
    let art = Artifacts { dp_torque: Some(&sol.trajectory.te), ..Artifacts::default() };
    let r = drive(ControllerKind::DpReplay, &road, &art).unwrap();
    assert!((r.total_fuel_kg - sol.total_fuel).abs() <= 1e-12 * sol.total_fuel);
    assert_eq!(r.trajectory.v, sol.trajectory.v);
}

#[test]
fn constant_series_matches_fixed_weight() {
    let road = hilly(4, 3.0);
    let n = road.steps();
    let series = GammaSeries {
        positions: (0..n).collect(),
        gamma: vec![0.01; n],
        residuals: vec![0.0; n],
        flags: vec![GammaFlags::NONE; n],
    };
    let art = Artifacts { gamma_series: Some(&series), ..Artifacts::default() };
    let pt = drive(ControllerKind::PtMpc, &road, &art).unwrap();
    let fixed = drive(ControllerKind::FixedLmpc { gamma: 0.01 }, &road, &Artifacts::default()).unwrap();
    assert_eq!(pt.trajectory, fixed.trajectory);
    assert!(pt.gammas.iter().all(|&g| g == 0.01));
}

#[test]
fn pure_tracker_holds_the_set_point_on_flat_road() {
    let road = RoadProfile::flat(30.0, 200);
    let r = drive(ControllerKind::FixedLmpc { gamma: 0.0 }, &road, &Artifacts::default()).unwrap();
    assert!((r.avg_velocity_mps - 30.0).abs() < 1e-6, "{}", r.avg_velocity_mps);
}

#[test]
fn heavier_fuel_weight_drives_slower_and_leaner() {
    let road = hilly(5, 5.0);
    let runs: Vec<_> = [0.005, 0.02, 0.04]
        .iter()
        .map(|&g| drive(ControllerKind::FixedLmpc { gamma: g }, &road, &Artifacts::default()).unwrap())
        .collect();
    for w in runs.windows(2) {
        assert!(w[1].avg_velocity_mps < w[0].avg_velocity_mps);
        assert!(w[1].fuel_economy_km_per_kg > w[0].fuel_economy_km_per_kg);
    }
}

#[test]
fn controllers_stay_within_vehicle_bounds() {
    let p = VehicleParams::default();
    let road = hilly(6, 5.0);
    for kind in [ControllerKind::DEFAULT_PI, ControllerKind::FixedLmpc { gamma: 0.03 }] {
        let r = drive(kind, &road, &Artifacts::default()).unwrap();
        assert_eq!(r.trajectory.steps(), road.steps());
        assert!(r.trajectory.te.iter().all(|t| (p.te_min..=p.te_max).contains(t)));
        assert!(r.trajectory.v.iter().all(|v| (p.v_min..=p.v_max).contains(v)));
    }
}

#[test]
fn missing_artifacts_are_reported() {
    let road = hilly(7, 3.0);
    for (kind, name) in [(ControllerKind::AtMpc, "at_mpc"), (ControllerKind::PtMpc, "pt_mpc"), (ControllerKind::DpReplay, "dp")] {
        assert_eq!(drive(kind, &road, &Artifacts::default()).unwrap_err(), SimError::MissingArtifact(name));
    }
    let short = [100.0; 3];
    let art = Artifacts { dp_torque: Some(&short), ..Artifacts::default() };
    assert!(matches!(drive(ControllerKind::DpReplay, &road, &art), Err(SimError::ReplayLength { got: 3, .. })));
}

#[test]
fn summary_matches_the_recorded_trajectory() {
    let road = hilly(8, 4.0);
    let r = drive(ControllerKind::FixedLmpc { gamma: 0.01 }, &road, &Artifacts::default()).unwrap();
    let t = &r.trajectory;
    let distance = t.steps() as f64 * t.ds;
    assert!((r.avg_velocity_mps - distance / t.elapsed_time()).abs() <= 1e-9);
    assert!((r.fuel_economy_km_per_kg - distance / 1000.0 / r.total_fuel_kg).abs() <= 1e-9);
}

#[test]
fn no_controller_beats_dp_at_equal_or_higher_speed() {
    let p = VehicleParams::default();
    let cfg = DpConfig::new(&p, 30.0).unwrap();
    for seed in [11, 12, 13] {
        let road = hilly(seed, 5.0);
        let dp = dp::solve(&p, &road, &cfg).unwrap();
        let art = Artifacts { dp_torque: Some(&dp.trajectory.te), ..Artifacts::default() };
        let replay = drive(ControllerKind::DpReplay, &road, &art).unwrap();
        let rivals = [
            ControllerKind::DEFAULT_PI,
            ControllerKind::FixedLmpc { gamma: 0.003 },
            ControllerKind::FixedLmpc { gamma: 0.01 },
            ControllerKind::FixedLmpc { gamma: 0.03 },
        ];
        for kind in rivals {
            let r = drive(kind, &road, &Artifacts::default()).unwrap();
            if r.avg_velocity_mps >= replay.avg_velocity_mps {
                // Half a percent covers the DP grid interpolation.
                assert!(
                    r.total_fuel_kg >= replay.total_fuel_kg * (1.0 - 5e-3),
                    "road {seed}: {} used {} kg at {} m/s, DP {} kg at {} m/s",
                    kind.label(),
                    r.total_fuel_kg,
                    r.avg_velocity_mps,
                    replay.total_fuel_kg,
                    replay.avg_velocity_mps
                );
            }
        }
    }
}
