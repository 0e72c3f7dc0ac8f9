use std::path::Path;

use ecocruise::io::{
    parse_model, read_dataset, read_gamma, read_road, read_trajectory, render_dataset, render_gamma, render_model,
    render_road, render_trajectory, write_atomic, Meta, Table,
};
use ecocruise::sweep::{parse_sweep, render_sweep, SweepRow};
use ecocruise::Error;
use ecocruise_core::road::gen_sinusoidal;
use ecocruise_core::{Dataset, GammaFlags, GammaSeries, GeneratorSpec, MlpModel, MinMaxScaler, Trajectory};

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-8 * (1.0 + a.abs().max(b.abs()))
}

#[test]
fn road_survives_a_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let road = gen_sinusoidal(9, 4000.0, &GeneratorSpec::default()).unwrap();
    let path = dir.path().join("road.csv");
    write_atomic(&path, &render_road(&road, &Meta::new().with("seed", 9))).unwrap();
    let (back, meta) = read_road(&path).unwrap();
    assert_eq!(meta.get("seed"), Some("9"));
    assert_eq!(back.steps(), road.steps());
    assert_eq!(back.ds(), road.ds());
    for (a, b) in back.elevation().iter().zip(road.elevation()) {
        assert!(close(*a, *b));
    }
    assert!(!dir.path().join("road.csv.partial").exists());
}

#[test]
fn trajectory_round_trip() {
    let mut t = Trajectory::start(30.0, 30.0);
    for k in 0..20 {
        t.push(100.0 + k as f64, 1e-4 * (1.0 + 0.01 * k as f64), 30.0 + 0.05 * k as f64);
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("dp.csv");
    write_atomic(&path, &render_trajectory(&t, &Meta::new())).unwrap();
    let (back, _) = read_trajectory(&path).unwrap();
    assert_eq!(back.steps(), 20);
    for k in 0..20 {
        assert!(close(back.te[k], t.te[k]) && close(back.fuel[k], t.fuel[k]) && close(back.v[k + 1], t.v[k + 1]));
    }
}

#[test]
fn gamma_series_round_trip_keeps_flags() {
    let series = GammaSeries {
        positions: vec![0, 1, 2],
        gamma: vec![0.001, 0.05, 0.0],
        residuals: vec![1e-9, 2e-3, 0.5],
        flags: vec![GammaFlags::NONE, GammaFlags::CLAMPED, GammaFlags::DEGENERATE | GammaFlags::CLAMPED],
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("gamma.csv");
    write_atomic(&path, &render_gamma(&series, 30.0, &Meta::new())).unwrap();
    let (back, _) = read_gamma(&path).unwrap();
    assert_eq!(back.positions, series.positions);
    assert_eq!(back.flags, series.flags);
    assert!(back.gamma.iter().zip(&series.gamma).all(|(a, b)| close(*a, *b)));
}

#[test]
fn dataset_round_trip() {
    let mut d = Dataset::new(3);
    for i in 0..5 {
        d.push(&[0.01 * i as f64, -0.02, 30.0], 1e-3 * i as f64, i).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.csv");
    write_atomic(&path, &render_dataset(&d, &Meta::new())).unwrap();
    let (back, _) = read_dataset(&path).unwrap();
    assert_eq!(back.dim, 3);
    assert_eq!(back.len(), 5);
    assert!(back.features.iter().zip(&d.features).all(|(a, b)| close(*a, *b)));
    assert!(back.targets.iter().zip(&d.targets).all(|(a, b)| close(*a, *b)));
}

#[test]
fn model_round_trip_is_bit_exact() {
    let mut m = MlpModel::new(&[4, 7, 3, 1], 5).unwrap();
    m.input_scaler = MinMaxScaler { min: vec![0.1, -0.2, 1.0 / 3.0, 30.0], range: vec![0.7, 0.4, 1.0, 1.0] };
    m.target_scaler = MinMaxScaler { min: vec![0.0], range: vec![0.05] };
    m.scaler_provenance = 0xdead_beef;
    m.config_fingerprint = 42;
    let text = render_model(&m, &Meta::new());
    let (back, _) = parse_model(Path::new("m.txt"), &text).unwrap();
    assert_eq!(back, m);
    let x = [0.3, -0.1, 0.5, 30.0];
    assert_eq!(back.predict_row(&x).unwrap(), m.predict_row(&x).unwrap());
}

#[test]
fn truncated_model_is_a_parse_error() {
    let m = MlpModel::new(&[2, 3, 1], 1).unwrap();
    let text = render_model(&m, &Meta::new());
    let cut: String = text.lines().take(text.lines().count() - 2).collect::<Vec<_>>().join("\n");
    let err = parse_model(Path::new("m.txt"), &cut).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn sweep_round_trip_with_a_failed_row() {
    let rows = vec![
        SweepRow {
            controller: "lmpc".into(),
            gamma: Some(0.01),
            avg_velocity_mps: 30.5,
            fuel_economy_km_per_kg: 22.25,
            total_fuel_kg: 1.3,
            median_step_s: 5e-4,
            error: None,
        },
        SweepRow {
            controller: "at_mpc".into(),
            gamma: None,
            avg_velocity_mps: f64::NAN,
            fuel_economy_km_per_kg: f64::NAN,
            total_fuel_kg: f64::NAN,
            median_step_s: f64::NAN,
            error: Some("MPC failure at step 3".into()),
        },
    ];
    let text = render_sweep(&rows, &Meta::new());
    let (back, _) = parse_sweep(Path::new("s.csv"), &text).unwrap();
    assert_eq!(back.len(), 2);
    assert_eq!(back[0], rows[0]);
    assert!(!back[1].ok());
    assert_eq!(back[1].error.as_deref(), Some("MPC failure at step 3"));
}

#[test]
fn bad_numbers_report_their_line() {
    let text = "# generator: x\nindex,position_m,elevation_m,grade\n0,0,1,0.1\n1,30,oops,\n";
    let t = Table::parse(Path::new("r.csv"), text).unwrap();
    let (line, rec) = &t.rows[1];
    match t.num(*line, rec, 2) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
        other => panic!("{other:?}"),
    }
}
