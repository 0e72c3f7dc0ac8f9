use ecocruise_core::dp::vavg_update;
use ecocruise_core::mpc::MpcProblem;
use ecocruise_core::{Grid, MinMaxScaler, MpcConfig, RoadProfile, VehicleParams};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn more_torque_or_less_grade_means_more_speed(
        v in 20.0f64..40.0, te in 0.0f64..299.0, dte in 0.01f64..1.0,
        phi in -0.05f64..0.05, dphi in 0.001f64..0.01,
    ) {
        let p = VehicleParams::default();
        let base = p.space_step(v, te, phi).unwrap();
        prop_assert!(p.space_step(v, te + dte, phi).unwrap() > base);
        prop_assert!(p.space_step(v, te, phi + dphi).unwrap() < base);
    }

    #[test]
    fn space_and_time_fuel_rates_agree(v in 20.0f64..40.0, te in 0.0f64..300.0) {
        let p = VehicleParams::default();
        let per_m = p.fuel_rate_space(v, te).unwrap();
        prop_assert!((per_m * v * 3600.0 - p.fuel_rate_time(v, te)).abs() <= 1e-12 * (1.0 + p.fuel_rate_time(v, te).abs()));
    }

    #[test]
    fn average_speed_stays_between_old_average_and_new_speed(
        k in 0usize..500, va in 20.0f64..40.0, v in 20.0f64..40.0,
    ) {
        let next = vavg_update(k as f64 * 30.0, va, v, 30.0).unwrap();
        prop_assert!(next >= va.min(v) - 1e-12 && next <= va.max(v) + 1e-12);
    }

    #[test]
    fn grid_location_reconstructs_the_point(lo in -5.0f64..5.0, step in 0.05f64..1.0, n in 2usize..40, t in 0.0f64..1.0) {
        let hi = lo + step * (n - 1) as f64;
        let g = Grid::uniform(lo, hi, step).unwrap();
        let x = lo + t * (hi - lo);
        let (i, w) = g.locate(x).unwrap();
        prop_assert!((0.0..=1.0).contains(&w));
        let pts = g.points();
        prop_assert!(((1.0 - w) * pts[i] + w * pts[i + 1] - x).abs() <= 1e-9 * (1.0 + x.abs()));
        prop_assert!(g.locate(hi + 1.0).is_none());
    }

    #[test]
    fn road_grades_are_elevation_differences(elev in prop::collection::vec(-50.0f64..50.0, 2..60), ds in 1.0f64..100.0) {
        let road = RoadProfile::from_elevation(ds, elev.clone()).unwrap();
        prop_assert_eq!(road.steps(), elev.len() - 1);
        for k in 0..road.steps() {
            prop_assert!((road.grade_at(k) - (elev[k + 1] - elev[k]) / ds).abs() <= 1e-12 * (1.0 + road.grade_at(k).abs()));
        }
        prop_assert_eq!(road.grade_at(road.steps() + 3), 0.0);
    }

    #[test]
    fn scaler_round_trips(data in prop::collection::vec(-1e3f64..1e3, 6..60)) {
        let n = data.len() / 3;
        let idx: Vec<usize> = (0..n).collect();
        let s = MinMaxScaler::fit(&data[..n * 3], 3, &idx);
        for i in 0..n {
            for j in 0..3 {
                let x = data[i * 3 + j];
                let y = s.scale(j, x);
                prop_assert!((-1e-12..=1.0 + 1e-12).contains(&y));
                prop_assert!((s.unscale(j, y) - x).abs() <= 1e-9 * (1.0 + x.abs()));
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(30))]

    #[test]
    fn qp_solutions_respect_torque_bounds(
        gamma in 0.0f64..0.05, v0 in -3.0f64..3.0,
        grades in prop::collection::vec(-0.05f64..0.05, 60),
    ) {
        let p = VehicleParams::default();
        let lin = p.linearize(30.0).unwrap();
        let prob = MpcProblem::build(gamma, &lin, &grades, v0, &p, &MpcConfig::default()).unwrap();
        let sol = prob.solve(None).unwrap();
        let b = prob.bounds;
        prop_assert!(sol.kkt_residual <= 1e-6);
        prop_assert!(sol.te.iter().all(|&t| t >= b.te_lo - 1e-9 && t <= b.te_hi + 1e-9));
        prop_assert!(sol.slack.iter().all(|&s| s >= -1e-12));
    }
}
