//! Longitudinal vehicle dynamics and fuel map in 6th gear.
//!
//! Time domain:
//!
//! ```text
//! a      = α0·Te − α1·φ − α2 − α3·V − α4·V²
//! ṁ_f    = λ0 + λ1·V + λ2·Te + λ3·Te² + λ4·Te·V + λ5·V²      [kg/h]
//! ```
//!
//! The space-domain fuel rate is kept in kg/m (`ṁ_f / (3600·V)`) so that
//! per-step fuel is simply `rate · Δs`.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VehicleError {
    #[error("velocity must be strictly positive, got {0}")]
    NonPositiveVelocity(f64),
    #[error("space step from v={v} with te={te}, phi={phi} gives non-positive velocity {next}")]
    StepFailure { v: f64, te: f64, phi: f64, next: f64 },
    #[error("invalid vehicle parameters: {0}")]
    InvalidParams(&'static str),
    #[error("linearization velocity {0} outside [v_min, v_max]")]
    VelocityOutOfRange(f64),
    #[error("equilibrium torque {te} at v={v} outside [te_min, te_max]")]
    EquilibriumOutOfRange { v: f64, te: f64 },
}

/// Coefficients of the dynamics and fuel polynomials plus the operating box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleParams {
    pub alpha: [f64; 5],
    pub lambda: [f64; 6],
    pub v_min: f64,
    pub v_max: f64,
    pub te_min: f64,
    pub te_max: f64,
    /// Position step in metres.
    pub ds: f64,
}

impl Default for VehicleParams {
    /// Ford Escape 1.6 L in 6th gear, 30 m position step.
    fn default() -> Self {
        Self {
            alpha: [0.00315, 9.81, 0.05536, 0.00229, 2.8272e-4],
            lambda: [0.5352, -0.03021, 0.00062, 5.503e-5, 0.00079, 0.00131],
            v_min: 20.0,
            v_max: 40.0,
            te_min: 0.0,
            te_max: 300.0,
            ds: 30.0,
        }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<(), VehicleError> {
        let finite = self.alpha.iter().chain(&self.lambda).all(|c| c.is_finite())
            && [self.v_min, self.v_max, self.te_min, self.te_max, self.ds]
                .iter()
                .all(|c| c.is_finite());
        if !finite {
            return Err(VehicleError::InvalidParams("non-finite coefficient"));
        }
        if self.alpha[0] <= 0.0 {
            return Err(VehicleError::InvalidParams("alpha0 must be positive"));
        }
        if self.ds <= 0.0 {
            return Err(VehicleError::InvalidParams("ds must be positive"));
        }
        if self.v_min <= 0.0 {
            return Err(VehicleError::InvalidParams("v_min must be positive"));
        }
        if self.v_min >= self.v_max {
            return Err(VehicleError::InvalidParams("v_min must be below v_max"));
        }
        if self.te_min >= self.te_max {
            return Err(VehicleError::InvalidParams("te_min must be below te_max"));
        }
        Ok(())
    }

    #[inline]
    pub(crate) fn accel_raw(&self, v: f64, te: f64, phi: f64) -> f64 {
        let a = &self.alpha;
        a[0] * te - a[1] * phi - a[2] - a[3] * v - a[4] * v * v
    }

    #[inline]
    pub(crate) fn step_raw(&self, v: f64, te: f64, phi: f64) -> f64 {
        v + self.ds * self.accel_raw(v, te, phi) / v
    }

    #[inline]
    pub(crate) fn fuel_space_raw(&self, v: f64, te: f64) -> f64 {
        self.fuel_rate_time(v, te) / (3600.0 * v)
    }

    /// Acceleration in m/s².
    pub fn accel(&self, v: f64, te: f64, phi: f64) -> Result<f64, VehicleError> {
        if !(v > 0.0) {
            return Err(VehicleError::NonPositiveVelocity(v));
        }
        Ok(self.accel_raw(v, te, phi))
    }

    /// Fuel mass flow in kg/h.
    pub fn fuel_rate_time(&self, v: f64, te: f64) -> f64 {
        let l = &self.lambda;
        l[0] + l[1] * v + l[2] * te + l[3] * te * te + l[4] * te * v + l[5] * v * v
    }

    /// Fuel per distance in kg/m.
    pub fn fuel_rate_space(&self, v: f64, te: f64) -> Result<f64, VehicleError> {
        if !(v > 0.0) {
            return Err(VehicleError::NonPositiveVelocity(v));
        }
        Ok(self.fuel_space_raw(v, te))
    }

    /// One forward-Euler step of length `ds` in position.
    pub fn space_step(&self, v: f64, te: f64, phi: f64) -> Result<f64, VehicleError> {
        if !(v > 0.0) {
            return Err(VehicleError::NonPositiveVelocity(v));
        }
        let next = self.step_raw(v, te, phi);
        if !(next > 0.0) {
            return Err(VehicleError::StepFailure { v, te, phi, next });
        }
        Ok(next)
    }

    /// Torque holding `v` constant on a flat road.
    pub fn equilibrium_torque(&self, v: f64) -> f64 {
        let a = &self.alpha;
        (a[2] + a[3] * v + a[4] * v * v) / a[0]
    }

    /// Linearize the space-domain dynamics and fuel rate about the flat-road
    /// equilibrium at `v_ref`.
    pub fn linearize(&self, v_ref: f64) -> Result<LinearizedModel, VehicleError> {
        if !(v_ref >= self.v_min && v_ref <= self.v_max) {
            return Err(VehicleError::VelocityOutOfRange(v_ref));
        }
        let te = self.equilibrium_torque(v_ref);
        if te < self.te_min || te > self.te_max {
            return Err(VehicleError::EquilibriumOutOfRange { v: v_ref, te });
        }
        let a = &self.alpha;
        let l = &self.lambda;
        let v = v_ref;
        // d(a/V)/dV = (a_V·V − a)/V² with a = 0 at equilibrium.
        let a_coef = 1.0 + self.ds * (-a[3] - 2.0 * a[4] * v) / v;
        let b1 = self.ds * a[0] / v;
        let b2 = -self.ds * a[1] / v;

        let f = self.fuel_rate_time(v, te);
        let f_v = l[1] + l[4] * te + 2.0 * l[5] * v;
        let f_t = l[2] + 2.0 * l[3] * te + l[4] * v;
        let fuel_lin = AffineFuel {
            c0: f / (3600.0 * v),
            c_v: (f_v * v - f) / (3600.0 * v * v),
            c_t: f_t / (3600.0 * v),
        };
        Ok(LinearizedModel { a_coef, b1, b2, v_lin: v, te_lin: te, fuel_lin })
    }
}

/// `m̃ ≈ c0 + c_v·δV + c_t·δTe` in kg/m.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineFuel {
    pub c0: f64,
    pub c_v: f64,
    pub c_t: f64,
}

impl AffineFuel {
    #[inline]
    pub fn eval(&self, dv: f64, dte: f64) -> f64 {
        self.c0 + self.c_v * dv + self.c_t * dte
    }
}

/// Deviation model `δV⁺ = A·δV + B1·δTe + B2·φ` about `(v_lin, te_lin)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearizedModel {
    pub a_coef: f64,
    pub b1: f64,
    pub b2: f64,
    pub v_lin: f64,
    pub te_lin: f64,
    pub fuel_lin: AffineFuel,
}

impl LinearizedModel {
    #[inline]
    pub fn step(&self, dv: f64, dte: f64, phi: f64) -> f64 {
        self.a_coef * dv + self.b1 * dte + self.b2 * phi
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn p() -> VehicleParams {
        VehicleParams::default()
    }

    #[test]
    fn accel_equilibrium_at_30() {
        let p = p();
        let a = p.alpha;
        let te = (a[2] + a[3] * 30.0 + a[4] * 900.0) / a[0];
        assert_relative_eq!(te, 120.16, epsilon = 0.01);
        assert!(p.accel(30.0, te, 0.0).unwrap().abs() < 1e-15);
    }

    #[test]
    fn accel_zero_torque_is_pure_resistance() {
        let p = p();
        let a = p.alpha;
        let expect = -(a[2] + a[3] * 30.0 + a[4] * 900.0);
        assert_eq!(p.accel(30.0, 0.0, 0.0).unwrap(), expect);
    }

    #[test]
    fn accel_rejects_non_positive_velocity() {
        assert!(matches!(p().accel(0.0, 100.0, 0.0), Err(VehicleError::NonPositiveVelocity(_))));
        assert!(p().accel(-1.0, 100.0, 0.0).is_err());
        assert!(p().fuel_rate_space(0.0, 100.0).is_err());
    }

    #[test]
    fn accel_hilly_point() {
        // 0.00315·100 − 9.81·0.05 − 0.05536 − 0.00229·20 − 2.8272e-4·400
        let expect = 0.315 - 0.4905 - 0.05536 - 0.0458 - 0.113088;
        assert_relative_eq!(p().accel(20.0, 100.0, 0.05).unwrap(), expect, max_relative = 1e-14);
    }

    #[test]
    fn fuel_time_values() {
        let p = p();
        assert_relative_eq!(p.fuel_rate_time(30.0, 120.0), 4.5187, epsilon = 5e-5);
        assert_eq!(p.fuel_rate_time(0.0, 0.0), 0.5352);
        let l = p.lambda;
        assert_relative_eq!(
            p.fuel_rate_time(30.0, 0.0),
            l[0] + 30.0 * l[1] + 900.0 * l[5],
            max_relative = 1e-15
        );
    }

    #[test]
    fn fuel_space_unit_conversion() {
        let p = p();
        for &(v, te) in &[(20.0, 50.0), (30.0, 120.0), (37.5, 260.0)] {
            let expect = p.fuel_rate_time(v, te) / (v * 3600.0);
            assert_relative_eq!(p.fuel_rate_space(v, te).unwrap(), expect, max_relative = 1e-15);
        }
        let l = p.lambda;
        assert_relative_eq!(
            p.fuel_rate_space(1.0, 0.0).unwrap() * 3600.0,
            l[0] + l[1] + l[5],
            max_relative = 1e-14
        );
    }

    #[test]
    fn fuel_space_monotone_in_torque() {
        let p = p();
        for vi in 0..=20 {
            let v = p.v_min + (p.v_max - p.v_min) * vi as f64 / 20.0;
            let mut prev = p.fuel_rate_space(v, 0.0).unwrap();
            for ti in 1..=60 {
                let cur = p.fuel_rate_space(v, ti as f64 * 5.0).unwrap();
                assert!(cur > prev);
                prev = cur;
            }
        }
    }

    #[test]
    fn space_step_equilibrium_and_downhill() {
        let p = p();
        let te = p.equilibrium_torque(30.0);
        assert_relative_eq!(p.space_step(30.0, te, 0.0).unwrap(), 30.0, max_relative = 1e-15);
        let next = p.space_step(30.0, p.te_max, -0.05).unwrap();
        let a = p.alpha;
        let hand = 30.0
            + 30.0 * (a[0] * 300.0 + a[1] * 0.05 - a[2] - a[3] * 30.0 - a[4] * 900.0) / 30.0;
        assert!(next > 30.0);
        assert_relative_eq!(next, hand, max_relative = 1e-14);
    }

    #[test]
    fn space_step_failure() {
        let p = VehicleParams { ds: 500.0, ..p() };
        assert!(matches!(p.space_step(2.0, 0.0, 0.05), Err(VehicleError::StepFailure { .. })));
    }

    #[test]
    fn linearize_jacobians_match_central_differences() {
        let p = p();
        for &v in &[22.0, 25.0, 30.0, 35.0] {
            let lin = p.linearize(v).unwrap();
            assert_eq!(lin.b2, -p.ds * p.alpha[1] / v);
            let h = 1e-5;
            let te = lin.te_lin;
            let dv = (p.step_raw(v + h, te, 0.0) - p.step_raw(v - h, te, 0.0)) / (2.0 * h);
            let dt = (p.step_raw(v, te + h, 0.0) - p.step_raw(v, te - h, 0.0)) / (2.0 * h);
            let dp = (p.step_raw(v, te, h) - p.step_raw(v, te, -h)) / (2.0 * h);
            assert_relative_eq!(lin.a_coef, dv, max_relative = 1e-6);
            assert_relative_eq!(lin.b1, dt, max_relative = 1e-6);
            assert_relative_eq!(lin.b2, dp, max_relative = 1e-6);

            let fv = (p.fuel_space_raw(v + h, te) - p.fuel_space_raw(v - h, te)) / (2.0 * h);
            let ft = (p.fuel_space_raw(v, te + h) - p.fuel_space_raw(v, te - h)) / (2.0 * h);
            assert_relative_eq!(lin.fuel_lin.c_v, fv, max_relative = 1e-6);
            assert_relative_eq!(lin.fuel_lin.c_t, ft, max_relative = 1e-6);
            assert!((lin.fuel_lin.eval(0.0, 0.0) - p.fuel_space_raw(v, te)).abs() < 1e-12);
            assert_eq!(lin.step(0.0, 0.0, 0.0), 0.0);
        }
    }

    #[test]
    fn linearize_rejects_out_of_range() {
        let p = p();
        assert!(matches!(p.linearize(10.0), Err(VehicleError::VelocityOutOfRange(_))));
        let tight = VehicleParams { te_max: 100.0, ..p };
        assert!(matches!(tight.linearize(30.0), Err(VehicleError::EquilibriumOutOfRange { .. })));
    }

    #[test]
    fn linear_prediction_error_box() {
        // Worst one-step error of the deviation model over ±2 m/s, ±40 N·m,
        // ±5 % grade about 30 m/s, cross-checked with an independent script.
        let p = p();
        let lin = p.linearize(30.0).unwrap();
        let mut worst: f64 = 0.0;
        for i in 0..=8 {
            for j in 0..=8 {
                for k in 0..=4 {
                    let dv = -2.0 + 0.5 * i as f64;
                    let dt = -40.0 + 10.0 * j as f64;
                    let phi = -0.05 + 0.025 * k as f64;
                    let nl = p.step_raw(30.0 + dv, lin.te_lin + dt, phi) - 30.0;
                    worst = worst.max((nl - lin.step(dv, dt, phi)).abs());
                }
            }
        }
        assert!((worst - 0.045_574_514_285_716).abs() < 1e-12, "worst {worst}");
    }

    #[test]
    fn validate_catches_bad_params() {
        assert!(p().validate().is_ok());
        assert!(VehicleParams { alpha: [0.0, 9.81, 0.05, 0.002, 3e-4], ..p() }.validate().is_err());
        assert!(VehicleParams { ds: 0.0, ..p() }.validate().is_err());
        assert!(VehicleParams { v_min: 0.0, ..p() }.validate().is_err());
        assert!(VehicleParams { v_min: 50.0, ..p() }.validate().is_err());
        assert!(VehicleParams { te_min: 400.0, ..p() }.validate().is_err());
    }
}
