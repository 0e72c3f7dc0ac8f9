//! Road elevation/grade profiles sampled every `ds` metres.

use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::math;

/// Shortest road that still yields a full 3 km preview from its start.
pub const MIN_GENERATED_LENGTH_M: f64 = 3000.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RoadError {
    #[error("road length {0} m is below the 3 km minimum")]
    TooShort(f64),
    #[error("need at least 2 elevation rows, got {0}")]
    TooFewRows(usize),
    #[error("row {row}: distance {distance} does not increase over the previous row")]
    NonMonotone { row: usize, distance: f64 },
    #[error("row {row}: non-finite value")]
    NonFinite { row: usize },
    #[error("sample spacing must be positive, got {0}")]
    BadSpacing(f64),
}

/// Uniformly sampled road. `grade[i] = (elevation[i+1] − elevation[i]) / ds`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoadProfile {
    ds: f64,
    elevation: Vec<f64>,
    grade: Vec<f64>,
}

impl RoadProfile {
    pub fn from_elevation(ds: f64, elevation: Vec<f64>) -> Result<Self, RoadError> {
        if !(ds > 0.0) {
            return Err(RoadError::BadSpacing(ds));
        }
        if elevation.len() < 2 {
            return Err(RoadError::TooFewRows(elevation.len()));
        }
        if let Some(row) = elevation.iter().position(|h| !h.is_finite()) {
            return Err(RoadError::NonFinite { row });
        }
        let grade = elevation.windows(2).map(|w| (w[1] - w[0]) / ds).collect();
        Ok(Self { ds, elevation, grade })
    }

    /// A flat road of `steps` segments.
    pub fn flat(ds: f64, steps: usize) -> Self {
        Self { ds, elevation: alloc::vec![0.0; steps + 1], grade: alloc::vec![0.0; steps] }
    }

    pub fn ds(&self) -> f64 {
        self.ds
    }

    pub fn elevation(&self) -> &[f64] {
        &self.elevation
    }

    pub fn grade(&self) -> &[f64] {
        &self.grade
    }

    /// Number of segments `P`.
    pub fn steps(&self) -> usize {
        self.grade.len()
    }

    pub fn length_m(&self) -> f64 {
        self.steps() as f64 * self.ds
    }

    pub fn position(&self, index: usize) -> f64 {
        index as f64 * self.ds
    }

    /// Grade of segment `index`; zero past the end of the road.
    #[inline]
    pub fn grade_at(&self, index: usize) -> f64 {
        self.grade.get(index).copied().unwrap_or(0.0)
    }

    /// Grades `[index, index + len)`, padded with flat road past the end.
    pub fn preview(&self, index: usize, len: usize) -> GradePreview {
        let samples = (index..index + len).map(|i| self.grade_at(i)).collect();
        GradePreview { origin: index, samples }
    }

    pub fn max_abs_grade(&self) -> f64 {
        self.grade.iter().fold(0.0, |m, g| m.max(g.abs()))
    }

    /// Linear-interpolation resampling of `(distance, elevation)` rows onto a
    /// uniform `ds` grid starting at the first row.
    pub fn resample(rows: &[(f64, f64)], ds: f64) -> Result<Self, RoadError> {
        if !(ds > 0.0) {
            return Err(RoadError::BadSpacing(ds));
        }
        if rows.len() < 2 {
            return Err(RoadError::TooFewRows(rows.len()));
        }
        for (row, &(d, h)) in rows.iter().enumerate() {
            if !d.is_finite() || !h.is_finite() {
                return Err(RoadError::NonFinite { row });
            }
            if row > 0 && d <= rows[row - 1].0 {
                return Err(RoadError::NonMonotone { row, distance: d });
            }
        }
        let start = rows[0].0;
        let span = rows[rows.len() - 1].0 - start;
        // Tolerate round-off so a 300 m span at 30 m gives 11 samples.
        let steps = math::floor(span / ds + 1e-9) as usize;
        let mut elevation = Vec::with_capacity(steps + 1);
        let mut seg = 0;
        for i in 0..=steps {
            let s = start + i as f64 * ds;
            while seg + 2 < rows.len() && rows[seg + 1].0 < s {
                seg += 1;
            }
            let (d0, h0) = rows[seg];
            let (d1, h1) = rows[seg + 1];
            let t = ((s - d0) / (d1 - d0)).clamp(0.0, 1.0);
            elevation.push(if t == 1.0 { h1 } else { h0 + t * (h1 - h0) });
        }
        Self::from_elevation(ds, elevation)
    }
}

/// Fixed-length grade window starting at `origin`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradePreview {
    pub origin: usize,
    pub samples: Vec<f64>,
}

/// One elevation component `A·sin(2π·s/λ + ϕ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sinusoid {
    pub amplitude_m: f64,
    pub wavelength_m: f64,
    pub phase: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Components {
    /// Draw `count` sinusoids (inclusive range) with wavelengths in the
    /// given range; amplitudes are then rescaled to hit `max_grade`.
    Random { count: (usize, usize), wavelength_m: (f64, f64) },
    /// Use these components as given; only scaled down when they exceed
    /// `max_grade`.
    Fixed(Vec<Sinusoid>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSpec {
    pub components: Components,
    pub max_grade: f64,
    /// Flat stretch before the sinusoids start.
    pub lead_in_m: f64,
    pub ds: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            components: Components::Random { count: (3, 8), wavelength_m: (500.0, 8000.0) },
            max_grade: 0.05,
            lead_in_m: 500.0,
            ds: 30.0,
        }
    }
}

impl GeneratorSpec {
    pub fn fixed(components: Vec<Sinusoid>) -> Self {
        Self { components: Components::Fixed(components), lead_in_m: 0.0, ..Self::default() }
    }
}

/// Sum-of-sinusoids hilly road, deterministic in `seed`.
pub fn gen_sinusoidal(seed: u64, length_m: f64, spec: &GeneratorSpec) -> Result<RoadProfile, RoadError> {
    if !(length_m >= MIN_GENERATED_LENGTH_M) {
        return Err(RoadError::TooShort(length_m));
    }
    if !(spec.ds > 0.0) {
        return Err(RoadError::BadSpacing(spec.ds));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (components, rescale_up) = match &spec.components {
        Components::Fixed(c) => (c.clone(), false),
        Components::Random { count, wavelength_m } => {
            let n = rng.random_range(count.0..=count.1.max(count.0));
            let comps = (0..n)
                .map(|_| {
                    let wavelength_m = rng.random_range(wavelength_m.0..=wavelength_m.1);
                    // Each component's own peak slope is a random share of the cap.
                    let slope = spec.max_grade * rng.random_range(0.2..=1.0);
                    Sinusoid {
                        amplitude_m: slope * wavelength_m / (2.0 * PI),
                        wavelength_m,
                        phase: rng.random_range(0.0..2.0 * PI),
                    }
                })
                .collect();
            (comps, true)
        }
    };

    let steps = math::floor(length_m / spec.ds + 1e-9) as usize;
    let elevation: Vec<f64> = (0..=steps)
        .map(|i| {
            let s = (i as f64 * spec.ds - spec.lead_in_m).max(0.0);
            components
                .iter()
                .map(|c| c.amplitude_m * (math::sin(2.0 * PI * s / c.wavelength_m + c.phase) - math::sin(c.phase)))
                .sum()
        })
        .collect();
    let mut road = RoadProfile::from_elevation(spec.ds, elevation)?;

    let peak = road.max_abs_grade();
    if peak > 0.0 && (rescale_up || peak > spec.max_grade) {
        let mut factor = spec.max_grade / peak;
        // Rounding in the re-differenced grades can overshoot by an ulp.
        for _ in 0..4 {
            let scaled = road.elevation.iter().map(|h| h * factor).collect();
            let candidate = RoadProfile::from_elevation(spec.ds, scaled)?;
            if candidate.max_abs_grade() <= spec.max_grade {
                road = candidate;
                break;
            }
            factor *= 1.0 - 1e-12;
        }
    }
    Ok(road)
}
