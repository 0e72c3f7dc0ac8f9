//! Run configuration (TOML) and content fingerprints for cached artifacts.

use std::path::{Path, PathBuf};

use ecocruise_core::road::{gen_sinusoidal, MIN_GENERATED_LENGTH_M};
use ecocruise_core::{
    ControllerKind, DpConfig, GeneratorSpec, Grid, InverseConfig, MpcConfig, RoadProfile, TrainConfig, VehicleParams,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io;

/// Environment variable that overrides the configured output directory.
pub const OUT_ENV: &str = "ECOCRUISE_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seed for road generation and training; required by both.
    pub seed: Option<u64>,
    pub v_ref: f64,
    pub out_dir: PathBuf,
    /// Evaluation road: simulations and sweeps run here.
    pub road: RoadSource,
    /// Road whose DP solution labels the training set; defaults to `road`.
    pub train_road: Option<RoadSource>,
    pub vehicle: VehicleOverrides,
    pub dp: DpSection,
    pub mpc: MpcSection,
    pub inverse: InverseSection,
    pub train: TrainSection,
    pub pi: PiSection,
    pub sweep: SweepSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            v_ref: 30.0,
            out_dir: PathBuf::from("out"),
            road: RoadSource::default(),
            train_road: None,
            vehicle: VehicleOverrides::default(),
            dp: DpSection::default(),
            mpc: MpcSection::default(),
            inverse: InverseSection::default(),
            train: TrainSection::default(),
            pi: PiSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

/// Exactly one of `file` (exported road CSV), `elevation` (surveyed
/// distance/elevation CSV) or `length_km` (synthetic road).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoadSource {
    pub file: Option<PathBuf>,
    pub elevation: Option<PathBuf>,
    pub length_km: Option<f64>,
    /// Generator seed; falls back to the run seed.
    pub seed: Option<u64>,
    pub max_grade: Option<f64>,
}

impl RoadSource {
    pub fn generated(length_km: f64, seed: u64) -> Self {
        Self { length_km: Some(length_km), seed: Some(seed), ..Self::default() }
    }

    pub fn from_file(path: impl Into<PathBuf>) -> Self {
        Self { file: Some(path.into()), ..Self::default() }
    }

    fn validate(&self, what: &str, run_seed: Option<u64>) -> Result<()> {
        let set = [self.file.is_some(), self.elevation.is_some(), self.length_km.is_some()];
        match set.iter().filter(|&&b| b).count() {
            1 => {}
            0 => return Err(Error::Validation(format!("{what}: set one of file, elevation or length_km"))),
            _ => return Err(Error::Validation(format!("{what}: file, elevation and length_km are exclusive"))),
        }
        for p in self.file.iter().chain(&self.elevation) {
            if !p.is_file() {
                return Err(Error::Validation(format!("{what}: {} does not exist", p.display())));
            }
        }
        if let Some(km) = self.length_km {
            if !(km * 1000.0 >= MIN_GENERATED_LENGTH_M) {
                return Err(Error::Validation(format!("{what}: length_km {km} is below the 3 km preview length")));
            }
            if self.seed.or(run_seed).is_none() {
                return Err(Error::Validation(format!("{what}: a seed is required for a generated road")));
            }
        }
        if let Some(g) = self.max_grade {
            if !(g > 0.0 && g < 0.3) {
                return Err(Error::Validation(format!("{what}: max_grade {g} outside (0, 0.3)")));
            }
        }
        Ok(())
    }

    /// Stable description used in fingerprints; files are hashed by content.
    pub fn fingerprint(&self, run_seed: Option<u64>, ds: f64) -> Result<String> {
        let mut fp = Fingerprint::new("road").f64(ds);
        if let Some(p) = &self.file {
            fp = fp.str("file").str(&io::read_text(p)?);
        } else if let Some(p) = &self.elevation {
            fp = fp.str("elevation").str(&io::read_text(p)?);
        } else {
            fp = fp
                .str("generated")
                .f64(self.length_km.unwrap_or(0.0))
                .u64(self.seed.or(run_seed).unwrap_or(0))
                .f64(self.max_grade.unwrap_or(GeneratorSpec::default().max_grade));
        }
        Ok(fp.finish())
    }

    pub fn load(&self, run_seed: Option<u64>, ds: f64) -> Result<RoadProfile> {
        if let Some(p) = &self.file {
            let (road, _) = io::read_road(p)?;
            if (road.ds() - ds).abs() > 1e-6 {
                return Err(Error::Validation(format!("{}: spacing {} m differs from the vehicle step {ds} m", p.display(), road.ds())));
            }
            return Ok(road);
        }
        if let Some(p) = &self.elevation {
            return io::read_elevation(p, ds);
        }
        let km = self.length_km.ok_or_else(|| Error::Validation("road source is empty".into()))?;
        let seed = self.seed.or(run_seed).ok_or_else(|| Error::Validation("road generation needs a seed".into()))?;
        let mut spec = GeneratorSpec { ds, ..GeneratorSpec::default() };
        if let Some(g) = self.max_grade {
            spec.max_grade = g;
        }
        Ok(gen_sinusoidal(seed, km * 1000.0, &spec)?)
    }
}

/// Key-value vehicle coefficients; unset keys keep the built-in defaults.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VehicleOverrides {
    /// Another key-value file applied before the keys below.
    pub file: Option<PathBuf>,
    pub alpha0: Option<f64>,
    pub alpha1: Option<f64>,
    pub alpha2: Option<f64>,
    pub alpha3: Option<f64>,
    pub alpha4: Option<f64>,
    pub lambda0: Option<f64>,
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    pub lambda3: Option<f64>,
    pub lambda4: Option<f64>,
    pub lambda5: Option<f64>,
    pub v_min: Option<f64>,
    pub v_max: Option<f64>,
    pub te_min: Option<f64>,
    pub te_max: Option<f64>,
    pub ds: Option<f64>,
}

impl VehicleOverrides {
    fn apply(&self, p: &mut VehicleParams) {
        let alpha = [self.alpha0, self.alpha1, self.alpha2, self.alpha3, self.alpha4];
        for (dst, src) in p.alpha.iter_mut().zip(alpha) {
            if let Some(x) = src {
                *dst = x;
            }
        }
        let lambda = [self.lambda0, self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.lambda5];
        for (dst, src) in p.lambda.iter_mut().zip(lambda) {
            if let Some(x) = src {
                *dst = x;
            }
        }
        for (dst, src) in [
            (&mut p.v_min, self.v_min),
            (&mut p.v_max, self.v_max),
            (&mut p.te_min, self.te_min),
            (&mut p.te_max, self.te_max),
            (&mut p.ds, self.ds),
        ] {
            if let Some(x) = src {
                *dst = x;
            }
        }
    }

    pub fn params(&self) -> Result<VehicleParams> {
        let mut p = VehicleParams::default();
        if let Some(path) = &self.file {
            load_vehicle_file(path)?.apply(&mut p);
        }
        self.apply(&mut p);
        p.validate()?;
        Ok(p)
    }
}

pub fn load_vehicle_file(path: &Path) -> Result<VehicleOverrides> {
    let text = io::read_text(path)?;
    let v: VehicleOverrides = parse_toml(path, &text)?;
    if v.file.is_some() {
        return Err(Error::Validation(format!("{}: nested vehicle files are not supported", path.display())));
    }
    Ok(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpSection {
    pub v_step: f64,
    pub vavg_step: f64,
    pub te_step: f64,
    /// Average-velocity grid half-width as a fraction of `v_ref`.
    pub vavg_band: f64,
    pub terminal_slope: f64,
}

impl Default for DpSection {
    fn default() -> Self {
        Self { v_step: 0.25, vavg_step: 0.1, te_step: 10.0, vavg_band: 0.07, terminal_slope: 100.0 }
    }
}

impl DpSection {
    pub fn config(&self, params: &VehicleParams, v_ref: f64) -> Result<DpConfig> {
        let mut c = DpConfig::new(params, v_ref)?;
        c.vavg_min = (1.0 - self.vavg_band) * v_ref;
        c.vavg_max = (1.0 + self.vavg_band) * v_ref;
        c.v_grid = Grid::uniform(params.v_min, params.v_max, self.v_step)?;
        c.vavg_grid = Grid::anchored(v_ref, c.vavg_min, c.vavg_max, self.vavg_step)?;
        c.te_grid = Grid::uniform(params.te_min, params.te_max, self.te_step)?;
        c.terminal_slope = self.terminal_slope;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcSection {
    pub horizon: usize,
    pub soft_weight: f64,
    /// Weight used by `simulate --controller fixed` when no flag is given.
    pub gamma: f64,
    pub preview_len: usize,
}

impl Default for MpcSection {
    fn default() -> Self {
        Self { horizon: 60, soft_weight: 1e3, gamma: 0.003, preview_len: 100 }
    }
}

impl MpcSection {
    pub fn config(&self) -> MpcConfig {
        MpcConfig { horizon: self.horizon, soft_weight: self.soft_weight, ..MpcConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InverseSection {
    pub active_tol: f64,
    pub gamma_max: f64,
}

impl Default for InverseSection {
    fn default() -> Self {
        let d = InverseConfig::default();
        Self { active_tol: d.active_tol, gamma_max: d.gamma_max }
    }
}

impl InverseSection {
    pub fn config(&self, horizon: usize) -> InverseConfig {
        InverseConfig { horizon, active_tol: self.active_tol, gamma_max: self.gamma_max, v_ref_dev: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub l2: f64,
    pub test_fraction: f64,
    pub val_fraction: f64,
    pub patience: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            hidden: d.hidden,
            learning_rate: d.learning_rate,
            momentum: d.momentum,
            epochs: d.epochs,
            batch_size: d.batch_size,
            l2: d.l2,
            test_fraction: d.test_fraction,
            val_fraction: d.val_fraction,
            patience: d.patience,
        }
    }
}

impl TrainSection {
    pub fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            hidden: self.hidden.clone(),
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            epochs: self.epochs,
            batch_size: self.batch_size,
            l2: self.l2,
            test_fraction: self.test_fraction,
            val_fraction: self.val_fraction,
            patience: self.patience,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PiSection {
    pub kp: f64,
    pub ki: f64,
}

impl Default for PiSection {
    fn default() -> Self {
        match ControllerKind::DEFAULT_PI {
            ControllerKind::Pi { kp, ki } => Self { kp, ki },
            _ => unreachable!(),
        }
    }
}

impl PiSection {
    pub fn kind(&self) -> ControllerKind {
        ControllerKind::Pi { kp: self.kp, ki: self.ki }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    /// `lo:hi:count` or a comma-separated list.
    pub gammas: String,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self { gammas: "0.005:0.04:8".into() }
    }
}

/// Ascending weight ladder from `lo:hi:count` (inclusive ends) or `a,b,c`.
pub fn parse_ladder(s: &str) -> Result<Vec<f64>> {
    let bad = |why: &str| Error::Usage(format!("gamma ladder {s:?}: {why}"));
    let num = |t: &str| t.trim().parse::<f64>().map_err(|_| bad("not a number"));
    let ladder = if s.contains(':') {
        let parts: Vec<&str> = s.split(':').collect();
        let [lo, hi, n] = parts[..] else { return Err(bad("expected lo:hi:count")) };
        let (lo, hi) = (num(lo)?, num(hi)?);
        let n: usize = n.trim().parse().map_err(|_| bad("count must be a positive integer"))?;
        match n {
            0 => return Err(bad("count must be a positive integer")),
            1 => vec![lo],
            _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
        }
    } else {
        s.split(',').map(num).collect::<Result<Vec<_>>>()?
    };
    if ladder.is_empty() {
        return Err(bad("empty"));
    }
    if ladder.iter().any(|g| !(*g >= 0.0 && g.is_finite())) {
        return Err(bad("weights must be finite and non-negative"));
    }
    if ladder.windows(2).any(|w| w[1] <= w[0]) {
        return Err(bad("weights must be strictly ascending"));
    }
    Ok(ladder)
}

fn parse_toml<T: serde::de::DeserializeOwned>(path: &Path, text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| {
        let line = e.span().map_or(0, |r| text[..r.start.min(text.len())].lines().count().max(1) as u64);
        Error::parse(path, line, e.message().to_string())
    })
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = io::read_text(path)?;
        let mut cfg: Self = parse_toml(path, &text)?;
        // Relative paths in a config file are relative to that file.
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for src in std::iter::once(&mut cfg.road).chain(cfg.train_road.as_mut()) {
            src.file.as_mut().map(rebase);
            src.elevation.as_mut().map(rebase);
        }
        cfg.vehicle.file.as_mut().map(rebase);
        rebase(&mut cfg.out_dir);
        Ok(cfg)
    }

    pub fn train_road(&self) -> &RoadSource {
        self.train_road.as_ref().unwrap_or(&self.road)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.v_ref > 0.0 && self.v_ref.is_finite()) {
            return Err(Error::Validation(format!("v_ref {} must be positive", self.v_ref)));
        }
        self.road.validate("road", self.seed)?;
        if let Some(t) = &self.train_road {
            t.validate("train_road", self.seed)?;
        }
        let params = self.vehicle.params()?;
        if !(self.v_ref >= params.v_min && self.v_ref <= params.v_max) {
            return Err(Error::Validation(format!(
                "v_ref {} outside the vehicle speed range [{}, {}]",
                self.v_ref, params.v_min, params.v_max
            )));
        }
        self.dp.config(&params, self.v_ref)?;
        self.mpc.config().validate().map_err(|e| Error::Validation(e.to_string()))?;
        if !(self.mpc.gamma >= 0.0) {
            return Err(Error::Validation("mpc.gamma must be non-negative".into()));
        }
        if self.mpc.preview_len == 0 {
            return Err(Error::Validation("mpc.preview_len must be positive".into()));
        }
        self.train.config(0).validate()?;
        if !(self.pi.kp > 0.0 && self.pi.ki > 0.0) {
            return Err(Error::Validation("PI gains must be positive".into()));
        }
        parse_ladder(&self.sweep.gammas).map_err(|e| Error::Validation(e.to_string()))?;
        Ok(())
    }

    pub fn training_seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| Error::Validation("training needs a seed".into()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// SHA-256 over tagged fields; the hex prefix names cached artifacts.
#[derive(Clone)]
pub struct Fingerprint(Sha256);

impl Fingerprint {
    pub fn new(stage: &str) -> Self {
        Self(Sha256::new()).str(env!("CARGO_PKG_VERSION")).str(stage)
    }

    pub fn str(mut self, s: &str) -> Self {
        self.0.update((s.len() as u64).to_le_bytes());
        self.0.update(s.as_bytes());
        self
    }

    pub fn u64(mut self, x: u64) -> Self {
        self.0.update(x.to_le_bytes());
        self
    }

    pub fn f64(self, x: f64) -> Self {
        self.u64(x.to_bits())
    }

    pub fn debug<T: std::fmt::Debug>(self, x: &T) -> Self {
        self.str(&format!("{x:?}"))
    }

    pub fn finish(self) -> String {
        self.0.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
