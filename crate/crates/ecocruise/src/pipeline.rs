//! Stage functions and the cached end-to-end pipeline.
//!
//! Each cached stage writes `cache/<stage>-<fingerprint>.<ext>` under the
//! output directory and downstream stages always read the persisted file,
//! so a cache hit and a fresh run feed identical inputs forward.

use std::path::{Path, PathBuf};

use ecocruise_core::inverse::gamma_series;
use ecocruise_core::nn::{self, make_dataset, Metrics, TrainOutcome};
use ecocruise_core::{dp, Artifacts, Dataset, DpSolution, GammaSeries, RoadProfile, Trajectory, VehicleParams};

use crate::config::{parse_ladder, Fingerprint, RoadSource, RunConfig};
use crate::error::{Error, Result};
use crate::io::{self, g9, Meta};
use crate::report;
use crate::sweep::{self, SweepRow, SweepSetup};

pub fn solve_dp(params: &VehicleParams, road: &RoadProfile, cfg: &RunConfig) -> Result<DpSolution> {
    let dc = cfg.dp.config(params, cfg.v_ref)?;
    Ok(dp::solve(params, road, &dc)?)
}

pub fn invert(params: &VehicleParams, road: &RoadProfile, traj: &Trajectory, cfg: &RunConfig) -> Result<GammaSeries> {
    if traj.steps() != road.steps() {
        return Err(Error::Validation(format!(
            "trajectory has {} steps but the road has {}",
            traj.steps(),
            road.steps()
        )));
    }
    let lin = params.linearize(cfg.v_ref)?;
    Ok(gamma_series(traj, road, params, &lin, &cfg.inverse.config(cfg.mpc.horizon))?)
}

pub fn dataset(road: &RoadProfile, series: &GammaSeries, cfg: &RunConfig) -> Result<Dataset> {
    Ok(make_dataset(road, series, cfg.v_ref, cfg.mpc.preview_len)?)
}

pub fn train(data: &Dataset, cfg: &RunConfig) -> Result<(TrainOutcome, Metrics)> {
    let out = nn::train(data, &cfg.train.config(cfg.training_seed()?))?;
    let test = out.model.evaluate(&data.subset(&out.split.test))?;
    Ok((out, test))
}

pub fn setup(cfg: &RunConfig) -> SweepSetup {
    SweepSetup {
        v_ref: cfg.v_ref,
        mpc: cfg.mpc.config(),
        preview_len: cfg.mpc.preview_len,
        gamma_max: cfg.inverse.gamma_max,
        pi: cfg.pi.kind(),
    }
}

/// Metadata shared by every artifact a run writes.
pub fn run_meta(cfg: &RunConfig, fingerprint: &str) -> Meta {
    let mut m = Meta::new().with("fingerprint", fingerprint).with("v_ref", g9(cfg.v_ref));
    if let Some(s) = cfg.seed {
        m = m.with("seed", s);
    }
    m
}

pub fn metrics_meta(m: Meta, test: &Metrics) -> Meta {
    m.with("test_mse_scaled", g9(test.mse_scaled))
        .with("test_mae_scaled", g9(test.mae_scaled))
        .with("test_mse", g9(test.mse))
        .with("test_mae", g9(test.mae))
}

pub fn history_csv(out: &TrainOutcome, meta: &Meta) -> String {
    let h = &out.history;
    let rows = h.train_loss.iter().zip(&h.val_loss).enumerate().map(|(e, (t, v))| [e.to_string(), g9(*t), g9(*v)]);
    io::render_csv(meta, &["epoch", "train_loss", "val_loss"], rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord {
    pub stage: &'static str,
    pub path: PathBuf,
    pub cached: bool,
}

pub struct PipelineOutput {
    pub stages: Vec<StageRecord>,
    pub rows: Vec<SweepRow>,
    pub report: String,
    /// Held-out scaled MSE and MAE of the trained model, read from its header.
    pub test_mse_scaled: Option<f64>,
    pub test_mae_scaled: Option<f64>,
    pub sweep_path: PathBuf,
}

struct Cache {
    dir: PathBuf,
    stages: Vec<StageRecord>,
}

impl Cache {
    fn stage<T>(
        &mut self,
        stage: &'static str,
        fp: &str,
        ext: &str,
        produce: impl FnOnce(&Path) -> Result<String>,
        load: impl FnOnce(&Path) -> Result<T>,
    ) -> Result<T> {
        let path = self.dir.join(format!("{stage}-{fp}.{ext}"));
        let cached = path.is_file();
        if !cached {
            let text = produce(&path).map_err(|e| e.in_stage(stage))?;
            io::write_atomic(&path, &text).map_err(|e| e.in_stage(stage))?;
        }
        let value = load(&path).map_err(|e| e.in_stage(stage))?;
        self.stages.push(StageRecord { stage, path, cached });
        Ok(value)
    }
}

struct RoadArtifacts {
    road: RoadProfile,
    road_fp: String,
    dp: Trajectory,
    dp_fp: String,
    gamma: GammaSeries,
    gamma_fp: String,
}

fn road_chain(cache: &mut Cache, cfg: &RunConfig, params: &VehicleParams, src: &RoadSource) -> Result<RoadArtifacts> {
    let road_fp = src.fingerprint(cfg.seed, params.ds).map_err(|e| e.in_stage("road"))?;
    let road = cache.stage(
        "road",
        &road_fp,
        "csv",
        |_| Ok(io::render_road(&src.load(cfg.seed, params.ds)?, &run_meta(cfg, &road_fp))),
        |p| io::read_road(p).map(|(r, _)| r),
    )?;

    let dp_fp = Fingerprint::new("dp").str(&road_fp).debug(params).debug(&cfg.dp).f64(cfg.v_ref).finish();
    let dp = cache.stage(
        "dp",
        &dp_fp,
        "csv",
        |_| {
            let sol = solve_dp(params, &road, cfg)?;
            let meta = run_meta(cfg, &dp_fp).with("total_fuel_kg", g9(sol.total_fuel)).with("cost", g9(sol.cost));
            Ok(io::render_trajectory(&sol.trajectory, &meta))
        },
        |p| io::read_trajectory(p).map(|(t, _)| t),
    )?;

    let gamma_fp =
        Fingerprint::new("gamma").str(&dp_fp).debug(&cfg.inverse).u64(cfg.mpc.horizon as u64).finish();
    let gamma = cache.stage(
        "gamma",
        &gamma_fp,
        "csv",
        |_| Ok(io::render_gamma(&invert(params, &road, &dp, cfg)?, road.ds(), &run_meta(cfg, &gamma_fp))),
        |p| io::read_gamma(p).map(|(g, _)| g),
    )?;
    Ok(RoadArtifacts { road, road_fp, dp, dp_fp, gamma, gamma_fp })
}

/// Road → DP → γ series → dataset → model on the training road, then the
/// same chain up to γ on the evaluation road, then the controller sweep.
pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    let params = cfg.vehicle.params()?;
    let ladder = parse_ladder(&cfg.sweep.gammas)?;
    let mut cache = Cache { dir: cfg.out_dir.join("cache"), stages: Vec::new() };

    let tr = road_chain(&mut cache, cfg, &params, cfg.train_road())?;
    let data_fp =
        Fingerprint::new("dataset").str(&tr.gamma_fp).f64(cfg.v_ref).u64(cfg.mpc.preview_len as u64).finish();
    let data = cache.stage(
        "dataset",
        &data_fp,
        "csv",
        |_| Ok(io::render_dataset(&dataset(&tr.road, &tr.gamma, cfg)?, &run_meta(cfg, &data_fp))),
        |p| io::read_dataset(p).map(|(d, _)| d),
    )?;

    let seed = cfg.training_seed().map_err(|e| e.in_stage("model"))?;
    let model_fp = Fingerprint::new("model").str(&data_fp).debug(&cfg.train).u64(seed).finish();
    let (model, model_meta) = cache.stage(
        "model",
        &model_fp,
        "txt",
        |path| {
            let (out, test) = train(&data, cfg)?;
            let meta = metrics_meta(run_meta(cfg, &model_fp), &test)
                .with("best_epoch", out.history.best_epoch)
                .with("restarts", out.history.restarts);
            io::write_atomic(&path.with_extension("history.csv"), &history_csv(&out, &meta))?;
            Ok(io::render_model(&out.model, &meta))
        },
        io::read_model,
    )?;

    let ev = road_chain(&mut cache, cfg, &params, &cfg.road)?;
    let setup = setup(cfg);
    let sweep_fp = Fingerprint::new("sweep")
        .str(&ev.road_fp)
        .str(&ev.dp_fp)
        .str(&ev.gamma_fp)
        .str(&model_fp)
        .debug(&setup)
        .debug(&ladder)
        .finish();
    let rows = cache.stage(
        "sweep",
        &sweep_fp,
        "csv",
        |_| {
            let art = Artifacts { model: Some(&model), gamma_series: Some(&ev.gamma), dp_torque: Some(&ev.dp.te) };
            let runs = sweep::pareto_sweep(&setup, &ev.road, &params, &ladder, &art)?;
            let rows: Vec<SweepRow> = runs.iter().map(sweep::SweepRun::row).collect();
            Ok(sweep::render_sweep(&rows, &run_meta(cfg, &sweep_fp)))
        },
        |p| sweep::read_sweep(p).map(|(r, _)| r),
    )?;

    let text = report::render(&format!("sweep {sweep_fp}"), &rows);
    let meta = run_meta(cfg, &sweep_fp);
    let sweep_path = cfg.out_dir.join("sweep.csv");
    io::write_atomic(&sweep_path, &sweep::render_sweep(&rows, &meta))?;
    io::write_atomic(&cfg.out_dir.join("pareto.csv"), &report::plot_csv(&rows, &meta))?;
    io::write_atomic(&cfg.out_dir.join("report.txt"), &text)?;
    io::write_atomic(&cfg.out_dir.join("run.toml"), &cfg.to_toml())?;

    let num = |k: &str| model_meta.get(k).and_then(|v| v.parse().ok());
    Ok(PipelineOutput {
        stages: cache.stages,
        rows,
        report: text,
        test_mse_scaled: num("test_mse_scaled"),
        test_mae_scaled: num("test_mae_scaled"),
        sweep_path,
    })
}
