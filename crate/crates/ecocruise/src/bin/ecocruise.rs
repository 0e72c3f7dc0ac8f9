use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ecocruise::config::{parse_ladder, Fingerprint, RoadSource, RunConfig, OUT_ENV};
use ecocruise::io::{self, g9, Meta};
use ecocruise::pipeline::{self, history_csv, metrics_meta, run_meta};
use ecocruise::sweep::{self, render_sweep, SweepRow, SweepRun};
use ecocruise::{report, Error, Result};
use ecocruise_core::{Artifacts, ControllerKind, Dataset, MlpModel, RoadProfile, VehicleParams};

/// Grade-preview eco cruise control: DP benchmark, inverse-optimal MPC
/// tuning, weight predictor training and closed-loop comparison.
#[derive(Parser)]
#[command(name = "ecocruise", version)]
struct Cli {
    /// TOML run configuration; command-line flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for default artifact paths and the pipeline cache.
    #[arg(long, global = true, env = OUT_ENV)]
    out_dir: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Cruise set point in m/s.
    #[arg(long, global = true)]
    v_ref: Option<f64>,
    /// Seed for road generation and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Key-value vehicle coefficient file.
    #[arg(long, global = true)]
    vehicle: Option<PathBuf>,
    /// MPC horizon in road steps.
    #[arg(long, global = true)]
    horizon: Option<usize>,
    /// Penalty on velocity-bound slack.
    #[arg(long, global = true)]
    soft_weight: Option<f64>,
}

#[derive(Args, Default)]
struct RoadArg {
    /// Road CSV (index,position_m,elevation_m,grade).
    #[arg(long, conflicts_with = "elevation")]
    road: Option<PathBuf>,
    /// Surveyed elevation CSV (distance_m,elevation_m), resampled on load.
    #[arg(long)]
    elevation: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic hilly road.
    GenRoad {
        #[arg(long)]
        length_km: f64,
        #[arg(long)]
        seed: u64,
        /// Road CSV to write.
        #[arg(long)]
        out: PathBuf,
        /// Largest absolute grade (fraction).
        #[arg(long, default_value_t = 0.05)]
        max_grade: f64,
    },
    /// Solve the whole-road minimum-fuel problem.
    SolveDp {
        #[command(flatten)]
        road: RoadArg,
        /// Trajectory CSV to write [default: <out-dir>/dp.csv].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recover the MPC fuel weight along a DP trajectory.
    Invert {
        #[command(flatten)]
        road: RoadArg,
        /// DP trajectory CSV from solve-dp.
        #[arg(long)]
        dp: PathBuf,
        /// Weight series CSV to write [default: <out-dir>/gamma.csv].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the weight predictor.
    Train {
        #[command(flatten)]
        road: RoadArg,
        /// Weight series CSV labelling the road (needs --road or --elevation).
        #[arg(long, conflicts_with = "dataset")]
        gamma: Option<PathBuf>,
        /// Ready-made dataset CSV (g_1..g_P,v_ref,gamma).
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Model file to write [default: <out-dir>/model.txt].
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the assembled dataset here.
        #[arg(long)]
        dataset_out: Option<PathBuf>,
        /// Epoch limit.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        /// SGD momentum in [0, 1).
        #[arg(long)]
        momentum: Option<f64>,
    },
    /// Run one controller in closed loop and print its summary row.
    Simulate {
        #[command(flatten)]
        road: RoadArg,
        #[arg(long, value_enum)]
        controller: Controller,
        /// Fixed MPC weight (fixed controller only).
        #[arg(long)]
        gamma: Option<f64>,
        #[command(flatten)]
        art: ArtifactArgs,
        /// Trajectory CSV output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fixed-weight ladder plus AT-MPC, PT-MPC, PI and DP replay.
    Sweep {
        #[command(flatten)]
        road: RoadArg,
        /// `lo:hi:count` or comma list.
        #[arg(long)]
        gammas: Option<String>,
        #[command(flatten)]
        art: ArtifactArgs,
        /// Sweep CSV to write [default: <out-dir>/sweep.csv].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every stage with fingerprint-keyed caching.
    Pipeline {
        #[command(flatten)]
        road: RoadArg,
        /// Generate the evaluation road with this length instead.
        #[arg(long, conflicts_with_all = ["road", "elevation"])]
        length_km: Option<f64>,
        /// Fixed-weight ladder, `lo:hi:count` or comma list.
        #[arg(long)]
        gammas: Option<String>,
    },
    /// Summarize sweep CSVs and export plot data.
    Report {
        #[arg(required = true)]
        sweeps: Vec<PathBuf>,
        /// Directory for one Pareto scatter CSV per sweep.
        #[arg(long)]
        plot_dir: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ArtifactArgs {
    /// Trained model (AT-MPC).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Weight series CSV (PT-MPC).
    #[arg(long)]
    gamma_series: Option<PathBuf>,
    /// DP trajectory CSV (DP replay).
    #[arg(long)]
    dp: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Controller {
    #[value(alias = "at-mpc")]
    At,
    #[value(alias = "pt-mpc")]
    Pt,
    #[value(alias = "lmpc")]
    Fixed,
    Pi,
    #[value(alias = "dp-replay")]
    Dp,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

/// Config file, then flags.
fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(d) = &cli.out_dir {
        cfg.out_dir = d.clone();
    }
    let c = &cli.common;
    if let Some(v) = c.v_ref {
        cfg.v_ref = v;
    }
    if c.seed.is_some() {
        cfg.seed = c.seed;
    }
    if let Some(f) = &c.vehicle {
        cfg.vehicle.file = Some(f.clone());
    }
    if let Some(n) = c.horizon {
        cfg.mpc.horizon = n;
    }
    if let Some(w) = c.soft_weight {
        cfg.mpc.soft_weight = w;
    }
    Ok(cfg)
}

fn apply_road(cfg: &mut RunConfig, road: &RoadArg) {
    if let Some(p) = &road.road {
        cfg.road = RoadSource::from_file(p);
    } else if let Some(p) = &road.elevation {
        cfg.road = RoadSource { elevation: Some(p.clone()), ..RoadSource::default() };
    }
}

/// Validated config, vehicle parameters and the evaluation road.
fn prepare(mut cfg: RunConfig, road: &RoadArg) -> Result<(RunConfig, VehicleParams, RoadProfile)> {
    apply_road(&mut cfg, road);
    if cfg.road == RoadSource::default() {
        return Err(Error::Usage("no road given: pass --road or --elevation, or set [road] in --config".into()));
    }
    cfg.validate()?;
    let params = cfg.vehicle.params()?;
    let road = cfg.road.load(cfg.seed, params.ds)?;
    Ok((cfg, params, road))
}

fn fingerprint(cmd: &str, cfg: &RunConfig, inputs: &[&Path]) -> Result<String> {
    let mut fp = Fingerprint::new(cmd).str(&cfg.to_toml()).str(&cfg.road.fingerprint(cfg.seed, cfg.vehicle.params()?.ds)?);
    for p in inputs {
        fp = fp.str(&io::read_text(p)?);
    }
    Ok(fp.finish())
}

fn out_path(cfg: &RunConfig, explicit: &Option<PathBuf>, default: &str) -> PathBuf {
    explicit.clone().unwrap_or_else(|| cfg.out_dir.join(default))
}

fn write(path: &Path, text: &str) -> Result<()> {
    io::write_atomic(path, text)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match &cli.cmd {
        Cmd::GenRoad { length_km, seed, out, max_grade } => {
            let src = RoadSource { max_grade: Some(*max_grade), ..RoadSource::generated(*length_km, *seed) };
            let cfg = RunConfig { seed: Some(*seed), road: src, ..cfg };
            cfg.validate()?;
            let params = cfg.vehicle.params()?;
            let road = cfg.road.load(cfg.seed, params.ds)?;
            let fp = cfg.road.fingerprint(cfg.seed, params.ds)?;
            let meta = run_meta(&cfg, &fp).with("length_km", g9(*length_km)).with("max_grade", g9(*max_grade));
            write(out, &io::render_road(&road, &meta))
        }
        Cmd::SolveDp { road, out } => {
            let (cfg, params, r) = prepare(cfg, road)?;
            let sol = pipeline::solve_dp(&params, &r, &cfg)?;
            let fp = fingerprint("dp", &cfg, &[])?;
            let meta = run_meta(&cfg, &fp).with("total_fuel_kg", g9(sol.total_fuel)).with("cost", g9(sol.cost));
            eprintln!(
                "DP: fuel {:.4} kg, average speed {:.3} m/s",
                sol.total_fuel,
                sol.trajectory.vavg.last().copied().unwrap_or(0.0)
            );
            write(&out_path(&cfg, out, "dp.csv"), &io::render_trajectory(&sol.trajectory, &meta))
        }
        Cmd::Invert { road, dp, out } => {
            let (cfg, params, r) = prepare(cfg, road)?;
            let (traj, _) = io::read_trajectory(dp)?;
            let series = pipeline::invert(&params, &r, &traj, &cfg)?;
            let flagged = series.flags.iter().filter(|f| !f.is_clean()).count();
            eprintln!("recovered {} weights, {flagged} flagged", series.len());
            let fp = fingerprint("gamma", &cfg, &[dp])?;
            write(&out_path(&cfg, out, "gamma.csv"), &io::render_gamma(&series, r.ds(), &run_meta(&cfg, &fp)))
        }
        Cmd::Train { road, gamma, dataset, out, dataset_out, epochs, learning_rate, momentum } => {
            let mut cfg = cfg;
            if let Some(e) = epochs {
                cfg.train.epochs = *e;
            }
            if let Some(l) = learning_rate {
                cfg.train.learning_rate = *l;
            }
            if let Some(m) = momentum {
                cfg.train.momentum = *m;
            }
            let (data, inputs): (Dataset, Vec<&Path>) = match (dataset, gamma) {
                (Some(d), _) => {
                    cfg.train.config(0).validate()?;
                    (io::read_dataset(d)?.0, vec![d.as_path()])
                }
                (None, Some(g)) => {
                    let (cfg2, _, r) = prepare(cfg.clone(), road)?;
                    cfg = cfg2;
                    let (series, _) = io::read_gamma(g)?;
                    (pipeline::dataset(&r, &series, &cfg)?, vec![g.as_path()])
                }
                (None, None) => return Err(Error::Usage("train needs --dataset or --gamma with --road".into())),
            };
            let fp = fingerprint("model", &cfg, &inputs)?;
            if let Some(p) = dataset_out {
                write(p, &io::render_dataset(&data, &run_meta(&cfg, &fp)))?;
            }
            let (outcome, test) = pipeline::train(&data, &cfg)?;
            let meta = metrics_meta(run_meta(&cfg, &fp), &test)
                .with("best_epoch", outcome.history.best_epoch)
                .with("restarts", outcome.history.restarts);
            eprintln!(
                "trained {} epochs (best {}), test scaled MSE {:.3e}, MAE {:.3e}",
                outcome.history.train_loss.len(),
                outcome.history.best_epoch,
                test.mse_scaled,
                test.mae_scaled
            );
            let path = out_path(&cfg, out, "model.txt");
            write(&path.with_extension("history.csv"), &history_csv(&outcome, &meta))?;
            write(&path, &io::render_model(&outcome.model, &meta))
        }
        Cmd::Simulate { road, controller, gamma, art, out } => {
            let (cfg, params, r) = prepare(cfg, road)?;
            let kind = match controller {
                Controller::At => ControllerKind::AtMpc,
                Controller::Pt => ControllerKind::PtMpc,
                Controller::Fixed => ControllerKind::FixedLmpc { gamma: gamma.unwrap_or(cfg.mpc.gamma) },
                Controller::Pi => cfg.pi.kind(),
                Controller::Dp => ControllerKind::DpReplay,
            };
            if gamma.is_some() && !matches!(controller, Controller::Fixed) {
                return Err(Error::Usage("--gamma only applies to --controller fixed".into()));
            }
            let loaded = Loaded::read(art)?;
            let result = sweep::simulate(&pipeline::setup(&cfg), kind, &r, &params, &loaded.artifacts());
            let run = SweepRun { kind, result };
            let row = run.row();
            let fp = fingerprint("simulate", &cfg, &art.paths())?;
            let meta = run_meta(&cfg, &fp).with("controller", kind.label());
            print!("{}", render_sweep(std::slice::from_ref(&row), &meta));
            let result = run.result?;
            if let Some(p) = out {
                write(p, &io::render_trajectory(&result.trajectory, &meta))?;
            }
            Ok(())
        }
        Cmd::Sweep { road, gammas, art, out } => {
            let (cfg, params, r) = prepare(cfg, road)?;
            let ladder = parse_ladder(gammas.as_deref().unwrap_or(&cfg.sweep.gammas))?;
            let loaded = Loaded::read(art)?;
            let runs = sweep::pareto_sweep(&pipeline::setup(&cfg), &r, &params, &ladder, &loaded.artifacts())?;
            let rows: Vec<SweepRow> = runs.iter().map(SweepRun::row).collect();
            let fp = fingerprint("sweep", &cfg, &art.paths())?;
            let meta = run_meta(&cfg, &fp).with("ladder", ladder.iter().map(|g| g9(*g)).collect::<Vec<_>>().join(" "));
            let path = out_path(&cfg, out, "sweep.csv");
            write(&path, &render_sweep(&rows, &meta))?;
            print!("{}", report::render(&path.display().to_string(), &rows));
            Ok(())
        }
        Cmd::Pipeline { road, length_km, gammas } => {
            let mut cfg = cfg;
            apply_road(&mut cfg, road);
            if let Some(km) = length_km {
                cfg.road = RoadSource { length_km: Some(*km), ..RoadSource::default() };
            }
            if let Some(g) = gammas {
                parse_ladder(g)?;
                cfg.sweep.gammas = g.clone();
            }
            if cfg.road == RoadSource::default() {
                return Err(Error::Usage("no road given: pass --road, --elevation or --length-km, or use --config".into()));
            }
            let out = pipeline::run_pipeline(&cfg)?;
            for s in &out.stages {
                eprintln!("{:<8} {:<6} {}", s.stage, if s.cached { "cached" } else { "built" }, s.path.display());
            }
            if let (Some(m), Some(a)) = (out.test_mse_scaled, out.test_mae_scaled) {
                eprintln!("model test scaled MSE {m:.3e}, MAE {a:.3e}");
            }
            print!("{}", out.report);
            Ok(())
        }
        Cmd::Report { sweeps, plot_dir } => {
            for p in sweeps {
                let (rows, meta) = sweep::read_sweep(p)?;
                print!("{}", report::render(&p.display().to_string(), &rows));
                if let Some(dir) = plot_dir {
                    let stem = p.file_stem().map_or("sweep".into(), |s| s.to_string_lossy().into_owned());
                    let meta = Meta::new().with("source", p.display()).with("fingerprint", meta.get("fingerprint").unwrap_or("-"));
                    write(&dir.join(format!("{stem}_pareto.csv")), &report::plot_csv(&rows, &meta))?;
                }
            }
            Ok(())
        }
    }
}

/// Artifacts read from disk for simulate/sweep.
struct Loaded {
    model: Option<MlpModel>,
    series: Option<ecocruise_core::GammaSeries>,
    dp_torque: Option<Vec<f64>>,
}

impl ArtifactArgs {
    fn paths(&self) -> Vec<&Path> {
        [&self.model, &self.gamma_series, &self.dp].into_iter().flatten().map(PathBuf::as_path).collect()
    }
}

impl Loaded {
    fn read(a: &ArtifactArgs) -> Result<Self> {
        Ok(Self {
            model: a.model.as_deref().map(io::read_model).transpose()?.map(|(m, _)| m),
            series: a.gamma_series.as_deref().map(io::read_gamma).transpose()?.map(|(s, _)| s),
            dp_torque: a.dp.as_deref().map(io::read_trajectory).transpose()?.map(|(t, _)| t.te),
        })
    }

    fn artifacts(&self) -> Artifacts<'_> {
        Artifacts { model: self.model.as_ref(), gamma_series: self.series.as_ref(), dp_torque: self.dp_torque.as_deref() }
    }
}
