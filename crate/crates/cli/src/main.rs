//! `clothdiff`: dataset generation, training, evaluation, planning episodes
//! and plot series from the command line.
//!
//! Exit codes: 0 on success, 2 for configuration errors, 3 for numerical
//! failures (simulation blow-ups, non-finite losses or samples, failing
//! gradient checks) and 1 for anything else.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use clothdiff_core::clothsim::{SimParams, Simulator};
use clothdiff_core::dynamics::{train_ddm, DdmConfig, DdmModel, Transition};
use clothdiff_core::geometry::{parse_obj, write_obj, PointCloud};
use clothdiff_core::io::{
    load_ddm, load_dpm, points_from_file, save_ddm, save_dpm, ClothSpec, TensorFile,
};
use clothdiff_core::perception::{train_dpm, DpmConfig, DpmModel};
use clothdiff_core::pipeline::*;
use clothdiff_core::planner::*;
use clothdiff_core::training::TrainConfig;
use clothdiff_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

const SEED_VAR: &str = "CLOTHDIFF_SEED";

#[derive(Parser)]
#[command(
    name = "clothdiff",
    version,
    about = "Diffusion-based cloth perception, dynamics and planning"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate a dynamics or perception dataset.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the perception model on a perception dataset.
    TrainDpm {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the dynamics model on a dynamics dataset.
    TrainDdm {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct a full mesh from a point cloud tensor file.
    Estimate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        cloud: PathBuf,
        /// Canonical template as OBJ.
        #[arg(long)]
        canonical: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Autoregressive rollout of a recorded trajectory with per-step metrics.
    Rollout {
        #[arg(long)]
        ckpt: PathBuf,
        /// `*_states.cdt` file; the matching `*_actions.cdt` is read alongside.
        #[arg(long)]
        traj: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run one MPC episode on a task.
    Plan {
        #[arg(long, value_enum)]
        dynamics: DynamicsArg,
        #[arg(long, value_enum)]
        perception: PerceptionArg,
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metrics of a checkpoint on a dataset with 95% intervals.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Rollout length for dynamics checkpoints.
        #[arg(long, default_value_t = 20)]
        horizon: usize,
        /// Best-of-n estimates for perception checkpoints.
        #[arg(long, default_value_t = 1)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, value_enum, default_value = "all")]
        scope: ScopeArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// `step,emd_mean,emd_ci95` CSV from a dynamics report or an episode.
    PlotEmit {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DynamicsArg {
    Sim,
    Ddm,
}

#[derive(Clone, Copy, ValueEnum)]
enum PerceptionArg {
    Oracle,
    Dpm,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Ops,
    Dpm,
    Ddm,
    All,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TrainDpmFile {
    model: DpmConfig,
    train: TrainConfig,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TrainDdmFile {
    model: DdmConfig,
    train: TrainConfig,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum TaskKind {
    #[default]
    DiagonalFold,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TaskFile {
    task: TaskKind,
    cloth: ClothSpec,
    sim: SimParams,
    planner: PlannerConfig,
    episode: EpisodeConfig,
    seed: u64,
    /// Required with `--dynamics ddm`.
    ddm_ckpt: Option<PathBuf>,
    /// Required with `--perception dpm`.
    dpm_ckpt: Option<PathBuf>,
    /// Also run the random-action baseline on the same seed.
    baseline: bool,
}

#[derive(Serialize)]
struct EpisodeOut<'a> {
    dynamics: &'a str,
    perception: &'a str,
    seed: u64,
    episode: &'a Episode,
    baseline: Option<&'a Episode>,
}

/// CLI failure with its exit code.
struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) => 2,
            e if e.is_numerical() => 3,
            _ => 1,
        };
        Self {
            code,
            msg: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Error::from(e).into()
    }
}

fn config_error(msg: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        msg: msg.into(),
    }
}

type Res<T> = std::result::Result<T, Failure>;

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Res<T> {
    let Some(p) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(p).map_err(|e| config_error(format!("{}: {e}", p.display())))?;
    serde_json::from_str(&text).map_err(|e| config_error(format!("{}: {e}", p.display())))
}

/// `CLOTHDIFF_SEED` when set, otherwise the configured seed.
fn master_seed(configured: u64) -> Res<u64> {
    match std::env::var(SEED_VAR) {
        Ok(s) => s
            .trim()
            .parse()
            .map_err(|_| config_error(format!("{SEED_VAR}={s:?} is not an unsigned integer"))),
        Err(_) => Ok(configured),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Res<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn ckpt_kind(dir: &Path) -> Res<String> {
    let v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    v.get("kind")
        .and_then(|k| k.as_str())
        .map(str::to_owned)
        .ok_or_else(|| Failure {
            code: 1,
            msg: "checkpoint manifest has no kind".into(),
        })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn run(cmd: Cmd) -> Res<()> {
    match cmd {
        Cmd::GenData { config, out } => {
            let mut cfg: GenDataConfig = read_config(config.as_deref())?;
            cfg.seed = master_seed(cfg.seed)?;
            let m = gen_data(&cfg, &out)?;
            log::info!(
                "wrote {} {:?} records to {}",
                m.records.len(),
                m.kind,
                out.display()
            );
        }
        Cmd::TrainDpm { config, data, out } => {
            let mut cfg: TrainDpmFile = read_config(config.as_deref())?;
            cfg.train.seed = master_seed(cfg.train.seed)?;
            let (manifest, samples) = load_perception(&data)?;
            let mut model = DpmModel::new(&manifest.cloth.build()?, cfg.model)?;
            let report = train_dpm(&mut model, &samples, &cfg.train)?;
            save_dpm(&out, &model, &manifest.cloth)?;
            write_json(&out.join("train_report.json"), &report)?;
            log::info!("final smoothed loss {:.4}", report.final_smoothed(100));
        }
        Cmd::TrainDdm { config, data, out } => {
            let mut cfg: TrainDdmFile = read_config(config.as_deref())?;
            cfg.train.seed = master_seed(cfg.train.seed)?;
            let (manifest, trajs) = load_trajectories(&data)?;
            let mut model = DdmModel::new(&manifest.cloth.build()?, cfg.model)?;
            let mut windows: Vec<Transition> = Vec::new();
            for t in &trajs {
                windows.extend(t.transitions(model.config.history, model.config.future)?);
            }
            log::info!(
                "{} transitions from {} trajectories",
                windows.len(),
                trajs.len()
            );
            let report = train_ddm(&mut model, &windows, &cfg.train)?;
            save_ddm(&out, &model, &manifest.cloth)?;
            write_json(&out.join("train_report.json"), &report)?;
            log::info!("final smoothed loss {:.4}", report.final_smoothed(100));
        }
        Cmd::Estimate {
            ckpt,
            cloud,
            canonical,
            out,
            samples,
            seed,
        } => {
            let (model, _) = load_dpm(&ckpt)?;
            let canonical = parse_obj(&fs::read_to_string(&canonical)?)?;
            let cloud = PointCloud::new(points_from_file(&TensorFile::read(&cloud)?)?)?;
            let mut rng = ChaCha8Rng::seed_from_u64(master_seed(seed)?);
            let mesh = model.estimate(&canonical, &cloud, &mut rng, samples.max(1))?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(&out, write_obj(&mesh))?;
        }
        Cmd::Rollout {
            ckpt,
            traj,
            out,
            horizon,
            seed,
        } => {
            let (model, _) = load_ddm(&ckpt)?;
            let name = traj.to_string_lossy();
            let Some(stem) = name.strip_suffix("_states.cdt") else {
                return Err(config_error("--traj must name a *_states.cdt file"));
            };
            let actions = PathBuf::from(format!("{stem}_actions.cdt"));
            let t = load_trajectory(&traj, &actions, &model.canonical)?;
            let h = horizon.unwrap_or(t.actions.len());
            let report =
                evaluate_dynamics(&model, std::slice::from_ref(&t), h, master_seed(seed)?)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(master_seed(seed)?, 0));
            let preds = model.rollout(
                &t.history_at(0, model.config.history),
                &t.actions[..h],
                &mut rng,
            )?;
            fs::create_dir_all(&out)?;
            for (i, p) in preds.iter().enumerate() {
                fs::write(out.join(format!("step{:03}.obj", i + 1)), write_obj(p))?;
            }
            write_json(&out.join("metrics.json"), &report)?;
        }
        Cmd::Plan {
            dynamics,
            perception,
            task,
            out,
        } => plan_cmd(dynamics, perception, &task, &out)?,
        Cmd::Evaluate {
            ckpt,
            data,
            out,
            horizon,
            samples,
            seed,
        } => {
            let seed = master_seed(seed)?;
            let kind = read_manifest(&data)?.kind;
            let report = match (ckpt_kind(&ckpt)?.as_str(), kind) {
                ("dpm", DatasetKind::Perception) => {
                    let (model, _) = load_dpm(&ckpt)?;
                    evaluate_perception(&model, &load_perception(&data)?.1, samples, seed)?
                }
                ("ddm", DatasetKind::Dynamics) => {
                    let (model, _) = load_ddm(&ckpt)?;
                    evaluate_dynamics(&model, &load_trajectories(&data)?.1, horizon, seed)?
                }
                (k, d) => {
                    return Err(config_error(format!(
                        "a {k} checkpoint cannot be evaluated on a {d:?} dataset"
                    )))
                }
            };
            write_json(&out.join("report.json"), &report)?;
            fs::write(out.join("records.csv"), records_csv(&report))?;
            for (name, s) in &report.metrics {
                log::info!("{name}: {:.4e} +- {:.1e} (n = {})", s.mean, s.ci95, s.n);
            }
        }
        Cmd::Gradcheck { scope, out } => {
            let scope = match scope {
                ScopeArg::Ops => GradScope::Ops,
                ScopeArg::Dpm => GradScope::Dpm,
                ScopeArg::Ddm => GradScope::Ddm,
                ScopeArg::All => GradScope::All,
            };
            let results = run_gradcheck(scope, 0)?;
            let text = serde_json::to_string_pretty(&results)? + "\n";
            match out {
                Some(p) => fs::write(p, text)?,
                None => print!("{text}"),
            }
            let failing: Vec<&str> = results
                .iter()
                .filter(|r| !r.passed)
                .map(|r| r.name.as_str())
                .collect();
            log::info!(
                "{} of {} cases pass",
                results.len() - failing.len(),
                results.len()
            );
            if !failing.is_empty() {
                return Err(Failure {
                    code: 3,
                    msg: format!("gradient check failed for {failing:?}"),
                });
            }
        }
        Cmd::PlotEmit { input, out } => {
            let text = fs::read_to_string(&input)?;
            let series = if let Ok(r) = serde_json::from_str::<EvalReport>(&text) {
                if r.per_step.is_empty() {
                    return Err(config_error("report has no per-step series"));
                }
                report_series(&r)
            } else {
                let v: serde_json::Value = serde_json::from_str(&text)?;
                let ep: Episode = serde_json::from_value(v.get("episode").cloned().unwrap_or(v))
                    .map_err(|e| {
                        config_error(format!(
                            "{}: neither a report nor an episode ({e})",
                            input.display()
                        ))
                    })?;
                ep.emd
                    .iter()
                    .enumerate()
                    .skip(1)
                    .map(|(i, &e)| {
                        (
                            i,
                            Summary {
                                mean: e,
                                ci95: 0.0,
                                n: 1,
                            },
                        )
                    })
                    .collect()
            };
            let csv = plot_emit(&series);
            match out {
                Some(p) => fs::write(p, csv)?,
                None => print!("{csv}"),
            }
        }
    }
    Ok(())
}

fn plan_cmd(dynamics: DynamicsArg, perception: PerceptionArg, task: &Path, out: &Path) -> Res<()> {
    let cfg: TaskFile = read_config(Some(task))?;
    let seed = master_seed(cfg.seed)?;
    let canonical = cfg.cloth.build()?;
    let sim = Simulator::new(&canonical, cfg.sim.clone())?;
    let TaskKind::DiagonalFold = cfg.task;
    let (initial, target) = diagonal_fold_task(&sim, &canonical)?;

    let ckpt = |p: &Option<PathBuf>, what: &str| {
        p.clone()
            .ok_or_else(|| config_error(format!("task needs {what} for this mode")))
    };
    let dpm = match perception {
        PerceptionArg::Oracle => None,
        PerceptionArg::Dpm => Some(load_dpm(&ckpt(&cfg.dpm_ckpt, "dpm_ckpt")?)?.0),
    };
    let ddm = match dynamics {
        DynamicsArg::Sim => None,
        DynamicsArg::Ddm => Some(load_ddm(&ckpt(&cfg.ddm_ckpt, "ddm_ckpt")?)?.0),
    };
    for m in dpm
        .iter()
        .map(|m| &m.canonical)
        .chain(ddm.iter().map(|m| &m.canonical))
    {
        if !m.same_faces(&canonical) {
            return Err(config_error(
                "checkpoint cloth does not match the task cloth",
            ));
        }
    }
    let source = dpm.as_ref().map_or(StateSource::Oracle, StateSource::Dpm);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ep = match &ddm {
        Some(m) => mpc_episode(
            &sim,
            &mut DdmDynamics { model: m },
            &source,
            &initial,
            &target,
            &cfg.planner,
            &cfg.episode,
            &mut rng,
        )?,
        None => {
            let mut d = SimDynamics {
                sim: &sim,
                settle_steps: cfg.episode.settle_steps,
            };
            mpc_episode(
                &sim,
                &mut d,
                &source,
                &initial,
                &target,
                &cfg.planner,
                &cfg.episode,
                &mut rng,
            )?
        }
    };
    let baseline = if cfg.baseline {
        Some(random_episode(
            &sim,
            &initial,
            &target,
            &cfg.planner,
            &cfg.episode,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )?)
    } else {
        None
    };
    fs::create_dir_all(out)?;
    let names = (
        match dynamics {
            DynamicsArg::Sim => "sim",
            DynamicsArg::Ddm => "ddm",
        },
        match perception {
            PerceptionArg::Oracle => "oracle",
            PerceptionArg::Dpm => "dpm",
        },
    );
    write_json(
        &out.join("episode.json"),
        &EpisodeOut {
            dynamics: names.0,
            perception: names.1,
            seed,
            episode: &ep,
            baseline: baseline.as_ref(),
        },
    )?;
    let series: Vec<(usize, Summary)> = ep
        .emd
        .iter()
        .enumerate()
        .skip(1)
        .map(|(i, &e)| {
            (
                i,
                Summary {
                    mean: e,
                    ci95: 0.0,
                    n: 1,
                },
            )
        })
        .collect();
    fs::write(out.join("emd.csv"), plot_emit(&series))?;
    // Success for a range of thresholds, as fractions of the initial EMD.
    let best =
        ep.emd.iter().copied().fold(f64::INFINITY, f64::min) / ep.emd[0].max(f64::MIN_POSITIVE);
    let mut sweep = String::from("threshold,success\n");
    for i in 1..=10 {
        let th = 0.05 * i as f64;
        sweep.push_str(&format!("{th:.2},{}\n", u8::from(best < th)));
    }
    fs::write(out.join("threshold_sweep.csv"), sweep)?;
    log::info!(
        "EMD {:.4} -> {:.4} over {} MPC steps, success: {}",
        ep.emd[0],
        ep.emd[ep.emd.len() - 1],
        ep.emd.len() - 1,
        ep.success
    );
    Ok(())
}
