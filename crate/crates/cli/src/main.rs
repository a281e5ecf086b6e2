//! `fepdiff` command-line entry points.
//!
//! Exit codes: 0 on success, 2 for a missing scene, 3 for incompatible
//! checkpoint dimensions, 1 for any other failure. Outputs are written once
//! at the end of a command and removed again if the command fails.

mod plot;
mod predictions;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fepdiff::checkpoint::{write_atomic, Checkpoint, Stage};
use fepdiff::config::ExperimentConfig;
use fepdiff::dataio::{parse_scene, window_scene, Manifest, DEFAULT_DELTA, T_FUT, T_OBS};
use fepdiff::metrics::{self, AgentResult, EvalReport};
use fepdiff::pipeline::{self, BeliefModel, Predictor, PreparedArchive};
use fepdiff::{synthetic, Error};

use crate::plot::AgentPlot;
use crate::predictions::PredictionFile;

#[derive(Parser)]
#[command(name = "fepdiff", version, about = "Agent-centric pedestrian trajectory prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for every random choice; overrides the configured seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output path.
    #[arg(long)]
    out: PathBuf,
    /// Extra `key=value` configuration overrides, applied after `--config`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    /// Best of K hypotheses (minADE_K / minFDE_K).
    Stochastic,
    /// Most probable hypothesis only (ADE_1 / FDE_1).
    Deterministic,
}

#[derive(Subcommand)]
enum Command {
    /// Window every scene of a manifest into local observations.
    Prepare {
        #[command(flatten)]
        common: Common,
        /// Scene manifest; defaults to `data.manifest` of the config.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Held-out scene; defaults to the manifest's.
        #[arg(long)]
        scene: Option<String>,
        /// Neighborhood radius in meters.
        #[arg(long)]
        delta: Option<f64>,
    },
    /// Stage one: train the belief learner.
    TrainBelief {
        #[command(flatten)]
        common: Common,
    },
    /// Stage two: train the residual denoiser on a frozen belief checkpoint.
    TrainDiffusion {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        belief: PathBuf,
    },
    /// Score checkpoints (or an existing prediction file) on the held-out scene.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, required_unless_present = "predictions")]
        belief: Option<PathBuf>,
        #[arg(long)]
        diffusion: Option<PathBuf>,
        /// Score this prediction file instead of running a model.
        #[arg(long, conflicts_with_all = ["belief", "diffusion"])]
        predictions: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Mode::Stochastic)]
        mode: Mode,
        /// Skip the latency measurement.
        #[arg(long)]
        no_latency: bool,
    },
    /// Export K hypotheses per held-out agent as a prediction file.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        belief: PathBuf,
        #[arg(long)]
        diffusion: Option<PathBuf>,
        /// Predict only the first N agent windows.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Draw the predictions of one frame over the recorded scene.
    Plot {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        predictions: PathBuf,
        /// Scene file with the observed and ground-truth tracks.
        #[arg(long)]
        scene: PathBuf,
        /// Frame to draw; defaults to the first frame in the file.
        #[arg(long)]
        frame: Option<i64>,
        /// Restrict to these agents (repeatable).
        #[arg(long = "agent")]
        agents: Vec<i64>,
        #[arg(long, default_value_t = 800)]
        width: u32,
        #[arg(long, default_value_t = 600)]
        height: u32,
    },
    /// Write a synthetic five-scene benchmark and its manifest.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Recorded frames per scene.
        #[arg(long, default_value_t = 600)]
        frames: usize,
        #[arg(long, default_value = "zara1")]
        heldout: String,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Prepare { common, .. }
            | Command::TrainBelief { common }
            | Command::TrainDiffusion { common, .. }
            | Command::Eval { common, .. }
            | Command::Predict { common, .. }
            | Command::Plot { common, .. }
            | Command::Simulate { common, .. } => common,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .format_target(false)
        .init();
    let cli = Cli::parse();
    let out = cli.command.common().out.clone();
    let existed = out.exists();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if !existed {
                remove_output(&out);
            }
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(Error::MissingScene(_)) => 2,
        Some(Error::Incompatible(_)) => 3,
        _ => 1,
    }
}

fn remove_output(path: &Path) {
    if path.is_dir() {
        let _ = std::fs::remove_dir_all(path);
    } else if path.exists() {
        let _ = std::fs::remove_file(path);
    }
}

/// Config from `--config` (or `fallback`), then `--set` overrides, then `--seed`.
fn resolve_config(common: &Common, fallback: Option<&ExperimentConfig>) -> Result<ExperimentConfig> {
    let mut cfg = match (&common.config, fallback) {
        (Some(path), _) => {
            ExperimentConfig::load(path).with_context(|| format!("loading config {}", path.display()))?
        }
        (None, Some(c)) => c.clone(),
        (None, None) => ExperimentConfig::default(),
    };
    for kv in &common.overrides {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("override `{kv}` is not key=value"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.seed = common.seed;
    cfg.validate()?;
    Ok(cfg)
}

fn load_checkpoint(path: &Path, stage: Stage) -> Result<Checkpoint> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    if ckpt.stage != stage {
        bail!("{} is not a {stage:?} checkpoint", path.display());
    }
    Ok(ckpt)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Prepare {
            common,
            manifest,
            scene,
            delta,
        } => cmd_prepare(&common, manifest, scene, delta),
        Command::TrainBelief { common } => cmd_train_belief(&common),
        Command::TrainDiffusion { common, belief } => cmd_train_diffusion(&common, &belief),
        Command::Eval {
            common,
            belief,
            diffusion,
            predictions,
            mode,
            no_latency,
        } => match predictions {
            Some(p) => cmd_eval_file(&common, &p, mode),
            None => cmd_eval(
                &common,
                &belief.expect("clap requires --belief"),
                diffusion.as_deref(),
                mode,
                !no_latency,
            ),
        },
        Command::Predict {
            common,
            belief,
            diffusion,
            limit,
        } => cmd_predict(&common, &belief, diffusion.as_deref(), limit),
        Command::Plot {
            common,
            predictions,
            scene,
            frame,
            agents,
            width,
            height,
        } => cmd_plot(&common, &predictions, &scene, frame, &agents, width, height),
        Command::Simulate {
            common,
            frames,
            heldout,
        } => {
            let manifest = synthetic::write_benchmark(&common.out, frames, common.seed, &heldout)?;
            println!("wrote {}", manifest.display());
            Ok(())
        }
    }
}

fn cmd_prepare(common: &Common, manifest: Option<PathBuf>, scene: Option<String>, delta: Option<f64>) -> Result<()> {
    let cfg = resolve_config(common, None)?;
    let path = manifest
        .or(cfg.data.manifest.clone())
        .context("no manifest given (use --manifest or data.manifest)")?;
    let manifest = Manifest::load(&path)?;
    let heldout = scene
        .or(cfg.data.heldout.clone())
        .or(manifest.heldout.clone())
        .context("no held-out scene given (use --scene or heldout= in the manifest)")?;
    let delta = delta.unwrap_or(if common.config.is_some() {
        cfg.data.delta
    } else {
        DEFAULT_DELTA
    });
    let archive = PreparedArchive::build(&manifest, &heldout, delta)?;
    write_atomic(&common.out, archive.to_json()?.as_bytes())?;
    println!("{:<12} {:>8} {:>14}", "scene", "samples", "mean_neighbors");
    for (name, s) in &archive.scenes {
        let tag = if *name == heldout { " (held out)" } else { "" };
        println!("{name:<12} {:>8} {:>14.3}{tag}", s.samples, s.mean_neighbors);
    }
    Ok(())
}

fn cmd_train_belief(common: &Common) -> Result<()> {
    let cfg = resolve_config(common, None)?;
    let split = pipeline::load_split(&cfg)?;
    log::info!(
        "held-out {}: train {} val {} test {} samples, config {}",
        split.heldout,
        split.train.len(),
        split.val.len(),
        split.test.len(),
        cfg.hash()
    );
    let run = pipeline::train_belief(&cfg, &split.train, &split.val, &mut log_line)?;
    run.checkpoint.save(&common.out)?;
    log::info!(
        "best epoch {} of {}, saved {}",
        run.best_epoch,
        run.epoch_totals.len(),
        common.out.display()
    );
    Ok(())
}

fn cmd_train_diffusion(common: &Common, belief: &Path) -> Result<()> {
    let ckpt = load_checkpoint(belief, Stage::Belief)?;
    let cfg = resolve_config(common, Some(&ckpt.config))?;
    ckpt.check_compatible(&cfg)?;
    let model = BeliefModel::from_checkpoint(&ckpt)?;
    let split = pipeline::load_split(&cfg)?;
    let run = pipeline::train_diffusion(&cfg, &model, &split.train, &mut log_line)?;
    run.checkpoint.save(&common.out)?;
    log::info!("saved {}", common.out.display());
    Ok(())
}

fn log_line(line: &str) {
    if line.starts_with("step=") {
        log::debug!("{line}");
    } else {
        log::info!("{line}");
    }
}

fn predictor(common: &Common, belief: &Path, diffusion: Option<&Path>) -> Result<(ExperimentConfig, Predictor)> {
    let b = load_checkpoint(belief, Stage::Belief)?;
    let d = diffusion.map(|p| load_checkpoint(p, Stage::Diffusion)).transpose()?;
    let cfg = resolve_config(common, Some(&b.config))?;
    b.check_compatible(&cfg)?;
    if let Some(d) = &d {
        d.check_compatible(&cfg)?;
    }
    Ok((cfg, Predictor::from_checkpoints(&b, d.as_ref())?))
}

fn report_text(report: &EvalReport, mode: Mode, seeds: usize) -> String {
    let label = match mode {
        Mode::Stochastic => format!("stochastic (best of {}), averaged over {seeds} seed(s)", report.k),
        Mode::Deterministic => format!("deterministic (most probable hypothesis), averaged over {seeds} seed(s)"),
    };
    format!("mode: {label}\n{}", report.table())
}

fn write_report(out: &Path, report: &EvalReport, mode: Mode) -> Result<()> {
    let tag = match mode {
        Mode::Stochastic => "stochastic",
        Mode::Deterministic => "deterministic",
    };
    write_atomic(out, format!("mode={tag}\n{}", report.to_kv()).as_bytes())?;
    Ok(())
}

fn cmd_eval(common: &Common, belief: &Path, diffusion: Option<&Path>, mode: Mode, latency: bool) -> Result<()> {
    let (cfg, predictor) = predictor(common, belief, diffusion)?;
    let split = pipeline::load_split(&cfg)?;
    let seeds: Vec<u64> = (0..cfg.eval_seeds as u64).map(|i| cfg.seed + i).collect();
    let report = pipeline::evaluate(&predictor, &split.test, &seeds, cfg.belief.batch_size, latency)?;
    print!("{}", report_text(&report, mode, seeds.len()));
    write_report(&common.out, &report, mode)
}

/// Scores a prediction file against the held-out scene's ground truth.
fn cmd_eval_file(common: &Common, path: &Path, mode: Mode) -> Result<()> {
    let cfg = resolve_config(common, None)?;
    let file = PredictionFile::load(path)?;
    let split = pipeline::load_split(&cfg)?;
    let mut results = Vec::new();
    for a in &file.agents {
        let sample = split
            .test
            .iter()
            .find(|s| s.obs.ego.target_id == a.agent_id && s.obs.ego.frame == a.frame)
            .with_context(|| format!("agent {} at frame {} is not in the held-out scene", a.agent_id, a.frame))?;
        let gt = &sample.obs.ego.future;
        let (min_ade, min_fde) = metrics::min_over_k(&a.trajectories, gt)?;
        let set = pipeline::PredictionSet {
            scene: sample.scene.clone(),
            target_id: a.agent_id,
            frame: a.frame,
            pi: a.pi.clone(),
            trajectories: a.trajectories.clone(),
            proxies: Vec::new(),
        };
        let pick = pipeline::select_deterministic(&set)?;
        results.push(AgentResult {
            scene: sample.scene.clone(),
            min_ade,
            min_fde,
            ade_1: metrics::ade(pick, gt)?,
            fde_1: metrics::fde(pick, gt)?,
        });
    }
    let report = EvalReport::from_results(&results, file.k);
    print!("{}", report_text(&report, mode, 1));
    write_report(&common.out, &report, mode)
}

fn cmd_predict(common: &Common, belief: &Path, diffusion: Option<&Path>, limit: Option<usize>) -> Result<()> {
    let (cfg, predictor) = predictor(common, belief, diffusion)?;
    let split = pipeline::load_split(&cfg)?;
    let mut test = split.test;
    if let Some(n) = limit {
        test.truncate(n);
    }
    let sets = predictor.predict_all(&test, cfg.seed, cfg.belief.batch_size)?;
    let file = PredictionFile::from_sets(&split.heldout, cfg.seed, &cfg.hash(), &sets)?;
    write_atomic(&common.out, file.to_text().as_bytes())?;
    println!(
        "wrote {} agents x {} hypotheses to {}",
        file.agents.len(),
        file.k,
        common.out.display()
    );
    Ok(())
}

fn cmd_plot(
    common: &Common,
    predictions: &Path,
    scene: &Path,
    frame: Option<i64>,
    agents: &[i64],
    width: u32,
    height: u32,
) -> Result<()> {
    let file = PredictionFile::load(predictions)?;
    let frame = match frame {
        Some(f) => f,
        None => file.agents.first().context("prediction file is empty")?.frame,
    };
    let table = parse_scene(scene)?;
    let windows = window_scene(&table, T_OBS, T_FUT)?;
    let mut plots = Vec::new();
    for a in file.agents.iter().filter(|a| a.frame == frame) {
        if !agents.is_empty() && !agents.contains(&a.agent_id) {
            continue;
        }
        let w = windows
            .iter()
            .find(|w| w.target_id == a.agent_id && w.frame == frame)
            .with_context(|| format!("agent {} at frame {frame} not found in {}", a.agent_id, scene.display()))?;
        plots.push(AgentPlot {
            history: w.history.clone(),
            truth: Some(w.future.clone()),
            hypotheses: a.trajectories.clone(),
        });
    }
    if plots.is_empty() {
        bail!("no predictions at frame {frame} for the requested agents");
    }
    plot::render(&plots, width, height, &common.out)?;
    println!(
        "plotted {} agent(s) at frame {frame} to {}",
        plots.len(),
        common.out.display()
    );
    Ok(())
}
