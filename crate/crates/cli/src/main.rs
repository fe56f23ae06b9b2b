use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use tubekit::prediction::PredictionHorizon;
use tubekit_cli::commands::{self, SweepRun, GRAD_TOLERANCE};
use tubekit_cli::config::{parse_list, RunConfig};

#[derive(Parser)]
#[command(
    name = "tubekit",
    version,
    about = "Online action-tube linking, prediction and evaluation"
)]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

/// Flags that override values from the `--config` file.
#[derive(Args)]
struct Overrides {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-video work.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Comma-separated overlap thresholds, e.g. 0.2,0.5,0.75.
    #[arg(long, global = true)]
    delta_list: Option<String>,
    /// Comma-separated observation percentages, e.g. 10,20,100.
    #[arg(long, global = true)]
    pct_list: Option<String>,
    /// Micro-tube NMS overlap threshold.
    #[arg(long, global = true)]
    nms: Option<f64>,
    #[arg(long, global = true)]
    link_lambda: Option<f64>,
    #[arg(long, global = true)]
    iou_gate: Option<f64>,
    /// Prediction horizon as DELTA_P,DELTA_F,N.
    #[arg(long, global = true)]
    horizon: Option<PredictionHorizon>,
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[arg(long, global = true)]
    detections: Option<PathBuf>,
    #[arg(long, short, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and detection stream.
    Synth {
        /// JSON scenario; defaults to the lane scenario from the config.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long)]
        videos: Option<usize>,
        #[arg(long)]
        frames: Option<u32>,
        #[arg(long)]
        actors: Option<usize>,
        #[arg(long)]
        center_sigma: Option<f64>,
    },
    /// Link micro-tubes into action tubes.
    Link {
        #[arg(long, default_value_t = 100)]
        pct: u32,
    },
    /// Link and complete tubes up to the end of each video.
    Predict {
        #[arg(long, default_value_t = 100)]
        pct: u32,
    },
    /// Evaluate one detection stream over every observation percentage.
    Eval,
    /// Evaluate several models into one long-format table.
    Sweep {
        /// MODEL=DETECTIONS pairs.
        #[arg(required = true)]
        runs: Vec<SweepRun>,
    },
    /// Finite-difference check of the loss gradients.
    CheckLoss {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 1e-6)]
        epsilon: f64,
    },
}

fn resolve(o: &Overrides) -> Result<RunConfig> {
    let mut cfg = match &o.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = o.seed {
        cfg.seed = v;
    }
    if let Some(v) = o.jobs {
        cfg.jobs = Some(v);
    }
    if let Some(v) = &o.delta_list {
        cfg.delta_list = parse_list(v).context("--delta-list")?;
    }
    if let Some(v) = &o.pct_list {
        cfg.pct_list = parse_list(v).context("--pct-list")?;
    }
    if let Some(v) = o.nms {
        cfg.nms = v;
    }
    if let Some(v) = o.link_lambda {
        cfg.link_lambda = v;
    }
    if let Some(v) = o.iou_gate {
        cfg.iou_gate = v;
    }
    if let Some(v) = o.horizon {
        cfg.horizon = v;
    }
    if o.manifest.is_some() {
        cfg.manifest = o.manifest.clone();
    }
    if o.detections.is_some() {
        cfg.detections = o.detections.clone();
    }
    if o.out.is_some() {
        cfg.out = o.out.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<ExitCode> {
    let mut cfg = resolve(&cli.overrides)?;
    if let Some(n) = cfg.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("starting worker pool")?;
    }
    match cli.command {
        Command::Synth {
            scenario,
            videos,
            frames,
            actors,
            center_sigma,
        } => {
            if let Some(v) = videos {
                cfg.synth.videos = v;
            }
            if let Some(v) = frames {
                cfg.synth.frames = v;
            }
            if let Some(v) = actors {
                cfg.synth.actors = v;
            }
            if let Some(v) = center_sigma {
                cfg.synth.noise.center_sigma = v;
            }
            let spec = match scenario {
                Some(p) => commands::load_scenario(&p)?,
                None => cfg.scenario(),
            };
            let out = RunConfig::require(&cfg.out, "out")?;
            let written = commands::cmd_synth(&spec, &out)?;
            println!(
                "wrote {} and {}",
                written.manifest.display(),
                written.detections.display()
            );
        }
        Command::Link { pct } => tubes(&cfg, pct, false)?,
        Command::Predict { pct } => tubes(&cfg, pct, true)?,
        Command::Eval => {
            let report = commands::cmd_eval(
                &cfg,
                &RunConfig::require(&cfg.manifest, "manifest")?,
                &RunConfig::require(&cfg.detections, "detections")?,
                &RunConfig::require(&cfg.out, "out")?,
            )?;
            print!("{}", commands::summarize(&report));
        }
        Command::Sweep { runs } => {
            let rows = commands::cmd_sweep(
                &cfg,
                &RunConfig::require(&cfg.manifest, "manifest")?,
                &runs,
                &RunConfig::require(&cfg.out, "out")?,
            )?;
            println!("wrote {} rows", rows.len());
        }
        Command::CheckLoss { trials, epsilon } => {
            let r = commands::cmd_check_loss(cfg.seed, trials, epsilon);
            println!("points checked:        {}", r.points_checked);
            println!("kink points moved:     {}", r.kink_points_skipped);
            println!("smooth-l1 max rel err: {:.3e}", r.smooth_l1_max_rel_err);
            println!(
                "softmax-ce max rel err: {:.3e}",
                r.cross_entropy_max_rel_err
            );
            if r.max_rel_err() >= GRAD_TOLERANCE {
                eprintln!("gradient check failed (tolerance {GRAD_TOLERANCE:e})");
                return Ok(ExitCode::FAILURE);
            }
            println!("ok");
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn tubes(cfg: &RunConfig, pct: u32, complete: bool) -> Result<()> {
    let file = commands::cmd_tubes(
        cfg,
        &RunConfig::require(&cfg.manifest, "manifest")?,
        &RunConfig::require(&cfg.detections, "detections")?,
        pct,
        complete,
        &RunConfig::require(&cfg.out, "out")?,
    )?;
    let n: usize = file.videos.iter().map(|v| v.tubes.len()).sum();
    println!("{} videos, {n} tubes", file.videos.len());
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
