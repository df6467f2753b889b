use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use jointvo::harness::{
    compute_alignment_error, export_scene, read_trajectory, run_odometry, write_outputs, Dataset, FrameSource,
    InitMode, SceneSource, SyntheticScene, VoConfig,
};

#[derive(Parser)]
#[command(name = "jointvo", version, about = "Monocular visual odometry with joint photometric and geometric alignment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Init {
    Gt,
    Filter,
}

#[derive(Subcommand)]
enum Command {
    /// Run odometry on a dataset directory or a synthetic scene file.
    Run {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_enum)]
        init: Option<Init>,
        /// Track and map in lockstep on one thread (deterministic).
        #[arg(long)]
        single_thread: bool,
        /// Drop corners and geometric residuals entirely.
        #[arg(long)]
        disable_indirect: bool,
        /// Keep corners out of the photometric terms.
        #[arg(long)]
        disable_direct_corners: bool,
        /// Replace the utility schedule with a constant weight.
        #[arg(long = "force-K", value_name = "K")]
        force_k: Option<f64>,
        /// Override any configuration key, e.g. `mapper.window_size=5`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Render a synthetic scene to a dataset directory.
    Render {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Evaluate a trajectory against ground truth.
    Eval {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
}

fn load_scene(path: &Path) -> anyhow::Result<SyntheticScene> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    SyntheticScene::from_toml(&text).with_context(|| format!("loading scene {}", path.display()))
}

#[allow(clippy::too_many_arguments)]
fn build_config(
    config: Option<&Path>,
    init: Option<Init>,
    single_thread: bool,
    disable_indirect: bool,
    disable_direct_corners: bool,
    force_k: Option<f64>,
    overrides: &[String],
) -> anyhow::Result<VoConfig> {
    let mut cfg = match config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            VoConfig::from_toml(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => VoConfig::default(),
    };
    for o in overrides {
        cfg.set(o)?;
    }
    if let Some(init) = init {
        cfg.init = match init {
            Init::Gt => InitMode::Gt,
            Init::Filter => InitMode::Filter,
        };
    }
    if single_thread {
        cfg.single_thread = true;
    }
    if disable_indirect {
        cfg.disable_indirect();
    }
    if disable_direct_corners {
        cfg.mapper.direct_corners = false;
    }
    if let Some(k) = force_k {
        cfg.tracker.force_k = Some(k);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Run {
            input,
            config,
            output,
            init,
            single_thread,
            disable_indirect,
            disable_direct_corners,
            force_k,
            overrides,
        } => {
            let cfg = build_config(
                config.as_deref(),
                init,
                single_thread,
                disable_indirect,
                disable_direct_corners,
                force_k,
                &overrides,
            )?;
            let mut source: Box<dyn FrameSource> = if input.is_dir() {
                let ds = Dataset::open(&input)?;
                for w in &ds.warnings {
                    eprintln!("warning: {w}");
                }
                Box::new(ds)
            } else {
                Box::new(SceneSource {
                    scene: load_scene(&input)?,
                })
            };
            if source.is_empty() {
                anyhow::bail!("{} has no frames", input.display());
            }
            let report = run_odometry(source.as_mut(), &cfg)?;
            write_outputs(&output, &report)?;
            println!(
                "frames {} keyframes {} map points {}",
                report.poses.len(),
                report.keyframes,
                report.map.len()
            );
            if let Some(m) = &report.metrics {
                println!(
                    "ate_rmse {:.6} alignment_error {:.6} drift_per_meter {:.6} extent {:.4}",
                    m.ate_rmse, m.alignment_error, m.drift_per_meter, m.extent
                );
            }
            if let Some(i) = report.tracking_lost_at {
                eprintln!("tracking lost at frame {i}");
                return Ok(ExitCode::from(2));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Render { scene, output } => {
            let scene = load_scene(&scene)?;
            let n = export_scene(&scene, &output)?;
            println!("rendered {n} frames to {}", output.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval { est, gt } => {
            let est: Vec<_> = read_trajectory(&est)?.into_iter().map(|(t, p)| (t, p.translation)).collect();
            let gt: Vec<_> = read_trajectory(&gt)?.into_iter().map(|(t, p)| (t, p.translation)).collect();
            let m = compute_alignment_error(&est, &gt)?;
            println!("matched {}", m.matched);
            println!("scale {:.6}", m.alignment.scale);
            println!("ate_rmse {:.6}", m.ate_rmse);
            println!("alignment_error {:.6}", m.alignment_error);
            println!("drift_per_meter {:.6}", m.drift_per_meter);
            println!("path_length {:.6}", m.path_length);
            println!("extent {:.6}", m.extent);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        // tracking loss is reported through Ok(2); everything else is bad input
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
