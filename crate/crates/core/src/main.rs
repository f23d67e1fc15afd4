//! `cotr` command line: generate, train, eval, export, ablate.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cotr::pipeline::{
    ablation_table, cmd_ablate, cmd_eval, cmd_export, cmd_generate, cmd_train, AblateAxis, EvalOptions, ExportSource,
    PipelineError, RunConfig, CHECKPOINT_FILE,
};

#[derive(Parser)]
#[command(name = "cotr", version, about = "Camera-to-voxel semantic occupancy on synthetic scenes")]
struct Cli {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.steps=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scenes, rendered views and visibility masks.
    Generate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a generated dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        /// Checkpoint file, or a run directory holding one.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        visible_mask: bool,
        #[arg(long)]
        proxy: bool,
    },
    /// Write PLY cubes and raw volumes for a grid file or a checkpoint's predictions.
    Export {
        #[arg(long, conflicts_with_all = ["checkpoint", "data"])]
        grid: Option<PathBuf>,
        #[arg(long, requires = "data")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Matched runs along one axis: grouping, compact-dims or ivt.
    Ablate {
        #[arg(long)]
        axis: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig, PipelineError> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::from_kv(&std::fs::read_to_string(p)?)?,
        None => RunConfig::default(),
    };
    for kv in &args.overrides {
        cfg.apply_override(kv)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn checkpoint_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(CHECKPOINT_FILE)
    } else {
        p.to_path_buf()
    }
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let cfg = load_config(&cli.config)?;
    match cli.command {
        Command::Generate { out } => {
            let data = cmd_generate(&cfg, &out)?;
            println!("wrote {} scenes to {}", data.scenes.len(), out.display());
        }
        Command::Train { data, run, resume } => {
            let every = cfg.train.log_every.max(1);
            let logs = cmd_train(&cfg, &data, &run, resume.as_deref(), |l| {
                if l.step % every == 0 || l.step == 1 {
                    println!("{}", l.line());
                }
            })?;
            if let Some(l) = logs.last() {
                println!("finished at step {} (loss {:.6})", l.step, l.loss.total);
            }
        }
        Command::Eval { checkpoint, data, out, visible_mask, proxy } => {
            let opts = EvalOptions { visible_mask, proxy };
            let s = cmd_eval(&cfg, &checkpoint_path(&checkpoint), &data, opts, out.as_deref())?;
            print!("{}", s.report.to_table());
            println!("majority baseline mIoU {:.4}", s.baseline.miou);
            if let Some(p) = s.proxy {
                println!("proxy mIoU {:.4}", p.miou);
            }
        }
        Command::Export { grid, checkpoint, data, out } => {
            let files = match (grid, checkpoint, data) {
                (Some(g), _, _) => cmd_export(ExportSource::Grid(&g), &out)?,
                (None, Some(c), Some(d)) => {
                    let c = checkpoint_path(&c);
                    cmd_export(ExportSource::Checkpoint { cfg: &cfg, checkpoint: &c, data_dir: &d }, &out)?
                }
                _ => return Err(PipelineError::Config("export needs --grid or --checkpoint with --data".into())),
            };
            for f in files {
                println!("{}", f.display());
            }
        }
        Command::Ablate { axis, out } => {
            let rows = cmd_ablate(&cfg, axis.parse::<AblateAxis>()?, out.as_deref())?;
            print!("{}", ablation_table(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
