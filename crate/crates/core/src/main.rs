use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use ar2vp_core::experiment::{eval_checkpoint, run, sweep, ExperimentConfig, Preset, SweepAxis};

#[cfg(not(target_arch = "wasm32"))]
#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "ar2vp", version, about = "Road-to-vehicle cooperative perception experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// smoke, ablation, bandwidth or forgetting.
    #[arg(long)]
    preset: Option<String>,
    /// Overrides the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Artifacts directory.
    #[arg(long, default_value = "runs/out")]
    out: PathBuf,
}

impl Common {
    fn load(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), _) => {
                ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?
            }
            (None, Some(name)) => Preset::from_name(name)?.config(),
            (None, None) => bail!("pass --config FILE or --preset NAME"),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate every variant of a config.
    Run(Common),
    /// One run per value along an axis: compression, threshold or mu.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Re-evaluate a checkpoint on the config's scenes.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Print a preset as TOML.
    Preset { name: String },
}

fn report(out_dir: &Path, summary: &str) {
    print!("{summary}");
    eprintln!("artifacts written to {}", out_dir.display());
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn real_main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Run(c) => {
            let cfg = c.load()?;
            let out = run(&cfg, &c.out)?;
            report(&c.out, &out.summary_csv());
        }
        Command::Sweep { common, axis, values } => {
            let cfg = common.load()?;
            let out = sweep(&cfg, SweepAxis::from_name(&axis)?, &values, &common.out)?;
            report(&common.out, &out.summary_csv());
        }
        Command::Eval { common, checkpoint } => {
            let cfg = common.load()?;
            println!("scene,mIoU,AP50,AP70");
            for (s, m) in eval_checkpoint(&cfg, &checkpoint)?.iter().enumerate() {
                println!("{s},{:.6},{:.6},{:.6}", m.miou, m.ap50, m.ap70);
            }
        }
        Command::Preset { name } => print!("{}", Preset::from_name(&name)?.config().to_toml()?),
    }
    Ok(())
}
