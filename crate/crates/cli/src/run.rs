//! Argument handling and dispatch.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use crate::commands::{self, EvalOptions, Result};
use crate::config::{emit_config, ConfigBuilder, ExperimentConfig, Origin};

pub const SEED_VAR: &str = "DPL_SEED";

#[derive(Debug, Parser)]
#[command(name = "dpl", version, about = "Disentangled perceptual learning at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// `key = value` config file; unset keys keep their defaults.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Overrides as `--key value` or `--key=value`, e.g. `--dpl.margin 0.5`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write paired train/val PPMs and manifests under the output directory.
    GenData(Common),
    /// Pretrain the feature network on synthetic textures (exit 2 below the gate).
    Pretrain(Common),
    /// Train the generator (exit 3 on a numerical halt).
    Train {
        /// Feature network checkpoint [default: <out>/psi.dplc]
        #[arg(long)]
        psi: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Score a generator on the val split and write report.csv.
    Eval {
        /// Generator checkpoint [default: <out>/f.dplc]
        #[arg(long, conflicts_with = "identity")]
        generator: Option<PathBuf>,
        /// Evaluate a freshly initialized (identity) generator.
        #[arg(long)]
        identity: bool,
        /// Feature network checkpoint [default: <out>/psi.dplc]
        #[arg(long)]
        psi: Option<PathBuf>,
        /// Use the targets as inputs.
        #[arg(long)]
        targets_as_inputs: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Apply the configured anchor distortion to one PPM.
    Distort {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn help_footer() -> String {
    let mut s = String::from(
        "Configuration keys and defaults (set them in a --config file or as --key value after the subcommand):\n",
    );
    for line in emit_config(&ExperimentConfig::default()).lines() {
        s.push_str("  ");
        s.push_str(line);
        s.push('\n');
    }
    s.push_str(&format!("\n{SEED_VAR} overrides the config file's seed; a --seed flag overrides both.\n"));
    s.push_str("Exit codes: 0 success, 1 usage or config error, 2 pretraining gate failure, 3 numerical halt.");
    s
}

/// File, then `DPL_SEED`, then flags.
pub fn resolve(config: Option<&PathBuf>, env_seed: Option<&str>, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut b = ConfigBuilder::new();
    if let Some(path) = config {
        b.file(path)?;
    }
    if let Some(seed) = env_seed {
        b.set("seed", seed, Origin::Env(SEED_VAR))?;
    }
    b.flags(overrides)?;
    Ok(b.build()?)
}

fn dispatch(cli: Cli, env_seed: Option<&str>) -> Result<()> {
    let cfg = |c: &Common| resolve(c.config.as_ref(), env_seed, &c.overrides);
    match cli.command {
        Command::GenData(c) => {
            let cfg = cfg(&c)?;
            commands::record_config(&cfg)?;
            let [train, val] = commands::gen_data(&cfg)?;
            println!("wrote {train} train and {val} val pairs to {}", cfg.out.display());
        }
        Command::Pretrain(c) => {
            let cfg = cfg(&c)?;
            commands::record_config(&cfg)?;
            let report = commands::pretrain(&cfg)?;
            println!(
                "held-out accuracy {:.4} after {} epochs; wrote {}",
                report.final_accuracy(),
                report.epoch_accuracy.len(),
                commands::psi_path(&cfg).display()
            );
        }
        Command::Train { psi, common } => {
            let cfg = cfg(&common)?;
            commands::record_config(&cfg)?;
            let psi = psi.unwrap_or_else(|| commands::psi_path(&cfg));
            let history = commands::train(&cfg, &psi)?;
            println!(
                "trained {} iterations; wrote {}",
                history.len(),
                commands::generator_path(&cfg).display()
            );
        }
        Command::Eval { generator, identity, psi, targets_as_inputs, common } => {
            let cfg = cfg(&common)?;
            let generator = if identity {
                None
            } else {
                Some(generator.unwrap_or_else(|| commands::generator_path(&cfg)))
            };
            let report = commands::eval(&cfg, &EvalOptions { generator, psi, targets_as_inputs })?;
            let m = &report.mean;
            println!(
                "{} pairs: psnr {:.3} dB, ms_ssim {:.4}, dfd {:.6}",
                report.count(),
                m.psnr,
                m.ms_ssim,
                m.dfd
            );
        }
        Command::Distort { input, output, common } => {
            let cfg = cfg(&common)?;
            commands::distort(&cfg, &input, &output)?;
        }
    }
    Ok(())
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code; messages go to stdout/stderr.
pub fn run<I, T>(args: I, env_seed: Option<&str>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let footer = help_footer();
    let command = Cli::command()
        .after_help(footer.clone())
        .mut_subcommands(|s| s.after_help(footer.clone()));
    let matches = match command.try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 1;
        }
    };
    match dispatch(cli, env_seed) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
