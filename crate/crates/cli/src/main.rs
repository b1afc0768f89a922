use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use mpnn_cli::{
    cmd_eval, cmd_partition, cmd_pseudo, cmd_report, cmd_synth, cmd_train, exit_code, EvalOptions,
    TrainOptions,
};
use mpnn_core::config::RunConfig;
use mpnn_core::datasets::RaterSelector;
use mpnn_core::trainer::{Ablation, TrainMode};

#[derive(Parser)]
#[command(name = "mpnn", version, about = "Optic disc/cup segmentation under noisy annotations")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(short, long, global = true, env = "MPNN_CONFIG", default_value = "mpnn.toml")]
    config: PathBuf,

    /// Override a configuration key, e.g. `--set recipe.epochs=30`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset into `data.root`.
    Synth {
        /// Overwrite an existing dataset directory.
        #[arg(long)]
        force: bool,
    },
    /// Train the pseudo-label ensemble and label the training split.
    Pseudo,
    /// Split every training pixel into clean/noisy from the pseudo-labels.
    Partition,
    /// Train a baseline or noise-aware model and evaluate it.
    Train {
        #[arg(long, value_enum, default_value = "mpnn")]
        mode: ModeArg,
        #[arg(long, value_enum, default_value = "none")]
        ablate: AblateArg,
        /// Run name under `<output_dir>/train/`.
        #[arg(long)]
        name: Option<String>,
        /// Continue from the latest checkpoint of the run.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// rater<k>, majority-vote or clean; defaults to `eval.target`.
        #[arg(long)]
        target: Option<RaterSelector>,
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Merge all reports of the run into one table.
    Report,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Baseline,
    Mpnn,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblateArg {
    None,
    CleanOnly,
    NoisyOnly,
}

fn run(cli: Cli) -> mpnn_core::Result<()> {
    let cfg = RunConfig::load(&cli.config, &cli.overrides)?;
    match cli.command {
        Command::Synth { force } => {
            let m = cmd_synth(&cfg, force)?;
            println!(
                "wrote {} train / {} test samples ({} files) to {}",
                m.train.len(),
                m.test.len(),
                m.files,
                cfg.data.root.display()
            );
        }
        Command::Pseudo => {
            let set = cmd_pseudo(&cfg)?;
            for m in &set.members {
                println!("member seed {}: DSC_m {:.4} at epoch {}", m.seed, m.dsc_m, m.epochs);
            }
            println!("{} images x {} pseudo-labels", set.len(), set.k);
        }
        Command::Partition => {
            let m = cmd_partition(&cfg)?;
            println!("clean pixels: {}", m.s_cl_total);
            println!("noisy pixels: {}", m.s_no_total);
        }
        Command::Train {
            mode,
            ablate,
            name,
            resume,
        } => {
            let opts = TrainOptions {
                mode: match mode {
                    ModeArg::Baseline => TrainMode::Baseline,
                    ModeArg::Mpnn => TrainMode::Mpnn,
                },
                ablation: match ablate {
                    AblateArg::None => Ablation::None,
                    AblateArg::CleanOnly => Ablation::CleanOnly,
                    AblateArg::NoisyOnly => Ablation::NoisyOnly,
                },
                name,
                resume,
            };
            let out = cmd_train(&cfg, &opts)?;
            let r = &out.report;
            println!(
                "{} after {} steps: dice disc {:.2} cup {:.2}, iou disc {:.2} cup {:.2} ({})",
                r.method,
                out.steps,
                r.dice_disc,
                r.dice_cup,
                r.iou_disc,
                r.iou_cup,
                out.dir.display()
            );
        }
        Command::Eval {
            checkpoint,
            target,
            method,
            out,
        } => {
            let (r, path) = cmd_eval(&cfg, &checkpoint, &EvalOptions { target, method, out })?;
            println!(
                "{} vs {}: dice disc {:.2} cup {:.2}, iou disc {:.2} cup {:.2} ({})",
                r.method,
                r.target,
                r.dice_disc,
                r.dice_cup,
                r.iou_disc,
                r.iou_cup,
                path.display()
            );
        }
        Command::Report => {
            let (rows, path) = cmd_report(&cfg)?;
            println!("{} rows written to {}", rows.len(), path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
