use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bevseg::commands;
use bevseg::config::RunConfig;
use bevseg::error::{exit, Result};
use bevseg::report::metrics_row;

/// Semi-supervised bird's-eye-view segmentation on a synthetic pinhole world.
#[derive(Debug, Parser)]
#[command(name = "bevseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0.1)]
        labeled_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Config file supplying scene/grid/world settings.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a model; trailing `--section.key value` pairs override the config.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint on a labeled dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Directory for report.tsv (defaults to the checkpoint's directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the conjoint rotation of one sample as images.
    PreviewAugment {
        #[arg(long)]
        sample: PathBuf,
        /// Rotation angle in degrees.
        #[arg(long, allow_hyphen_values = true)]
        alpha: f64,
        /// zero, reflect, replicate or all.
        #[arg(long, default_value = "all")]
        border: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in geometry, gradient and EMA checks.
    SelfTest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        inject_bev_sign_flip: bool,
    },
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::GenData {
            n,
            labeled_fraction,
            seed,
            out,
            config,
        } => {
            let cfg = RunConfig::load(config.as_deref(), &[])?;
            let rows = commands::gen_data(&cfg, n, labeled_fraction, seed, &out)?;
            let labeled = rows.iter().filter(|(_, s)| *s == bevseg::dataset::Split::Labeled).count();
            println!("wrote {} samples ({labeled} labeled) to {}", rows.len(), out.display());
        }
        Command::Train { config, overrides } => {
            let cfg = RunConfig::load(config.as_deref(), &overrides)?;
            let classes = cfg.model_config().classes;
            print!("{}", bevseg::report::metrics_header(classes));
            let outcome = commands::train_run(&cfg, |r| print!("{}", metrics_row(r, classes)))?;
            println!("checkpoints written to {}", outcome.output_dir.display());
        }
        Command::Eval {
            checkpoint,
            dataset,
            threshold,
            out,
        } => {
            let out = out.unwrap_or_else(|| checkpoint.parent().map(PathBuf::from).unwrap_or_default());
            let report = commands::eval_run(&checkpoint, &dataset, threshold, &out)?;
            commands::print_report(&report);
        }
        Command::PreviewAugment {
            sample,
            alpha,
            border,
            out,
        } => {
            let modes = commands::parse_border(&border)?;
            for p in commands::preview_augment(&sample, alpha, &modes, &out)? {
                println!("{}", p.display());
            }
        }
        Command::SelfTest {
            seed,
            inject_bev_sign_flip,
        } => {
            let mut ok = true;
            for o in commands::self_test(seed, inject_bev_sign_flip) {
                match &o.result {
                    Ok(()) => println!("PASS {}", o.name),
                    Err(msg) => {
                        ok = false;
                        println!("FAIL {}: {msg}", o.name);
                    }
                }
            }
            if !ok {
                return Ok(ExitCode::from(exit::SELF_TEST_FAILED as u8));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE as u8 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
