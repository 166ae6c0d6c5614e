//! Thin CLI over the pipeline stages. Exit codes: 0 ok, 1 user error,
//! 2 internal invariant violation.

use clap::{Parser, Subcommand};
use spikezip::checkpoint::hex;
use spikezip::config::RunConfig;
use spikezip::error::Result;
use spikezip::pipeline;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "spikezip",
    about = "Compressed low-latency spiking networks: sparse ANN training, conversion, SNN fine-tuning, profiling",
    after_help = "Thread count: set RAYON_NUM_THREADS (1 = reference mode used by the test suite)."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Attention-guided sparse ANN training
    TrainAnn {
        #[arg(long)]
        config: PathBuf,
        /// Unpruned meta-model checkpoint (required when attn.alpha > 0)
        #[arg(long)]
        meta: Option<PathBuf>,
        /// Output checkpoint path
        #[arg(long, default_value = "ann.ckpt")]
        out: PathBuf,
        /// Directory for train_log.csv and sparsity.csv
        #[arg(long, default_value = "logs")]
        log_dir: PathBuf,
    },
    /// ANN-to-SNN conversion with percentile threshold calibration
    Convert {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "converted.ckpt")]
        out: PathBuf,
    },
    /// Surrogate-gradient SNN fine-tuning of a converted checkpoint
    TrainSnn {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "snn.ckpt")]
        out: PathBuf,
        #[arg(long, default_value = "logs")]
        log_dir: PathBuf,
    },
    /// Spike activity, FLOPs and energy reports for a checkpoint
    Profile {
        #[arg(long = "in")]
        input: PathBuf,
        /// Dataset directory
        #[arg(long)]
        data: PathBuf,
        /// Output directory for metrics.csv and summary.csv
        #[arg(long)]
        out: PathBuf,
        /// Optional config (timesteps, encoding, energy constants)
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::TrainAnn { config, meta, out, log_dir } => {
            let cfg = RunConfig::load(&config)?;
            let report = pipeline::cmd_train_ann(&cfg, meta.as_deref(), &out, &log_dir)?;
            println!(
                "train-ann done: {} epochs, test accuracy {:.2}%, checkpoint {}",
                report.rows.len(),
                report.final_test_acc * 100.0,
                out.display()
            );
        }
        Command::Convert { input, config, out } => {
            let cfg = RunConfig::load(&config)?;
            let report = pipeline::cmd_convert(&cfg, &input, &out)?;
            println!(
                "convert done: thresholds [{}], test accuracy {:.2}% at T={}, checkpoint {}",
                report
                    .v_th
                    .iter()
                    .map(|v| format!("{:.4}", v))
                    .collect::<Vec<_>>()
                    .join(", "),
                report.test_acc * 100.0,
                cfg.snn.steps,
                out.display()
            );
        }
        Command::TrainSnn { input, config, out, log_dir } => {
            let cfg = RunConfig::load(&config)?;
            let report = pipeline::cmd_train_snn(&cfg, &input, &out, &log_dir)?;
            println!(
                "train-snn done: {} epochs, test accuracy {:.2}%, checkpoint {}",
                report.rows.len(),
                report.final_test_acc * 100.0,
                out.display()
            );
        }
        Command::Profile { input, data, out, config } => {
            let cfg = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::default(),
            };
            let report = pipeline::cmd_profile(&cfg, &input, &data, &out)?;
            let ck = spikezip::checkpoint::Checkpoint::load(&input)?;
            println!(
                "profile done: stage {}, accuracy {:.2}%, weight ratio {:.2}x, channel ratio {:.2}x, checkpoint digest {}",
                report.stage.name(),
                report.accuracy * 100.0,
                report.weight_ratio,
                report.channel_ratio,
                &hex(&ck.digest())[..16],
            );
            if let Some(e) = report.energy_snn {
                println!(
                    "energy: snn {:.1} units vs dense-ann {:.1} units ({:.1}x)",
                    e,
                    report.energy_ann_dense,
                    report.energy_ann_dense / e
                );
            }
            println!("reports written to {}", out.display());
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run() {
        eprintln!("{}", e.machine_line());
        std::process::exit(e.exit_code());
    }
}
