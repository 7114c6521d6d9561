use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use splatnet_cli::{
    cmd_eval, cmd_filter, cmd_lattice_stats, cmd_predict, cmd_train, EvalMode, EvalOptions, TrainOverrides, EXIT_USAGE,
};

/// Sparse lattice networks for point-cloud segmentation.
#[derive(Parser)]
#[command(name = "splatnet", version)]
struct Cli {
    /// Worker threads for lattice and convolution loops. Results do not
    /// depend on this value.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    /// Random seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    AverageIou,
    ShapenetMiou,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network from a `key = value` config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Initial lattice scale; overrides `lambda0`.
        #[arg(long, allow_hyphen_values = true)]
        lambda: Option<String>,
    },
    /// Label a point cloud with a trained checkpoint.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write per-class probabilities as `prob_<class>` channels.
        #[arg(long)]
        probabilities: bool,
    },
    /// Score predicted labels against ground truth.
    Eval {
        /// Predicted cloud, or directory tree for `shapenet-miou`.
        #[arg(long)]
        pred: PathBuf,
        /// Ground-truth cloud, or directory tree of `<category>/<object>`
        /// files for `shapenet-miou`.
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::AverageIou)]
        mode: Mode,
        /// Class count; defaults to the largest label + 1.
        #[arg(long)]
        num_classes: Option<usize>,
        /// Label excluded from scoring.
        #[arg(long, allow_hyphen_values = true)]
        ignore_label: Option<i32>,
        /// Print CSV instead of a table.
        #[arg(long)]
        csv: bool,
    },
    /// Transport channels from one cloud onto another through a lattice.
    Filter {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        dst: PathBuf,
        /// One scale, or one per lattice channel (comma separated).
        #[arg(long, allow_hyphen_values = true)]
        lambda: String,
        #[arg(long)]
        out: PathBuf,
        /// Channels to transport.
        #[arg(long, default_value = "rgb")]
        channels: String,
        /// Channels spanning the lattice space.
        #[arg(long, default_value = "xyz")]
        lattice_channels: String,
    },
    /// Print lattice size and fill for a list of scales.
    LatticeStats {
        #[arg(long)]
        cloud: PathBuf,
        /// Comma-separated isotropic scales.
        #[arg(long, allow_hyphen_values = true)]
        lambda: String,
        #[arg(long, default_value = "xyz")]
        channels: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return ExitCode::from(EXIT_USAGE as u8);
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        eprintln!("error: {e}");
        return ExitCode::from(EXIT_USAGE as u8);
    }
    let code = match cli.command {
        Command::Train { config, out, lambda } => cmd_train(
            &config,
            &TrainOverrides {
                seed: cli.seed,
                output_dir: out,
                lambda0: lambda,
            },
        ),
        Command::Predict {
            checkpoint,
            cloud,
            out,
            probabilities,
        } => cmd_predict(&checkpoint, &cloud, &out, probabilities),
        Command::Eval {
            pred,
            gt,
            mode,
            num_classes,
            ignore_label,
            csv,
        } => {
            let mode = match mode {
                Mode::AverageIou => EvalMode::AverageIou,
                Mode::ShapenetMiou => EvalMode::ShapenetMiou,
            };
            cmd_eval(
                &pred,
                &gt,
                mode,
                &EvalOptions {
                    num_classes,
                    ignore_label,
                    csv,
                },
            )
        }
        Command::Filter {
            src,
            dst,
            lambda,
            out,
            channels,
            lattice_channels,
        } => cmd_filter(&src, &dst, &lambda, &out, &channels, &lattice_channels),
        Command::LatticeStats { cloud, lambda, channels } => cmd_lattice_stats(&cloud, &lambda, &channels),
    };
    ExitCode::from(code as u8)
}
