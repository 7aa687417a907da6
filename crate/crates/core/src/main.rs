use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use efumi_bcg::commands::{self, Span};
use efumi_bcg::config::RunConfig;
use efumi_bcg::error::ErrorKind;

#[derive(Parser)]
#[command(name = "efumi-bcg", version, about = "Heartbeat concept learning and detection for bed-sensor BCG")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set em.u=0.1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct SpanArgs {
    /// Start of the time slice in seconds.
    #[arg(long)]
    from: Option<f64>,
    /// End of the time slice in seconds (exclusive).
    #[arg(long)]
    to: Option<f64>,
}

impl From<&SpanArgs> for Span {
    fn from(a: &SpanArgs) -> Self {
        Span {
            from: a.from,
            to: a.to,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic recording and its ground truth.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Ground-truth CSV (default: next to the recording as `<stem>.gt.csv`).
        #[arg(long)]
        gt: Option<PathBuf>,
    },
    /// Learn the heartbeat concept from a recording with ground truth.
    Train {
        #[arg(long)]
        recording: PathBuf,
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        span: SpanArgs,
    },
    /// Score instances, confirm beats and estimate heart rate.
    Detect {
        #[arg(long)]
        recording: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        span: SpanArgs,
    },
    /// ROC and heart-rate error of a `detect` output directory.
    Eval {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        recording: PathBuf,
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        span: SpanArgs,
    },
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    let cfg = RunConfig::from_file(cli.config.as_deref(), &overrides)?;
    match &cli.command {
        Command::Synth { out, gt } => {
            let beats = commands::cmd_synth(&cfg, out, gt.as_deref())
                .with_context(|| format!("writing {}", out.display()))?;
            println!("{beats} beats");
        }
        Command::Train {
            recording,
            gt,
            model,
            span,
        } => {
            let t = commands::cmd_train(recording, gt.as_deref(), &cfg, span.into(), model)?;
            println!(
                "{} positive bags, {} negative instances; {} iterations, {} background concepts, objective {:.6e}",
                t.positive_bags,
                t.negative_instances,
                t.fit.iterations,
                t.model.concepts.n_background(),
                t.model.objective_trace.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Detect {
            recording,
            model,
            out,
            span,
        } => {
            let d = commands::cmd_detect(recording, model, &cfg, span.into(), out)?;
            println!("{} confirmed beats", d.beats.times.len());
        }
        Command::Eval {
            detections,
            recording,
            gt,
            out,
            span,
        } => {
            let e = commands::cmd_eval(detections, recording, gt.as_deref(), &cfg, span.into(), out)?;
            print!("{}", e.report());
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<efumi_bcg::Error>().map(efumi_bcg::Error::kind) {
        Some(ErrorKind::Config) => 2,
        Some(ErrorKind::Numerical) => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
