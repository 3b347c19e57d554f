use std::path::PathBuf;
use std::process::exit;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use platedvi_cli::commands::{self, EvalOpts, SampleOpts, SynthOpts, TrainOpts};
use platedvi_cli::Failure;

#[derive(Parser)]
#[command(
    name = "platedvi",
    version,
    about = "Probabilistic models with plates, trained by stochastic variational inference"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Fit a built-in model to a CSV dataset and write a checkpoint.
    Train {
        /// Model to fit: gaussian_mean or vae.
        #[arg(long)]
        model: String,
        /// Training data, CSV of floats (header row optional).
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 0.001)]
        lr: f64,
        /// ELBO draws averaged per optimization step.
        #[arg(long, default_value_t = 1)]
        mc_samples: usize,
        /// Defaults to $PLATEDVI_SEED, then 0.
        #[arg(long)]
        seed: Option<u64>,
        /// Latent code width (vae only).
        #[arg(long, default_value_t = 2)]
        latent_dim: usize,
        /// Hidden layer width (vae only).
        #[arg(long, default_value_t = 16)]
        hidden_dim: usize,
        /// Observation model for the vae: normal or bernoulli.
        #[arg(long, default_value = "normal")]
        likelihood: String,
        /// Use Bayesian (weight-uncertain) decoder layers.
        #[arg(long)]
        bayesian_decoder: bool,
        /// Print one `epoch=<k> elbo=<float> wall_ms=<int>` line per epoch.
        #[arg(long)]
        verbose: bool,
    },
    /// Draw samples from a trained checkpoint, one CSV row per draw.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// What to sample: posterior:<name> or predictive:<name>.
        #[arg(long)]
        what: String,
        /// Number of draws.
        #[arg(long, default_value_t = 1)]
        n: usize,
        /// Defaults to $PLATEDVI_SEED, then 0.
        #[arg(long)]
        seed: Option<u64>,
        /// Conditioning data (required for amortized posteriors).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Predictive mode: draw latents from the prior instead of q.
        #[arg(long)]
        from_prior: bool,
    },
    /// Print the full-data ELBO of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Defaults to the value stored in the checkpoint.
        #[arg(long)]
        mc_samples: Option<usize>,
        /// Defaults to $PLATEDVI_SEED, then the checkpoint's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate a synthetic CSV dataset.
    Synth {
        /// Generator: gaussian (N(1,1), 1 column) or two_clusters (4 columns).
        #[arg(long)]
        generator: String,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to $PLATEDVI_SEED, then 0.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn report(failure: &Failure) -> ! {
    use std::io::Write;
    let msg = failure.msg.replace('\n', "; ");
    // Nothing useful can be done about a broken stderr; the exit code
    // still carries the diagnosis.
    let _ = writeln!(std::io::stderr(), "error={} msg={}", failure.code, msg);
    exit(failure.exit);
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                exit(0);
            }
            let first = e
                .to_string()
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ")
                .to_string();
            report(&Failure::usage(first));
        }
    };

    let result = match cli.cmd {
        Cmd::Train {
            model,
            data,
            out,
            epochs,
            batch_size,
            lr,
            mc_samples,
            seed,
            latent_dim,
            hidden_dim,
            likelihood,
            bayesian_decoder,
            verbose,
        } => commands::cmd_train(&TrainOpts {
            model,
            data,
            out,
            epochs,
            batch_size,
            lr,
            mc_samples,
            seed,
            latent_dim,
            hidden_dim,
            likelihood,
            bayesian_decoder,
            verbose,
        }),
        Cmd::Sample {
            checkpoint,
            what,
            n,
            seed,
            data,
            from_prior,
        } => commands::cmd_sample(&SampleOpts {
            checkpoint,
            what,
            n,
            seed,
            data,
            from_prior,
        }),
        Cmd::Eval {
            checkpoint,
            data,
            mc_samples,
            seed,
        } => commands::cmd_eval(&EvalOpts {
            checkpoint,
            data,
            mc_samples,
            seed,
        }),
        Cmd::Synth {
            generator,
            n,
            out,
            seed,
        } => commands::cmd_synth(&SynthOpts {
            generator,
            n,
            out,
            seed,
        }),
    };
    if let Err(f) = result {
        report(&f);
    }
}
