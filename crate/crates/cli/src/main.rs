use std::io::Write;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use naegen_cli::{cmd_baseline, cmd_campaign, cmd_generate, cmd_report, cmd_serve, cmd_sweep, CliError, Config, Overrides};
use naegen_core::registry::Registry;
use serde::Serialize;

/// Natural adversarial examples by class-token embedding optimization.
#[derive(Parser)]
#[command(name = "naegen", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one optimization and write its trace.
    Generate(Common),
    /// Prefilter classes, prepare latents and optimize every one of them.
    Campaign(Common),
    /// The campaign protocol with the latent vector as the variable.
    Baseline(Common),
    /// Generate along a random ±1 direction of the class token.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Relative magnitudes, comma separated.
        #[arg(long, value_delimiter = ',')]
        magnitudes: Option<Vec<f64>>,
    },
    /// Print a campaign report as JSON (or CSV).
    Report {
        dir: PathBuf,
        #[arg(long)]
        csv: bool,
        /// Also rewrite report.json and report.csv in the campaign directory.
        #[arg(long)]
        write: bool,
    },
    /// Queue a campaign for review and serve the review API.
    Serve {
        dir: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Queue every adversarial step, not only the first.
        #[arg(long)]
        all_steps: bool,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    class: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    /// euclidean | cosine
    #[arg(long)]
    metric: Option<String>,
    /// class-token | text-embedding | latent
    #[arg(long)]
    variable: Option<String>,
    #[arg(long)]
    guidance_scale: Option<f64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn resolve(self, magnitudes: Option<Vec<f64>>) -> Result<Config, CliError> {
        let overrides = Overrides {
            backend: self.backend,
            class: self.class,
            seed: self.seed,
            steps: self.steps,
            lr: self.lr,
            lambda: self.lambda,
            metric: self.metric,
            variable: self.variable,
            guidance_scale: self.guidance_scale,
            workers: self.workers,
            out: self.out,
            magnitudes,
        };
        Config::load(self.config.as_deref(), &overrides)
    }
}

/// Write to stdout; a reader that went away (`| head`) is not an error.
fn emit(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(text.as_bytes()).and_then(|_| out.flush());
}

fn print_json<T: Serialize>(value: &T) -> Result<(), CliError> {
    let s = serde_json::to_string_pretty(value).map_err(|e| CliError::Internal(e.to_string()))?;
    emit(&format!("{s}\n"));
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let registry = Registry::builtin();
    match cli.command {
        Command::Generate(c) => print_json(&cmd_generate(&c.resolve(None)?, &registry)?),
        Command::Campaign(c) => print_json(&cmd_campaign(&c.resolve(None)?, &registry)?),
        Command::Baseline(c) => print_json(&cmd_baseline(&c.resolve(None)?, &registry)?),
        Command::Sweep { common, magnitudes } => print_json(&cmd_sweep(&common.resolve(magnitudes)?, &registry)?),
        Command::Report { dir, csv, write } => {
            let report = cmd_report(&dir, write)?;
            if csv {
                emit(&report.to_csv()?);
                Ok(())
            } else {
                print_json(&report)
            }
        }
        Command::Serve { dir, addr, all_steps } => cmd_serve(&dir, addr, all_steps),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_env("NAEGEN_LOG"))
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            emit(&format!("{}\n", e.to_json()));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
